"""Glue between configs, datasets, models and saliency methods.

The CLI and the acceptance suite both go through these helpers so that a
command-line run and a test run compute the same thing.
"""

from __future__ import annotations

import logging

import numpy as np

from .attribution import layerwise_contribution, upsample_through_pools
from .baselines import gradcam_hit, random_map, rollout_hit
from .config import RunConfig
from .data import Dataset, DataError, load_image_dir, synth_quadrant
from .model import HiT, check_images, forward_with_ledger
from .train import TrainResult, train

log = logging.getLogger(__name__)

METHODS = ("ledger", "rollout", "gradcam", "random")


def load_split(cfg: RunConfig, split: str) -> Dataset:
    """Train or eval split described by the ``[data]`` section."""
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    d = cfg.data
    if d.source == "synthetic-quadrant":
        n = d.n_train_per_class if split == "train" else d.n_eval_per_class
        data = synth_quadrant(n, image_size=cfg.model.image_size, seed=d.seed + (split == "eval"),
                              patch_size=cfg.model.patch_size, radius=d.radius, noise=d.noise)
    else:
        path = d.path if split == "train" or not d.eval_path else d.eval_path
        data = load_image_dir(path)
    check_compatible(data, cfg.model)
    return data


def check_compatible(data: Dataset, model_cfg) -> None:
    if data.image_size != model_cfg.image_size:
        raise DataError(f"images are {data.image_size}px but the model expects {model_cfg.image_size}px")
    if len(data) and int(data.labels.max()) >= model_cfg.num_classes:
        raise DataError(f"data has {data.num_classes} classes but the model has {model_cfg.num_classes}")


def train_run(cfg: RunConfig, on_epoch=None) -> TrainResult:
    """Build the model from ``cfg.model`` and train it on the configured data."""
    train_data = load_split(cfg, "train")
    eval_data = load_split(cfg, "eval")
    model = HiT(cfg.model, seed=cfg.train.seed)
    log.info("training on %d images, evaluating on %d", len(train_data), len(eval_data))
    return train(model, cfg.train, train_data, eval_data, on_epoch=on_epoch)


def predicted_classes(model: HiT, images) -> np.ndarray:
    return model.predict_logits(images).argmax(axis=-1)


def _per_image(classes, batch: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(classes, dtype=np.int64), (batch,))


def ledger_maps(model: HiT, images, classes, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Ledger saliency ``(B, N, N)`` for the given classes and the matching logits ``(B,)``."""
    images = check_images(images, model.cfg)
    cls = _per_image(classes, len(images))
    cfg = model.cfg
    maps, logits = [], []
    params = model.arrays()
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        res = forward_with_ledger(images[sl], params, cfg)
        idx = cls[sl]
        total = 0.0
        for layer, z in enumerate(res.folded.layers):
            picked = np.take_along_axis(z, idx[:, None, None, None], axis=-1)[..., 0]
            total = total + upsample_through_pools(picked, cfg.pools_before(layer), cfg.grid_side)
        maps.append(total)
        logits.append(np.take_along_axis(res.logits, idx[:, None], axis=-1)[:, 0])
    return np.concatenate(maps), np.concatenate(logits)


def rollout_maps(model: HiT, images, batch_size: int = 128) -> np.ndarray:
    images = check_images(images, model.cfg)
    params = model.arrays()
    out = []
    for start in range(0, len(images), batch_size):
        res = forward_with_ledger(images[start : start + batch_size], params, model.cfg)
        out.append(rollout_hit(res.attention, model.cfg))
    return np.concatenate(out)


def gradcam_maps(model: HiT, images, classes, layer: int | None = None, batch_size: int = 64) -> np.ndarray:
    images = check_images(images, model.cfg)
    cls = _per_image(classes, len(images))
    if layer is not None and layer < 0:
        layer = model.cfg.depth + layer
    out = []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        out.append(gradcam_hit(model, images[sl], cls[sl], layer))
    return np.concatenate(out)


def method_maps(model: HiT, images, method: str, classes=None, seed: int = 0,
                gradcam_layer: int | None = None) -> np.ndarray:
    """Finest-grid maps ``(B, N, N)`` from one of :data:`METHODS`.

    ``classes`` defaults to the model's predictions.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    images = check_images(images, model.cfg)
    if classes is None:
        classes = predicted_classes(model, images)
    if method == "ledger":
        return ledger_maps(model, images, classes)[0]
    if method == "rollout":
        return rollout_maps(model, images)
    if method == "gradcam":
        return gradcam_maps(model, images, classes, gradcam_layer)
    return random_map(model.cfg.grid_side, seed, batch=len(images))


def layer_profiles(model: HiT, images, classes=None) -> np.ndarray:
    """Signed per-layer contributions ``(B, L)`` to each image's class logit."""
    images = check_images(images, model.cfg)
    if classes is None:
        classes = predicted_classes(model, images)
    cls = _per_image(classes, len(images))
    res = forward_with_ledger(images, model.arrays(), model.cfg)
    out = np.empty((len(images), model.cfg.depth))
    for c in np.unique(cls):
        sel = cls == c
        out[sel] = layerwise_contribution(res, model.cfg, int(c)).signed[sel]
    return out
