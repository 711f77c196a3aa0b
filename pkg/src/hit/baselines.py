"""Post-hoc saliency on HiT: mean-attention rollout, GradCAM, and a random control."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attribution import upsample_through_pools
from .model import ForwardTrace, HiT, HiTConfig, check_images


def rollout_hit(attention: list[np.ndarray], cfg: HiTConfig) -> np.ndarray:
    """Average CLS attention over heads, bring every layer to the finest grid, average layers.

    ``attention[l]`` holds probabilities ``(..., h, M_l)``. HiT has a single
    query per layer, so there is no square matrix to chain; no identity
    (residual) term is added.
    """
    maps = []
    for layer, w in enumerate(attention):
        mean = np.asarray(w).mean(axis=-2)
        side = int(round(np.sqrt(mean.shape[-1])))
        grid = mean.reshape(mean.shape[:-1] + (side, side))
        maps.append(upsample_through_pools(grid, cfg.pools_before(layer), cfg.grid_side))
    return np.mean(maps, axis=0)


def _class_score(logits, c, num_classes: int):
    """Sum of the selected logit of every image; images do not interact in HiT."""
    batch = logits.shape[0]
    cls = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,))
    if cls.min() < 0 or cls.max() >= num_classes:
        raise IndexError(f"class {c} out of range [0, {num_classes})")
    mask = np.zeros(logits.shape, dtype=logits.data.dtype)
    mask[np.arange(batch), cls] = 1.0
    return T.tsum(T.mul(logits, T.Tensor(mask)))


def gradcam_hit(model: HiT, images, c: int, target_layer: int | None = None) -> np.ndarray:
    """GradCAM on the grid tokens entering block ``target_layer`` (default: the last).

    ``c`` is one class for the whole batch or one class per image.

    Channel weights are the spatial mean of ``d logit_c / d token``; each cell
    gets ``relu(sum_ch weight * token)``, then is brought to the finest grid.
    """
    cfg = model.cfg
    if target_layer is None:
        target_layer = cfg.depth - 1
    if not 0 <= target_layer < cfg.depth:
        raise IndexError(f"target layer {target_layer} outside [0, {cfg.depth})")
    images = check_images(images, cfg)
    single = images.ndim == 3
    trace = ForwardTrace()
    logits = model.forward(images, trace=trace)
    T.backward(_class_score(logits, c, cfg.num_classes))
    grid = trace.grids[target_layer]
    grads = grid.grad if grid.grad is not None else np.zeros_like(grid.data)
    alpha = grads.mean(axis=(1, 2), keepdims=True)
    cam = np.maximum((alpha * grid.data).sum(axis=-1), 0.0)
    model.zero_grad()
    cam = upsample_through_pools(cam, cfg.pools_before(target_layer), cfg.grid_side)
    return cam[0] if single else cam


def gradcam_gradient(model: HiT, images, c: int, target_layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(tokens, d logit_c / d tokens)`` at the GradCAM target layer."""
    cfg = model.cfg
    if target_layer is None:
        target_layer = cfg.depth - 1
    trace = ForwardTrace()
    logits = model.forward(check_images(images, cfg), trace=trace)
    T.backward(_class_score(logits, c, cfg.num_classes))
    grid = trace.grids[target_layer]
    out = grid.data.copy(), (grid.grad.copy() if grid.grad is not None else np.zeros_like(grid.data))
    model.zero_grad()
    return out


def random_map(side: int, seed: int, batch: int | None = None) -> np.ndarray:
    """Uniform [0, 1) map, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    shape = (side, side) if batch is None else (batch, side, side)
    return rng.random(shape)
