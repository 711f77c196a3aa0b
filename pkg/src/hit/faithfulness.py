"""Insertion/deletion curves, (n)AUC, layer ablations and cascading randomization."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .model import HiT, init_param, param_shapes
from .tensor import ShapeError, softmax_array

MODES = ("insertion", "deletion")
CORRUPTIONS = ("zero", "blur")
ABLATION_MODES = ("excluding-layer", "exclusive-layer", "cumulative-removed", "cumulative-inserted")


def worker_count() -> int:
    env = os.environ.get("HIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    """``map`` over a thread pool sized by ``HIT_THREADS``; results keep input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def corrupt_zero(image: np.ndarray) -> np.ndarray:
    return np.zeros_like(image)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"blur kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def corrupt_blur(image: np.ndarray, sigma: float = 5.0, kernel: int = 11) -> np.ndarray:
    """Separable Gaussian blur of an ``(H, W, C)`` image with reflect padding."""
    k = gaussian_kernel(sigma, kernel)
    r = kernel // 2
    img = np.asarray(image, dtype=np.float64)
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    rows = sum(k[i] * padded[i : i + h, :, :] for i in range(kernel))
    out = sum(k[j] * rows[:, j : j + w, :] for j in range(kernel))
    return out.astype(image.dtype)


def corrupt(image: np.ndarray, corruption: str, sigma: float = 5.0, kernel: int = 11) -> np.ndarray:
    if corruption == "zero":
        return corrupt_zero(image)
    if corruption == "blur":
        return corrupt_blur(image, sigma, kernel)
    raise ValueError(f"unknown corruption {corruption!r}; expected one of {CORRUPTIONS}")


# ---------------------------------------------------------------------------
# insertion / deletion
# ---------------------------------------------------------------------------

ProbFn = Callable[[np.ndarray], np.ndarray]


def as_prob_fn(model, batch_size: int = 128) -> ProbFn:
    """Class probabilities ``(B, C)`` for a HiT or any images->probabilities callable."""
    if isinstance(model, HiT):
        return lambda x: softmax_array(model.predict_logits(x, batch_size=batch_size).astype(np.float64))
    return model


def rank_cells(grid_map: np.ndarray) -> np.ndarray:
    """Flat cell indices by descending value; ties keep row-major order."""
    return np.argsort(-np.asarray(grid_map).ravel(), kind="stable")


def _cell_mask(order: np.ndarray, k: int, side: int, patch: int) -> np.ndarray:
    mask = np.zeros(side * side, dtype=bool)
    mask[order[:k]] = True
    mask = mask.reshape(side, side)
    return np.repeat(np.repeat(mask, patch, axis=0), patch, axis=1)


def perturbation_series(image, grid_map, mode: str, corruption: str, sigma=5.0, kernel=11) -> np.ndarray:
    """The ``M + 1`` images of an insertion or deletion run, one token per step."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    grid_map = np.asarray(grid_map)
    side = grid_map.shape[-1]
    if grid_map.ndim != 2 or grid_map.shape[0] != side:
        raise ShapeError(f"saliency map must be square, got {grid_map.shape}")
    h = image.shape[0]
    if h % side:
        raise ShapeError(f"map side {side} does not tile an image of side {h}")
    patch = h // side
    base = corrupt(image, corruption, sigma, kernel)
    order = rank_cells(grid_map)
    m = side * side
    series = np.empty((m + 1,) + image.shape, dtype=image.dtype)
    for k in range(m + 1):
        mask = _cell_mask(order, k, side, patch)[..., None]
        if mode == "insertion":
            series[k] = np.where(mask, image, base)
        else:
            series[k] = np.where(mask, base, image)
    return series


def perturbation_curve(model, image, grid_map, mode: str, corruption: str = "zero",
                       sigma: float = 5.0, kernel: int = 11, target: int | None = None) -> np.ndarray:
    """Probability of the clean-image prediction after each step (``M + 1`` values)."""
    prob = as_prob_fn(model)
    series = perturbation_series(image, grid_map, mode, corruption, sigma, kernel)
    if target is None:
        target = int(np.argmax(prob(image[None])[0]))
    return np.asarray(prob(series))[:, target]


def insertion_curve(model, image, grid_map, corruption="zero", **kw) -> np.ndarray:
    return perturbation_curve(model, image, grid_map, "insertion", corruption, **kw)


def deletion_curve(model, image, grid_map, corruption="zero", **kw) -> np.ndarray:
    return perturbation_curve(model, image, grid_map, "deletion", corruption, **kw)


def auc(curve, fractions=None) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < 2:
        raise ValueError("a curve needs at least two points")
    if fractions is None:
        fractions = np.linspace(0.0, 1.0, curve.size)
    return float(np.trapezoid(curve, fractions))


@dataclass
class NormalizedAUC:
    value: float
    degenerate: bool

    def __float__(self) -> float:
        return self.value


def nauc(curve, fractions=None) -> NormalizedAUC:
    """AUC of the min-max normalized curve; flat curves give 0.5 and a flag."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < 2:
        raise ValueError("a curve needs at least two points")
    lo, hi = curve.min(), curve.max()
    if hi - lo < 1e-9:
        return NormalizedAUC(0.5, True)
    return NormalizedAUC(auc((curve - lo) / (hi - lo), fractions), False)


@dataclass
class CurveRecord:
    mode: str
    corruption: str
    method: str
    fractions: np.ndarray
    mean_prob: np.ndarray
    per_image: np.ndarray | None = None

    def __post_init__(self):
        f = self.fractions
        if f[0] != 0.0 or f[-1] != 1.0 or np.any(np.diff(f) <= 0):
            raise ValueError("fractions must increase strictly from 0 to 1")

    @property
    def auc(self) -> float:
        return auc(self.mean_prob, self.fractions)

    @property
    def nauc(self) -> NormalizedAUC:
        return nauc(self.mean_prob, self.fractions)

    def per_image_auc(self) -> np.ndarray:
        if self.per_image is None:
            return np.zeros(0)
        return np.array([auc(c, self.fractions) for c in self.per_image])


def evaluate_curves(model, images, maps, mode: str, corruption: str = "zero", method: str = "",
                    sigma: float = 5.0, kernel: int = 11, keep_per_image: bool = True) -> CurveRecord:
    """Mean insertion/deletion curve over a set of images and their maps."""
    prob = as_prob_fn(model)
    images = np.asarray(images)
    targets = np.asarray(prob(images)).argmax(axis=-1)

    def one(i):
        return perturbation_curve(prob, images[i], maps[i], mode, corruption, sigma, kernel, int(targets[i]))

    curves = np.stack(parallel_map(one, range(len(images))))
    fractions = np.linspace(0.0, 1.0, curves.shape[1])
    return CurveRecord(mode, corruption, method, fractions, curves.mean(axis=0),
                       curves if keep_per_image else None)


# ---------------------------------------------------------------------------
# layer ablation
# ---------------------------------------------------------------------------

def ablation_settings(depth: int, mode: str, order=None) -> list[tuple[str, tuple[int, ...]]]:
    """``(setting name, dropped layers)`` pairs.

    Cumulative modes walk ``order`` (default deepest first): removed drops the
    first ``k`` layers of the order, inserted keeps only them.
    """
    layers = list(range(depth))
    order = list(reversed(layers)) if order is None else [int(x) for x in order]
    if mode == "excluding-layer":
        return [(f"exclude-{l}", (l,)) for l in layers]
    if mode == "exclusive-layer":
        return [(f"only-{l}", tuple(x for x in layers if x != l)) for l in layers]
    if mode == "cumulative-removed":
        return [(f"removed-{k}", tuple(order[:k])) for k in range(depth + 1)]
    if mode == "cumulative-inserted":
        return [(f"inserted-{k}", tuple(order[k:])) for k in range(depth + 1)]
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def layer_ablation(model: HiT, data, mode: str, order=None, batch_size: int = 256) -> list[tuple[str, float]]:
    """Top-1 accuracy with the attention reads of selected layers removed from the CLS."""
    out = []
    for name, dropped in ablation_settings(model.cfg.depth, mode, order):
        logits = model.predict_logits(data.images, batch_size=batch_size, drop_layers=dropped)
        out.append((name, float((logits.argmax(-1) == data.labels).mean())))
    return out


# ---------------------------------------------------------------------------
# correlations and cascading randomization
# ---------------------------------------------------------------------------

def pearson_abs(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeError(f"size mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("correlation needs at least two values")
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0 or not np.isfinite(den):
        return 0.0
    return float(min(1.0, abs((a * b).sum()) / den))


def spearman_abs(a, b) -> float:
    """|Spearman rho| with average ranks for ties; zero variance gives 0."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ShapeError(f"size mismatch: {a.size} vs {b.size}")
    return pearson_abs(rankdata(a), rankdata(b))


def randomization_stages(model: HiT) -> list[tuple[str, list[str]]]:
    """Parameter groups in randomization order: head, blocks deep to shallow, embedding."""
    names = list(model.params)
    stages = [("head", [n for n in names if n.startswith(("head.", "norm."))])]
    for layer in reversed(range(model.cfg.depth)):
        prefix = f"blocks.{layer}."
        stages.append((f"block{layer}", [n for n in names if n.startswith(prefix)]))
    stages.append(("embedding", [n for n in names if n in ("cls_token", "patch_embed.weight", "patch_embed.bias", "pos_embed")]))
    return stages


@dataclass
class SanityReport:
    stages: list[str] = field(default_factory=list)
    spearman: list[float] = field(default_factory=list)
    pearson: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.stages, self.spearman, self.pearson))


def cascading_randomization(model: HiT, images, saliency: Callable, seed: int = 0,
                            max_stages: int | None = None) -> SanityReport:
    """Re-initialize stage after stage and compare maps against the original model's.

    ``saliency(model, images, classes)`` returns ``(B, N, N)`` maps; the
    classes are the original model's predictions and stay fixed. Row
    ``none`` is the unrandomized model.
    """
    images = np.asarray(images)
    classes = model.predict_logits(images).argmax(-1)
    reference = np.asarray(saliency(model, images, classes))
    current = model.copy()
    shapes = param_shapes(model.cfg)
    report = SanityReport()

    def score(maps):
        sp = [spearman_abs(r, m) for r, m in zip(reference, maps)]
        pe = [pearson_abs(r, m) for r, m in zip(reference, maps)]
        return float(np.mean(sp)), float(np.mean(pe))

    sp, pe = score(reference)
    report.stages.append("none")
    report.spearman.append(sp)
    report.pearson.append(pe)
    stages = randomization_stages(model)
    if max_stages is not None:
        stages = stages[:max_stages]
    for i, (stage, names) in enumerate(stages):
        rng = np.random.default_rng([seed, i])
        for name in names:
            current.params[name].data[...] = init_param(name, shapes[name], rng)
        sp, pe = score(np.asarray(saliency(current, images, classes)))
        report.stages.append(stage)
        report.spearman.append(sp)
        report.pearson.append(pe)
    return report
