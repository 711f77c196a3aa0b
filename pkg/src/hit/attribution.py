"""Saliency maps, layer profiles and localization from a contribution ledger."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HiTConfig, LedgerResult
from .tensor import ShapeError, avg_pool2_transpose_array


@dataclass
class SaliencyMap:
    class_index: int
    values: np.ndarray  # (..., N, N) on the finest patch grid

    def total(self) -> np.ndarray:
        return self.values.sum(axis=(-2, -1))


@dataclass
class LayerProfile:
    class_index: int
    signed: np.ndarray  # (..., L)

    @property
    def absolute(self) -> np.ndarray:
        return np.abs(self.signed)


def upsample_through_pools(grid_map: np.ndarray, pools: int, finest_side: int | None = None) -> np.ndarray:
    """Apply the pooling transpose ``pools`` times to a ``(..., n, n)`` map.

    Each application copies a cell over its 2x2 block and divides by 4, so
    the map total is unchanged.
    """
    grid_map = np.asarray(grid_map)
    side = grid_map.shape[-1]
    if finest_side is not None and side * 2**pools != finest_side:
        raise ShapeError(f"map side {side} with {pools} pools does not reach {finest_side}")
    out = grid_map[..., None]
    for _ in range(pools):
        out = avg_pool2_transpose_array(out)
    return out[..., 0]


def _check_class(c: int, num_classes: int) -> None:
    if not 0 <= c < num_classes:
        raise IndexError(f"class {c} out of range [0, {num_classes})")


def saliency_from_ledger(result: LedgerResult, cfg: HiTConfig, c: int) -> SaliencyMap:
    """Class-``c`` logit per finest-grid cell; the cells sum to ``logits[c]``."""
    _check_class(c, cfg.num_classes)
    total = None
    for layer, entry_logits in enumerate(result.folded.layers):
        up = upsample_through_pools(entry_logits[..., c], cfg.pools_before(layer), cfg.grid_side)
        total = up if total is None else total + up
    return SaliencyMap(c, total)


def layerwise_contribution(result: LedgerResult, cfg: HiTConfig, c: int) -> LayerProfile:
    _check_class(c, cfg.num_classes)
    per_layer = [z[..., c].sum(axis=(-2, -1)) for z in result.folded.layers]
    return LayerProfile(c, np.stack(per_layer, axis=-1))


def center_of_mass(grid_map: np.ndarray) -> tuple[float, float]:
    """Mass-weighted (row, col) of a 2-D map after shifting its minimum to zero.

    A constant map has no mass after the shift; by symmetry its center is
    the middle of the grid. :func:`region_hit_rate` treats such maps as
    degenerate.
    """
    m = np.asarray(grid_map, dtype=np.float64)
    m = m - m.min()
    mass = m.sum()
    if mass <= 0:
        return (m.shape[0] - 1) / 2.0, (m.shape[1] - 1) / 2.0
    rows, cols = np.indices(m.shape)
    return float((m * rows).sum() / mass), float((m * cols).sum() / mass)


@dataclass
class HitRate:
    rate: float
    hits: int
    evaluated: int
    degenerate: int


def region_hit_rate(maps, regions) -> HitRate:
    """Share of maps whose center of mass lies inside the paired region.

    ``regions`` are ``(row0, col0, row1, col1)`` in map-cell coordinates,
    end-exclusive; a center counts as inside if ``row0 - 0.5 <= row < row1 - 0.5``
    (cell centers sit on integer coordinates). Constant maps are skipped
    and counted as degenerate.
    """
    hits = evaluated = degenerate = 0
    for m, (r0, c0, r1, c1) in zip(maps, regions):
        if np.ptp(np.asarray(m)) <= 0:
            degenerate += 1
            continue
        com = center_of_mass(m)
        evaluated += 1
        row, col = com
        if r0 - 0.5 <= row < r1 - 0.5 and c0 - 0.5 <= col < c1 - 0.5:
            hits += 1
    rate = hits / evaluated if evaluated else float("nan")
    return HitRate(rate, hits, evaluated, degenerate)


def pixel_region_to_cells(region, patch_size: int) -> tuple[int, int, int, int]:
    r0, c0, r1, c1 = region
    return r0 // patch_size, c0 // patch_size, -(-r1 // patch_size), -(-c1 // patch_size)
