"""Image-domain metrics: MAE, the CT-number difference volume histogram and the shift-error search."""

from __future__ import annotations

import numpy as np

from kv2ct.errors import ShapeError
from kv2ct.geometry import Volume3D, shift_volume

CDVH_GRID = np.arange(0.0, 501.0, 1.0)
SHIFT_CANDIDATES = tuple(round(k * 0.1, 10) for k in range(-10, 11))


def _pair(a, b, mask):
    da = np.asarray(getattr(a, "data", a), dtype=np.float64)
    db = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if da.shape != db.shape:
        raise ShapeError(f"volumes differ in shape: {da.shape} vs {db.shape}")
    sa, sb = getattr(a, "spacing_mm", None), getattr(b, "spacing_mm", None)
    if sa is not None and sb is not None and not np.allclose(sa, sb):
        raise ShapeError(f"volumes differ in spacing: {sa} vs {sb}")
    if mask is None:
        return da.ravel(), db.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != da.shape:
        raise ShapeError(f"mask {mask.shape} does not match volumes {da.shape}")
    if not mask.any():
        raise ShapeError("mask selects no voxels")
    return da[mask], db[mask]


def mae(a, b, mask=None):
    """Mean absolute difference in HU over ``mask`` (all voxels when None)."""
    x, y = _pair(a, b, mask)
    return float(np.mean(np.abs(x - y)))


def cdvh(a, b, mask=None, grid=CDVH_GRID):
    """Fraction of masked voxels with ``|a - b| > t`` for every ``t`` in ``grid``.

    Returns ``(grid, fraction)``.
    """
    x, y = _pair(a, b, mask)
    diff = np.sort(np.abs(x - y))
    grid = np.asarray(grid, dtype=np.float64)
    above = diff.size - np.searchsorted(diff, grid, side="right")
    return grid, above / float(diff.size)


def diff_quantiles(a, b, mask=None, q=(50, 90, 95, 99)):
    """Quantiles of ``|a - b|`` over the mask."""
    x, y = _pair(a, b, mask)
    vals = np.percentile(np.abs(x - y), q)
    return {f"p{p:g}": float(v) for p, v in zip(q, vals)}


def shift_search(ssct, sgct, candidates=SHIFT_CANDIDATES, mask=None):
    """MAE between ``ssct`` and ``sgct`` shifted S-I by each candidate; returns ``(delta_m, maes)``.

    Ties go to the smaller ``|delta|``, then to the negative side.
    """
    maes = {}
    for delta in candidates:
        moved = shift_volume(sgct, delta, "S-I") if delta != 0 else sgct
        maes[delta] = mae(ssct, moved, mask)
    best = None
    for delta in sorted(maes, key=lambda d: (abs(d), d)):
        if best is None or maes[delta] < maes[best]:
            best = delta
    return float(best), maes


def shift_error(ssct, sgct, candidates=SHIFT_CANDIDATES, mask=None):
    """``|delta_m|`` in mm."""
    delta_m, _ = shift_search(ssct, sgct, candidates, mask)
    return abs(delta_m)


def as_volume(arr, like):
    """Wrap ``arr`` with the grid of ``like``."""
    return Volume3D(np.asarray(arr, dtype=np.float32), like.spacing_mm, like.origin_mm, like.unit)
