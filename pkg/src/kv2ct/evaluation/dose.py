"""Phantom-derived synthetic dose fields for exercising the dose metrics.

This is not a dose engine.  The field is a smoothed CTV envelope attenuated
with water-equivalent depth along one beam axis, so CT-number errors in the
beam path change the dose the way a density error would.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from kv2ct.errors import EmptyRegionError, ShapeError
from kv2ct.geometry import Volume3D, axis_index

MU_WED = 0.004  # attenuation per mm of water-equivalent depth


def water_equivalent_depth(ct, axis="R-L"):
    """Cumulative water-equivalent depth in mm from the low-index face, evaluated at voxel centres."""
    ax = axis_index(axis)
    rsp = np.clip((np.asarray(ct.data, dtype=np.float64) + 1000.0) / 1000.0, 0.0, 2.5)
    step = ct.spacing_mm[ax]
    return (np.cumsum(rsp, axis=ax) - 0.5 * rsp) * step


def synthetic_dose(ct, ctv, prescription_gy=60.0, axis="R-L", scale=None, smooth_vox=1.5):
    """Return ``(dose Volume3D in Gy, scale)``.

    ``scale`` fixes the monitor-unit normalisation; when None it is chosen so
    the mean CTV dose equals ``prescription_gy``.  Reuse the planning CT's
    scale to recompute the same plan on another CT.
    """
    ctv = np.asarray(ctv, dtype=bool)
    if ctv.shape != ct.dims:
        raise ShapeError(f"CTV mask {ctv.shape} does not match CT {ct.dims}")
    if not ctv.any():
        raise EmptyRegionError("CTV mask is empty")
    env = np.clip(ndimage.gaussian_filter(ctv.astype(np.float64), smooth_vox, mode="constant") / 0.5, 0.0, 1.0)
    raw = env * np.exp(-MU_WED * water_equivalent_depth(ct, axis))
    if scale is None:
        scale = prescription_gy / float(raw[ctv].mean())
    return Volume3D((raw * scale).astype(np.float32), ct.spacing_mm, ct.origin_mm, "Gy"), float(scale)
