"""3D gamma analysis with global normalisation.

For every reference voxel above the low-value threshold, gamma is the minimum
over evaluation positions ``r + k*h`` (``h = dta/10``, ``|k*h| <= 2*dta``) of

    sqrt(|k*h|^2 / dta^2 + (eval(r + k*h) - ref(r))^2 / (dd * max(ref))^2)

with ``eval`` trilinearly interpolated.  Offsets are visited in order of
increasing distance and the scan stops once the distance term plus a lower
bound on the intensity term cannot beat the running minimum, so the result
equals the exhaustive minimum over the same offset set.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numba
import numpy as np

from kv2ct.errors import ConfigError, ShapeError, UndefinedRateError

SUBSTEPS = 10  # sub-grid points per dta
RADIUS_DTA = 2  # search radius in units of dta


@dataclass(frozen=True)
class GammaCriteria:
    dd_percent: float
    dta_mm: float
    low_threshold_percent: float = 10.0
    normalization: str = "global"

    def __post_init__(self):
        if not (self.dd_percent > 0 and self.dta_mm > 0 and self.low_threshold_percent > 0):
            raise ConfigError("gamma criteria must all be positive")
        if self.dd_percent > 100 or self.low_threshold_percent > 100:
            raise ConfigError("dose-difference and threshold percentages must be <= 100")
        if self.normalization != "global":
            raise ConfigError(f"only global normalisation is supported, got {self.normalization!r}")

    @property
    def label(self):
        return f"{self.dd_percent:g}%/{self.dta_mm:g}mm/{self.low_threshold_percent:g}%"

    @classmethod
    def parse(cls, text):
        """Accept '2,2,10', '2/2/10' or '2%/2mm/10%'."""
        parts = [p for p in re.split(r"[,/\s]+", text.replace("%", "").replace("mm", "")) if p]
        if len(parts) not in (2, 3):
            raise ConfigError(f"cannot parse gamma criteria {text!r}")
        return cls(*(float(p) for p in parts))


def subgrid_offsets(dta_mm, spacing_mm):
    """Sub-grid offsets sorted by distance.

    Returns ``(offsets_vox[M, 3], dist2[M])`` where ``dist2 = |k h|^2 / dta^2``.
    """
    r = SUBSTEPS * RADIUS_DTA
    k = np.arange(-r, r + 1)
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    kk = np.stack([kx.ravel(), ky.ravel(), kz.ravel()], axis=1)
    n2 = (kk ** 2).sum(axis=1)
    keep = n2 <= r * r
    kk, n2 = kk[keep], n2[keep]
    order = np.lexsort((kk[:, 2], kk[:, 1], kk[:, 0], n2))
    kk, n2 = kk[order], n2[order]
    h = dta_mm / SUBSTEPS
    offsets = kk * h / np.asarray(spacing_mm, dtype=np.float64)[None, :]
    return offsets, n2 / float(SUBSTEPS * SUBSTEPS)


@numba.njit(cache=True)
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    iz = int(math.floor(z))
    if ix > nx - 2:
        ix = max(nx - 2, 0)
    if iy > ny - 2:
        iy = max(ny - 2, 0)
    if iz > nz - 2:
        iz = max(nz - 2, 0)
    tx = x - ix
    ty = y - iy
    tz = z - iz
    jx = min(ix + 1, nx - 1)
    jy = min(iy + 1, ny - 1)
    jz = min(iz + 1, nz - 1)
    c00 = vol[ix, iy, iz] * (1.0 - tx) + vol[jx, iy, iz] * tx
    c10 = vol[ix, jy, iz] * (1.0 - tx) + vol[jx, jy, iz] * tx
    c01 = vol[ix, iy, jz] * (1.0 - tx) + vol[jx, iy, jz] * tx
    c11 = vol[ix, jy, jz] * (1.0 - tx) + vol[jx, jy, jz] * tx
    c0 = c00 * (1.0 - ty) + c10 * ty
    c1 = c01 * (1.0 - ty) + c11 * ty
    return c0 * (1.0 - tz) + c1 * tz


@numba.njit(cache=True, parallel=True)
def _gamma_kernel(ref, ev, points, offsets, dist2, dd2, reach):
    nx, ny, nz = ref.shape
    npts = points.shape[0]
    noff = offsets.shape[0]
    out = np.empty(npts)
    for p in numba.prange(npts):
        i = points[p, 0]
        j = points[p, 1]
        k = points[p, 2]
        rv = ref[i, j, k]
        # value range of eval over every voxel the search can touch
        vmin = np.inf
        vmax = -np.inf
        for a in range(max(i - reach[0], 0), min(i + reach[0], nx - 1) + 1):
            for b in range(max(j - reach[1], 0), min(j + reach[1], ny - 1) + 1):
                for c in range(max(k - reach[2], 0), min(k + reach[2], nz - 1) + 1):
                    v = ev[a, b, c]
                    if v < vmin:
                        vmin = v
                    if v > vmax:
                        vmax = v
        gap = max(0.0, vmin - rv, rv - vmax)
        lb = max(0.0, gap * gap / dd2 * (1.0 - 1e-9) - 1e-12)
        best = np.inf
        for m in range(noff):
            d = dist2[m]
            if d + lb >= best:
                break
            x = i + offsets[m, 0]
            y = j + offsets[m, 1]
            z = k + offsets[m, 2]
            if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
                continue
            diff = _trilinear(ev, x, y, z) - rv
            g = d + (diff * diff) / dd2
            if g < best:
                best = g
        out[p] = math.sqrt(best)
    return out


def _prepare(ref, ev, crit, spacing_mm):
    ref_a = np.ascontiguousarray(getattr(ref, "data", ref), dtype=np.float64)
    ev_a = np.ascontiguousarray(getattr(ev, "data", ev), dtype=np.float64)
    if ref_a.shape != ev_a.shape or ref_a.ndim != 3:
        raise ShapeError(f"gamma needs co-registered 3-D volumes, got {ref_a.shape} and {ev_a.shape}")
    if spacing_mm is None:
        spacing_mm = getattr(ref, "spacing_mm", (1.0, 1.0, 1.0))
    peak = float(ref_a.max())
    if not peak > 0:
        raise UndefinedRateError("reference maximum must be positive for global normalisation")
    considered = ref_a >= crit.low_threshold_percent / 100.0 * peak
    return ref_a, ev_a, np.asarray(spacing_mm, dtype=np.float64), peak, considered


def gamma_map(ref, ev, crit, spacing_mm=None):
    """Gamma values at every reference voxel above threshold, NaN elsewhere."""
    ref_a, ev_a, spacing, peak, considered = _prepare(ref, ev, crit, spacing_mm)
    out = np.full(ref_a.shape, np.nan)
    points = np.argwhere(considered).astype(np.int64)
    if len(points) == 0:
        return out
    offsets, dist2 = subgrid_offsets(crit.dta_mm, spacing)
    dd = crit.dd_percent / 100.0 * peak
    reach = np.ceil(RADIUS_DTA * crit.dta_mm / spacing).astype(np.int64) + 1
    g = _gamma_kernel(ref_a, ev_a, points, offsets, dist2, dd * dd, reach)
    out[considered] = g
    return out


def gamma3d(ref, ev, crit, spacing_mm=None):
    """Percentage of above-threshold reference voxels with gamma <= 1."""
    g = gamma_map(ref, ev, crit, spacing_mm)
    considered = ~np.isnan(g)
    if not considered.any():
        raise UndefinedRateError("no reference voxel reaches the low-value threshold")
    return 100.0 * float(np.count_nonzero(g[considered] <= 1.0)) / float(np.count_nonzero(considered))


def gamma_both(a, b, crit, spacing_mm=None):
    """Pass rates with each volume as the reference, plus their mean."""
    ra = gamma3d(a, b, crit, spacing_mm)
    rb = gamma3d(b, a, crit, spacing_mm)
    return {"ref_first": ra, "ref_second": rb, "mean": 0.5 * (ra + rb)}
