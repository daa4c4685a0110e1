"""Treatment-room imaging geometry and a cone-beam forward projector.

World coordinates are millimetres with the isocenter at the origin and axes
ordered (R-L, A-P, S-I).  Volumes are indexed ``data[x, y, z]`` along the same
axes, so ``data.shape == dims``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from kv2ct.errors import ConfigError, InvalidInputError, ShapeError

MU_WATER = 0.02  # mm^-1
AIR_HU = -1000.0

AXES = {"R-L": 0, "A-P": 1, "S-I": 2}

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"
if os.environ.get("KV2CT_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["KV2CT_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def axis_index(axis):
    """Map an axis name ('R-L', 'A-P', 'S-I') or integer 0..2 to an index."""
    if isinstance(axis, str):
        key = axis.upper()
        if key not in AXES:
            raise InvalidInputError(f"invalid axis {axis!r}; expected one of {sorted(AXES)}")
        return AXES[key]
    if isinstance(axis, (int, np.integer)) and 0 <= int(axis) <= 2:
        return int(axis)
    raise InvalidInputError(f"invalid axis {axis!r}; expected one of {sorted(AXES)}")


@dataclass(frozen=True)
class GeometrySpec:
    """Orthogonal two-view kV system with point sources and flat detectors.

    ``view_axes`` are the propagation directions of the two central rays.  The
    detector ``u`` axis of a view is ``cross(S-I, view_axis)`` and ``v`` is S-I.
    """

    sad_mm: float = 1000.0
    sdd_mm: float = 1500.0
    detector_pixels: tuple = (384, 320)
    detector_pitch_mm: float = 0.75
    view_axes: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))

    def __post_init__(self):
        if not self.sdd_mm > self.sad_mm > 0:
            raise ConfigError(f"need sdd_mm > sad_mm > 0, got sad={self.sad_mm}, sdd={self.sdd_mm}")
        if self.detector_pitch_mm <= 0:
            raise ConfigError("detector_pitch_mm must be positive")
        nu, nv = self.detector_pixels
        if int(nu) < 1 or int(nv) < 1:
            raise ConfigError(f"detector_pixels must be positive, got {self.detector_pixels}")
        object.__setattr__(self, "detector_pixels", (int(nu), int(nv)))
        axes = np.asarray(self.view_axes, dtype=float)
        if axes.shape != (2, 3):
            raise ConfigError("view_axes must hold exactly two 3-vectors")
        if not np.allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-9):
            raise ConfigError("view_axes must be unit vectors")
        if abs(axes[0] @ axes[1]) > 1e-9:
            raise ConfigError("view_axes must be orthogonal")
        if np.any(np.abs(axes[:, 2]) > 1e-9):
            raise ConfigError("view_axes must be perpendicular to the S-I axis")
        object.__setattr__(self, "view_axes", tuple(tuple(float(c) for c in a) for a in axes))

    @property
    def magnification(self):
        return self.sdd_mm / self.sad_mm

    def detector_frame(self, view):
        """Return (source, detector_center, u, v) for view 0 or 1."""
        a = np.asarray(self.view_axes[view], dtype=float)
        v = np.array([0.0, 0.0, 1.0])
        u = np.cross(v, a)
        source = -self.sad_mm * a
        center = (self.sdd_mm - self.sad_mm) * a
        return source, center, u, v

    def to_dict(self):
        return {
            "sad_mm": self.sad_mm,
            "sdd_mm": self.sdd_mm,
            "detector_pixels": list(self.detector_pixels),
            "detector_pitch_mm": self.detector_pitch_mm,
            "view_axes": [list(a) for a in self.view_axes],
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "detector_pixels" in d:
            d["detector_pixels"] = tuple(d["detector_pixels"])
        if "view_axes" in d:
            d["view_axes"] = tuple(tuple(a) for a in d["view_axes"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar grid in HU (or Gy) with world placement metadata."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)
    unit: str = "HU"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3-D, got shape {data.shape}")
        if len(self.spacing_mm) != 3 or any(float(s) <= 0 for s in self.spacing_mm):
            raise ShapeError(f"spacing must be three positive values, got {self.spacing_mm}")
        if len(self.origin_mm) != 3:
            raise ShapeError("origin must have three components")
        if not data.flags.writeable and data.dtype == np.float32:
            arr = data
        else:
            arr = np.array(data, dtype=np.float32, copy=True)
            arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def dims(self):
        return tuple(self.data.shape)

    def with_data(self, data, **kwargs):
        return replace(self, data=data, **kwargs)

    def extent_mm(self, axis):
        ax = axis_index(axis)
        return self.dims[ax] * self.spacing_mm[ax]

    @classmethod
    def centered(cls, data, spacing_mm, unit="HU"):
        """Place ``data`` so that its geometric center sits on the isocenter."""
        data = np.asarray(data)
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(data.shape, spacing_mm))
        return cls(data, tuple(spacing_mm), origin, unit)


@dataclass(frozen=True, eq=False)
class KvImagePair:
    """Two co-registered line-integral images, stacked as ``images[view, u, v]``."""

    images: np.ndarray
    pixel_pitch_mm: float
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    couch_shift_mm: float = 0.0

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 3 or imgs.shape[0] != 2:
            raise ShapeError(f"kV pair must have shape (2, nu, nv), got {imgs.shape}")
        if not np.all(np.isfinite(imgs)) or np.any(imgs < 0):
            raise InvalidInputError("kV images must be finite and non-negative")
        arr = np.array(imgs, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "images", arr)

    @property
    def dims(self):
        return tuple(self.images.shape[1:])


def hu_to_mu(hu):
    """Linear attenuation (mm^-1) from HU, clamped at zero."""
    return np.maximum(MU_WATER * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0), 0.0)


def _shift_axis(arr, shift_vox, axis, fill):
    """Linear interpolation of ``arr`` translated by ``shift_vox`` voxels along ``axis``."""
    n = arr.shape[axis]
    src = np.arange(n, dtype=np.float64) - shift_vox
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i1 = i0 + 1
    moved = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    lo = np.where(((i0 >= 0) & (i0 < n))[:, None], moved[np.clip(i0, 0, n - 1)].reshape(n, -1), fill)
    hi = np.where(((i1 >= 0) & (i1 < n))[:, None], moved[np.clip(i1, 0, n - 1)].reshape(n, -1), fill)
    t = t[:, None]
    out = (1.0 - t) * lo + t * hi
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


def shift_volume(vol, delta_mm, axis="S-I", fill=AIR_HU):
    """Translate volume content by ``delta_mm`` along ``axis``.

    Positive shifts move content toward increasing index.  Voxels shifted in
    from outside the grid take ``fill`` (air by default).
    """
    ax = axis_index(axis)
    delta_mm = float(delta_mm)
    if abs(delta_mm) > vol.extent_mm(ax) / 2.0:
        raise InvalidInputError(
            f"|delta_mm|={abs(delta_mm)} exceeds half the volume extent along axis {ax}")
    if delta_mm == 0.0:
        return vol.with_data(vol.data.copy())
    out = _shift_axis(vol.data, delta_mm / vol.spacing_mm[ax], ax, fill)
    return vol.with_data(out.astype(np.float32))


def shift_volume_3d(vol, delta_mm, fill=AIR_HU):
    """Separable (trilinear) translation by a 3-vector in mm."""
    out = vol
    for ax, d in enumerate(delta_mm):
        if d != 0.0:
            out = shift_volume(out, d, ax, fill)
    return out


def shift_image(img, delta_px, axis, fill=0.0):
    """Translate a 2-D image by ``delta_px`` pixels along ``axis`` (linear interpolation)."""
    if delta_px == 0.0:
        return np.array(img, copy=True)
    return _shift_axis(img, float(delta_px), axis, fill)


@numba.njit(cache=True, parallel=True)
def _cone_project(mu, origin, spacing, src, center, u, v, nu, nv, pitch, step):
    nx, ny, nz = mu.shape
    out = np.zeros((nu, nv))
    n = np.array([nx, ny, nz], dtype=np.float64)
    for i in numba.prange(nu):
        a0 = np.empty(3)
        ad = np.empty(3)
        for j in range(nv):
            du = (i - (nu - 1) / 2.0) * pitch
            dv = (j - (nv - 1) / 2.0) * pitch
            length = 0.0
            for c in range(3):
                p = center[c] + du * u[c] + dv * v[c]
                ad[c] = p - src[c]
                length += ad[c] * ad[c]
            length = math.sqrt(length)
            tmin = 0.0
            tmax = length
            hit = True
            for c in range(3):
                a0[c] = (src[c] - origin[c]) / spacing[c]
                ad[c] = ad[c] / length / spacing[c]
                # zero-padded field: nonzero support is index range (-1, n)
                if ad[c] == 0.0:
                    if a0[c] <= -1.0 or a0[c] >= n[c]:
                        hit = False
                else:
                    t1 = (-1.0 - a0[c]) / ad[c]
                    t2 = (n[c] - a0[c]) / ad[c]
                    if t1 > t2:
                        t1, t2 = t2, t1
                    tmin = max(tmin, t1)
                    tmax = min(tmax, t2)
            if not hit or tmax <= tmin:
                continue
            ns = int(math.ceil((tmax - tmin) / step))
            h = (tmax - tmin) / ns
            acc = 0.0
            for k in range(ns):
                t = tmin + (k + 0.5) * h
                x = a0[0] + t * ad[0]
                y = a0[1] + t * ad[1]
                z = a0[2] + t * ad[2]
                ix = int(math.floor(x))
                iy = int(math.floor(y))
                iz = int(math.floor(z))
                fx = x - ix
                fy = y - iy
                fz = z - iz
                val = 0.0
                for cx in range(2):
                    xx = ix + cx
                    if xx < 0 or xx >= nx:
                        continue
                    wx = fx if cx else 1.0 - fx
                    for cy in range(2):
                        yy = iy + cy
                        if yy < 0 or yy >= ny:
                            continue
                        wy = fy if cy else 1.0 - fy
                        for cz in range(2):
                            zz = iz + cz
                            if zz < 0 or zz >= nz:
                                continue
                            wz = fz if cz else 1.0 - fz
                            val += wx * wy * wz * mu[xx, yy, zz]
                acc += val
            out[i, j] = acc * h
    return out


def project_mu(mu, spacing_mm, origin_mm, geom):
    """Line integrals of an attenuation field (mm^-1) for both views, shape (2, nu, nv)."""
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    origin = np.asarray(origin_mm, dtype=np.float64)
    step = 0.5 * float(spacing.min())
    nu, nv = geom.detector_pixels
    out = np.empty((2, nu, nv))
    for view in range(2):
        src, center, u, v = geom.detector_frame(view)
        out[view] = _cone_project(mu, origin, spacing, src, center, u, v,
                                  nu, nv, geom.detector_pitch_mm, step)
    return out


def project(vol, geom, couch_shift_mm=0.0, noise_sigma=0.0, seed=0):
    """Synthesize an orthogonal kV pair from ``vol`` after an S-I couch shift.

    Pixel values are line integrals ``-ln(I/I0)``.  With ``noise_sigma > 0``
    zero-mean Gaussian noise is added and the result clamped at zero.
    """
    if not np.all(np.isfinite(vol.data)):
        raise InvalidInputError("volume contains non-finite voxels")
    if abs(couch_shift_mm) > 20.0:
        raise InvalidInputError(f"|couch_shift_mm| must be <= 20, got {couch_shift_mm}")
    if couch_shift_mm != 0.0:
        vol = shift_volume(vol, couch_shift_mm, "S-I")
    images = project_mu(hu_to_mu(vol.data), vol.spacing_mm, vol.origin_mm, geom)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        images = np.maximum(images + rng.normal(0.0, noise_sigma, images.shape), 0.0)
    return KvImagePair(images, geom.detector_pitch_mm, geom, float(couch_shift_mm))
