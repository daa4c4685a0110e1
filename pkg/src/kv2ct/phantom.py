"""Parametric head-and-neck digital phantoms.

Features are rasterised with supersampling so boundary voxels carry partial
volume values.  Painting order fixes precedence: base tissue, brain, air
cavities, soft-tissue structures, helmet, then bone on top.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from kv2ct.errors import ConfigError, EmptyRegionError
from kv2ct.geometry import AIR_HU, Volume3D

HU_SOFT = 40.0
HU_BRAIN = 35.0
HU_HELMET = 150.0
HU_RANGE = (-1024.0, 3500.0)

STRUCTURES = ("BODY", "HEAD", "CTV", "BRAINSTEM", "PAROTID", "ORAL_CAVITY", "MANDIBLE")


@dataclass(frozen=True)
class Box:
    """Inclusive voxel index box ``lo..hi`` on every axis."""

    lo: tuple
    hi: tuple

    @property
    def shape(self):
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def slices(self):
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def contains(self, other):
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi))

    def inside(self, dims):
        return all(l >= 0 for l in self.lo) and all(h < n for h, n in zip(self.hi, dims))

    def to_list(self):
        return [list(self.lo), list(self.hi)]

    @classmethod
    def from_list(cls, v):
        return cls(tuple(int(x) for x in v[0]), tuple(int(x) for x in v[1]))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 1
    dims: tuple = (64, 64, 48)
    spacing_mm: tuple = (3.0, 3.0, 3.0)
    head: bool = True
    neck: bool = True
    skull: bool = True
    mandible: bool = True
    brain_stem: bool = True
    cavities: bool = True
    helmet: bool = True
    tumor: bool = True
    # head ellipsoid semi-axes (R-L, A-P, S-I) in voxels
    head_radii_vox: tuple = (19.0, 21.0, 18.0)
    head_center_vox: tuple | None = None
    skull_thickness_vox: float = 2.0
    helmet_thickness_vox: float = 2.0
    tumor_offset_vox: tuple = (0.0, 6.0, -6.0)
    tumor_radii_vox: tuple = (4.0, 4.0, 3.5)
    tumor_hu: float = 60.0
    jitter_vox: int = 3
    supersample: int = 2
    # Gaussian blur (voxels) applied to the HU grid, a stand-in for the scanner PSF
    psf_sigma_vox: float = 0.0
    structures: tuple = STRUCTURES

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ConfigError(f"phantom dims must be three positive ints, got {self.dims}")
        if any(r <= 0 for r in self.head_radii_vox) or any(r <= 0 for r in self.tumor_radii_vox):
            raise ConfigError("phantom radii must be positive")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")
        if self.psf_sigma_vox < 0:
            raise ConfigError("psf_sigma_vox must be >= 0")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _ellipsoid(center, radii):
    c = np.asarray(center, float)
    r = np.asarray(radii, float)

    def inside(x, y, z):
        return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
    return inside


def _subgrid(dims, s):
    # sample offsets inside each voxel, voxel i spans [i - 0.5, i + 0.5]
    off = (np.arange(s) + 0.5) / s - 0.5
    axes = [(np.arange(n)[:, None] + off[None, :]).ravel() for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _fraction(inside, grid, dims, s):
    hit = inside(*grid).astype(np.float32)
    hit = np.broadcast_to(hit, tuple(n * s for n in dims))
    return hit.reshape(dims[0], s, dims[1], s, dims[2], s).mean(axis=(1, 3, 5))


def generate(spec=PhantomSpec()):
    """Return ``(volume, masks)`` for ``spec``; bitwise deterministic in the seed."""
    dims = tuple(int(n) for n in spec.dims)
    s = int(spec.supersample)
    rng = np.random.default_rng(spec.seed)
    j = float(spec.jitter_vox)

    def jit(amount=j):
        return rng.integers(-int(amount), int(amount) + 1, size=3).astype(float) if amount else np.zeros(3)

    grid = _subgrid(dims, s)
    frac = lambda inside: _fraction(inside, grid, dims, s)  # noqa: E731

    base_c = np.array([(dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0, dims[2] - 20.0])
    head_c = np.asarray(spec.head_center_vox, float) if spec.head_center_vox is not None \
        else base_c + np.array([0.0, 0.0, 1.0]) * jit(min(j, 1.0))
    hr = np.asarray(spec.head_radii_vox, float)
    # draw the jitter sequence unconditionally so toggles do not perturb other features
    jitters = {name: jit() for name in
               ("cavity", "mandible", "stem", "parotid", "oral", "tumor")}

    hu = np.full(dims, AIR_HU, dtype=np.float64)
    masks = {name: np.zeros(dims, dtype=bool) for name in spec.structures}

    def paint(f, value):
        hu[...] = (1.0 - f) * hu + f * value

    head_in = _ellipsoid(head_c, hr)
    body_f = np.zeros(dims, dtype=np.float32)
    if spec.head:
        f = frac(head_in)
        paint(f, HU_SOFT)
        body_f = np.maximum(body_f, f)
        if "HEAD" in masks:
            masks["HEAD"] = f >= 0.5
    if spec.neck:
        nc = head_c[:2] + np.array([0.0, -2.0])
        nr = 0.5 * hr[:2]

        def neck_in(x, y, z):
            return (((x - nc[0]) / nr[0]) ** 2 + ((y - nc[1]) / nr[1]) ** 2 <= 1.0) & (z <= head_c[2])
        f = frac(neck_in)
        paint(f, HU_SOFT)
        body_f = np.maximum(body_f, f)

    tissue_f = body_f.copy()
    inner_r = hr - spec.skull_thickness_vox
    inner_in = _ellipsoid(head_c, inner_r)
    cranium_floor = head_c[2] - 0.4 * hr[2]
    if spec.head:
        brain_f = frac(lambda x, y, z: inner_in(x, y, z) & (z >= cranium_floor + 2.0))
        paint(brain_f, HU_BRAIN)

    if spec.cavities and spec.head:
        c = head_c + jitters["cavity"]
        f = np.zeros(dims, np.float32)
        for dx in (-6.0, 6.0):
            f = np.maximum(f, frac(_ellipsoid(c + [dx, 0.55 * hr[1], -4.0], (3.5, 3.0, 3.0))))
        f = np.maximum(f, frac(_ellipsoid(c + [0.0, 0.65 * hr[1], -8.0], (2.5, 4.0, 4.0))))
        paint(np.minimum(f, tissue_f), AIR_HU)

    soft = []
    if spec.brain_stem:
        c = head_c + jitters["stem"]

        def stem_in(x, y, z):
            return (((x - c[0]) / 3.0) ** 2 + ((y - (c[1] - 5.0)) / 3.0) ** 2 <= 1.0) & \
                (z >= c[2] - 1.0 * hr[2]) & (z <= c[2] + 0.1 * hr[2])
        soft.append(("BRAINSTEM", stem_in, 30.0))
    if spec.head:
        c = head_c + jitters["parotid"]
        lp = _ellipsoid(c + [-0.6 * hr[0], -3.0, -0.55 * hr[2]], (3.0, 4.0, 4.0))
        rp = _ellipsoid(c + [0.6 * hr[0], -3.0, -0.55 * hr[2]], (3.0, 4.0, 4.0))
        soft.append(("PAROTID", lambda x, y, z: lp(x, y, z) | rp(x, y, z), 30.0))
        c = head_c + jitters["oral"]
        soft.append(("ORAL_CAVITY", _ellipsoid(c + [0.0, 0.35 * hr[1], -0.7 * hr[2]], (6.0, 5.0, 2.5)), 20.0))
    if spec.tumor:
        c = head_c + np.asarray(spec.tumor_offset_vox, float) + jitters["tumor"]
        soft.append(("CTV", _ellipsoid(c, spec.tumor_radii_vox), float(spec.tumor_hu)))
    for name, inside, value in soft:
        f = np.minimum(frac(inside), tissue_f)
        paint(f, value)
        if name in masks:
            masks[name] = f >= 0.5

    if spec.helmet and spec.head:
        outer = _ellipsoid(head_c, hr + spec.helmet_thickness_vox)
        f = frac(lambda x, y, z: outer(x, y, z) & ~head_in(x, y, z) & (z >= head_c[2] - 0.3 * hr[2]))
        paint(f, HU_HELMET)
        body_f = np.maximum(body_f, f)

    if spec.skull and spec.head:
        z = np.arange(dims[2], dtype=float)[None, None, :]
        ramp = np.clip((z - cranium_floor) / max(hr[2] * 1.4, 1.0), 0.0, 1.0)
        skull_hu = 800.0 + 400.0 * ramp
        f = frac(lambda x, y, z: head_in(x, y, z) & ~inner_in(x, y, z) & (z >= cranium_floor))
        hu[...] = (1.0 - f) * hu + f * skull_hu
    if spec.mandible and spec.head:
        c = head_c + jitters["mandible"] + [0.0, 0.0, -0.72 * hr[2]]
        major = 0.5 * hr[0]

        def mand_in(x, y, z):
            rho = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2)
            return ((rho - major) ** 2 + ((z - c[2]) / 1.5) ** 2 <= 2.0 ** 2) & (y >= c[1] - 2.0)
        f = np.minimum(frac(mand_in), tissue_f)
        paint(f, 1000.0)
        if "MANDIBLE" in masks:
            masks["MANDIBLE"] = (f >= 0.75) & (hu >= 500.0)

    if spec.psf_sigma_vox > 0:
        hu = ndimage.gaussian_filter(hu, spec.psf_sigma_vox, mode="nearest")
    np.clip(hu, *HU_RANGE, out=hu)
    body = body_f >= 0.5
    masks["BODY"] = body
    for name in masks:
        masks[name] &= body
    vol = Volume3D.centered(hu.astype(np.float32), spec.spacing_mm)
    return vol, masks


def head_bbox(masks, name="HEAD"):
    """Tight inclusive bounding box of ``masks[name]``."""
    m = np.asarray(masks[name] if isinstance(masks, dict) else masks, dtype=bool)
    if not m.any():
        raise EmptyRegionError(f"mask {name!r} is empty")
    lo, hi = [], []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        idx = np.flatnonzero(m.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return Box(tuple(lo), tuple(hi))


def n_components(mask):
    return int(ndimage.label(mask)[1])
