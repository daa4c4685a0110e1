"""Geometry-preserving shift-and-sample augmentation.

One CT / kV pair is expanded into many training pairs.  Every S-I couch shift
of the CT moves the kV images by ``magnification`` times as much on the
detector.  Each shift is then block-averaged, optionally at every integer
phase offset of the kV sampling grid; a kV phase offset ``(a, b)`` is the
same as translating the patient by ``-(a, b) * pitch / magnification`` in
the detector frame, and the CT target is translated accordingly so each
emitted pair stays physically consistent.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from kv2ct.errors import ConfigError, ShapeError
from kv2ct.geometry import (KvImagePair, Volume3D, shift_image,
                            shift_volume, shift_volume_3d)
from kv2ct.phantom import Box


@dataclass(frozen=True)
class GrssConfig:
    shift_range_mm: float = 5.0
    shift_step_mm: float = 0.1
    kv_shift_factor: float = 1.5
    ct_downsample: tuple = (1, 1, 1)
    kv_downsample: tuple = (1, 1)
    # detector window (u, v) in pixels; None means the full detector
    kv_crop: tuple | None = None
    phase_enumeration: bool = False
    model_tag: str = "primary"

    def __post_init__(self):
        if not self.shift_step_mm > 0:
            raise ConfigError("shift_step_mm must be positive")
        if self.shift_range_mm < self.shift_step_mm and self.shift_range_mm != 0:
            raise ConfigError("shift_range_mm must be >= shift_step_mm")
        if len(self.ct_downsample) != 3 or any(int(f) < 1 for f in self.ct_downsample):
            raise ConfigError(f"ct_downsample must be three positive ints, got {self.ct_downsample}")
        if len(self.kv_downsample) != 2 or any(int(f) < 1 for f in self.kv_downsample):
            raise ConfigError(f"kv_downsample must be two positive ints, got {self.kv_downsample}")
        object.__setattr__(self, "ct_downsample", tuple(int(f) for f in self.ct_downsample))
        object.__setattr__(self, "kv_downsample", tuple(int(f) for f in self.kv_downsample))
        if self.kv_crop is not None:
            object.__setattr__(self, "kv_crop", tuple(int(c) for c in self.kv_crop))

    def shifts(self):
        """Shift schedule in mm, ascending, symmetric about zero."""
        n = int(round(self.shift_range_mm / self.shift_step_mm))
        return [round(k * self.shift_step_mm, 10) for k in range(-n, n + 1)]

    def phases(self):
        if not self.phase_enumeration:
            return [(0, 0)]
        return list(itertools.product(range(self.kv_downsample[0]), range(self.kv_downsample[1])))

    def pair_count(self):
        return len(self.shifts()) * len(self.phases())

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class TrainingPair:
    kv: KvImagePair
    ct: Volume3D
    shift_mm: float
    phase: tuple
    model_tag: str
    # patient translation (R-L, A-P, S-I) in mm that the CT target carries
    ct_shift_mm: tuple = (0.0, 0.0, 0.0)


_AXIS_NAMES = ("R-L", "A-P", "S-I")


def _check_divisible(dims, factors, what):
    for name, n, f in zip(_AXIS_NAMES if len(dims) == 3 else ("u", "v"), dims, factors):
        if n % f:
            raise ConfigError(f"{what}: axis {name} size {n} is not divisible by factor {f}")


def block_mean(arr, factors):
    """Mean over non-overlapping blocks; ``arr.shape`` must be divisible by ``factors``."""
    arr = np.asarray(arr, dtype=np.float64)
    shape = []
    for n, f in zip(arr.shape, factors):
        shape += [n // f, f]
    return arr.reshape(shape).mean(axis=tuple(range(1, 2 * arr.ndim, 2)))


def downsample_volume(vol, f):
    """Block-mean downsampling; spacing grows by ``f`` and the origin moves to the first block center."""
    f = tuple(int(x) for x in f)
    _check_divisible(vol.dims, f, "downsample_volume")
    if f == (1, 1, 1):
        return vol.with_data(vol.data.copy())
    data = block_mean(vol.data, f)
    spacing = tuple(s * k for s, k in zip(vol.spacing_mm, f))
    origin = tuple(o + (k - 1) / 2.0 * s for o, s, k in zip(vol.origin_mm, vol.spacing_mm, f))
    return Volume3D(data.astype(np.float32), spacing, origin, vol.unit)


def crop_volume(vol, box):
    origin = tuple(o + l * s for o, l, s in zip(vol.origin_mm, box.lo, vol.spacing_mm))
    return Volume3D(vol.data[box.slices], vol.spacing_mm, origin, vol.unit)


def region_center_mm(vol, box):
    return np.array([o + (l + h) / 2.0 * s for o, l, h, s in
                     zip(vol.origin_mm, box.lo, box.hi, vol.spacing_mm)])


def kv_window(vol, box, geom, crop):
    """Top-left detector pixel (u0, v0) of a ``crop``-sized window centred on the box projection.

    Both views share the v (S-I) offset; the u offset is computed per view.
    """
    center = region_center_mm(vol, box)
    nu, nv = geom.detector_pixels
    p = geom.detector_pitch_mm
    mag = geom.magnification
    starts = []
    for view in range(2):
        _, _, u, v = geom.detector_frame(view)
        cu = (nu - 1) / 2.0 + mag * float(center @ u) / p
        cv = (nv - 1) / 2.0 + mag * float(center @ v) / p
        starts.append((int(round(cu - (crop[0] - 1) / 2.0)), int(round(cv - (crop[1] - 1) / 2.0))))
    return starts


def phase_translation_mm(phase, geom):
    """Patient translation equivalent to sampling the kV grid at ``phase`` pixels."""
    a, b = phase
    step = geom.detector_pitch_mm / geom.magnification
    # view 0 u axis is +A-P, view 1 u axis is -R-L; v is +S-I
    return (a * step, -a * step, -b * step)


def augment(ct, kv, cfg, region=None):
    """Expand one CT/kV pair into ``cfg.pair_count()`` TrainingPairs, shift-major, phase-minor."""
    geom = kv.geometry
    if abs(cfg.kv_shift_factor - geom.magnification) > 1e-9:
        raise ConfigError(
            f"kv_shift_factor {cfg.kv_shift_factor} does not match geometry magnification {geom.magnification}")
    region = region or Box((0, 0, 0), tuple(n - 1 for n in ct.dims))
    if not region.inside(ct.dims):
        raise ConfigError(f"region {region} lies outside the CT grid {ct.dims}")
    _check_divisible(region.shape, cfg.ct_downsample, "CT crop")
    crop = cfg.kv_crop or kv.dims
    _check_divisible(crop, cfg.kv_downsample, "kV crop")
    starts = kv_window(ct, region, geom, crop)
    phases = cfg.phases()
    max_a = max(a for a, _ in phases)
    max_b = max(b for _, b in phases)
    for (u0, v0) in starts:
        if u0 < 0 or v0 < 0 or u0 + crop[0] + max_a > kv.dims[0] or v0 + crop[1] + max_b > kv.dims[1]:
            raise ConfigError(f"kV window {crop} at ({u0}, {v0}) plus phase margin exceeds detector {kv.dims}")

    pitch = kv.pixel_pitch_mm
    out = []
    for delta in cfg.shifts():
        ct_s = shift_volume(ct, delta, "S-I")
        kv_s = np.stack([shift_image(kv.images[view], cfg.kv_shift_factor * delta / pitch, axis=1)
                         for view in range(2)])
        for phase in phases:
            t = phase_translation_mm(phase, geom)
            ct_p = shift_volume_3d(ct_s, t) if phase != (0, 0) else ct_s
            target = downsample_volume(crop_volume(ct_p, region), cfg.ct_downsample)
            imgs = []
            for view, (u0, v0) in enumerate(starts):
                a, b = phase
                win = kv_s[view, u0 + a:u0 + a + crop[0], v0 + b:v0 + b + crop[1]]
                imgs.append(block_mean(win, cfg.kv_downsample))
            kv_p = KvImagePair(np.maximum(np.stack(imgs), 0.0), pitch * cfg.kv_downsample[0], geom,
                               float(delta))
            out.append(TrainingPair(kv_p, target, float(delta), tuple(phase), cfg.model_tag,
                                    (t[0], t[1], t[2] + delta)))
    return out


def model_input(kv, ct_ref, cfg, region=None):
    """Window and block-average a raw kV pair the way ``augment`` does at phase (0, 0), no shift."""
    region = region or Box((0, 0, 0), tuple(n - 1 for n in ct_ref.dims))
    crop = cfg.kv_crop or kv.dims
    _check_divisible(crop, cfg.kv_downsample, "kV crop")
    imgs = []
    for view, (u0, v0) in enumerate(kv_window(ct_ref, region, kv.geometry, crop)):
        if u0 < 0 or v0 < 0 or u0 + crop[0] > kv.dims[0] or v0 + crop[1] > kv.dims[1]:
            raise ConfigError(f"kV window {crop} at ({u0}, {v0}) exceeds detector {kv.dims}")
        imgs.append(block_mean(kv.images[view, u0:u0 + crop[0], v0:v0 + crop[1]], cfg.kv_downsample))
    return np.stack(imgs).astype(np.float32)


def stack_pairs(pairs):
    """Arrays ``(kv[N, 2, H, W], ct[N, D, A, S])`` for a list of TrainingPairs."""
    kv = np.stack([p.kv.images for p in pairs]).astype(np.float32)
    ct = np.stack([p.ct.data for p in pairs]).astype(np.float32)
    return kv, ct


def write_pairs(pairs, directory, tag=None):
    """Persist pairs as one ``.npz`` shard per shift and return the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = tag or (pairs[0].model_tag if pairs else "pairs")
    entries = []
    by_shift = {}
    for p in pairs:
        by_shift.setdefault(p.shift_mm, []).append(p)
    for k, (delta, group) in enumerate(by_shift.items()):
        kv, ct = stack_pairs(group)
        name = f"{tag}_s{k:03d}.npz"
        np.savez(directory / name, kv=kv, ct=ct)
        for i, p in enumerate(group):
            entries.append({"file": name, "index": i, "shift_mm": p.shift_mm, "phase": list(p.phase),
                            "model_tag": p.model_tag, "ct_shift_mm": list(p.ct_shift_mm)})
    first = pairs[0] if pairs else None
    manifest = {
        "model_tag": tag,
        "count": len(entries),
        "kv_pitch_mm": first.kv.pixel_pitch_mm if first else None,
        "ct_spacing_mm": list(first.ct.spacing_mm) if first else None,
        "ct_origin_mm": list(first.ct.origin_mm) if first else None,
        "pairs": entries,
    }
    (directory / "pairs.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_pairs(manifest_path):
    """Load ``(kv, ct, manifest)`` arrays in manifest order."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if not manifest["pairs"]:
        raise ShapeError(f"{manifest_path}: manifest is empty")
    tags = {e["model_tag"] for e in manifest["pairs"]}
    if len(tags) != 1:
        raise ConfigError(f"{manifest_path}: pairs mix model tags {sorted(tags)}")
    cache = {}
    kv, ct = [], []
    for e in manifest["pairs"]:
        if e["file"] not in cache:
            with np.load(manifest_path.parent / e["file"]) as z:
                cache[e["file"]] = (z["kv"], z["ct"])
        kv.append(cache[e["file"]][0][e["index"]])
        ct.append(cache[e["file"]][1][e["index"]])
    return np.stack(kv), np.stack(ct), manifest
