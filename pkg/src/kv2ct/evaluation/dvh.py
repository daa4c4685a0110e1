"""Dose-volume indices over structure masks.

Indices are order statistics of the voxel doses: ``Dx%`` is the largest dose
``d`` such that at least ``x`` percent of the structure receives ``>= d``,
``Dv_cc`` the same with an absolute volume, ``Mean`` the arithmetic mean.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from kv2ct.errors import ConfigError, EmptyRegionError, InsufficientVolumeError, ShapeError

_PCT = re.compile(r"^D(\d+(?:\.\d+)?)%$")
_CC = re.compile(r"^D(\d+(?:\.\d+)?)cc$")


@dataclass(frozen=True)
class DvhSpec:
    indices: tuple = ("D95%", "D2%", "D0.01cc", "Mean")
    structures: tuple = ("CTV", "BRAINSTEM", "PAROTID", "ORAL_CAVITY", "MANDIBLE")

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(self.indices))
        object.__setattr__(self, "structures", tuple(self.structures))
        for name in self.indices:
            parse_index(name)


def parse_index(name):
    """``'D95%'`` -> ('percent', 95.0), ``'D0.01cc'`` -> ('cc', 0.01), ``'Mean'`` -> ('mean', None)."""
    if name == "Mean":
        return "mean", None
    m = _PCT.match(name)
    if m:
        x = float(m.group(1))
        if not 0 < x <= 100:
            raise ConfigError(f"{name}: percentage must lie in (0, 100]")
        return "percent", x
    m = _CC.match(name)
    if m:
        v = float(m.group(1))
        if not v > 0:
            raise ConfigError(f"{name}: volume must be positive")
        return "cc", v
    raise ConfigError(f"unknown DVH index {name!r}")


def _descending(doses):
    d = np.sort(np.asarray(doses, dtype=np.float64).ravel())[::-1]
    if d.size == 0:
        raise EmptyRegionError("structure mask is empty")
    return d


def dose_at_percent(doses, x):
    """Largest d with at least x% of the voxels at or above d."""
    d = _descending(doses)
    k = max(1, math.ceil(x * d.size / 100.0 - 1e-9))
    return float(d[min(k, d.size) - 1])


def dose_at_cc(doses, v_cc, voxel_cc):
    """Largest d with at least ``v_cc`` cm^3 at or above d."""
    d = _descending(doses)
    k = max(1, math.ceil(v_cc / voxel_cc - 1e-9))
    if k > d.size:
        raise InsufficientVolumeError(
            f"structure holds {d.size * voxel_cc:.4g} cc, less than the requested {v_cc:g} cc")
    return float(d[k - 1])


def dvh_indices(dose, masks, spec=None, spacing_mm=None):
    """``{structure: {index: value}}`` for every structure in ``spec``."""
    spec = spec or DvhSpec()
    data = np.asarray(getattr(dose, "data", dose), dtype=np.float64)
    spacing_mm = spacing_mm or getattr(dose, "spacing_mm", None)
    if spacing_mm is None:
        raise ConfigError("voxel spacing is needed for volume-based indices")
    voxel_cc = float(np.prod(spacing_mm)) / 1000.0
    out = {}
    for name in spec.structures:
        if name not in masks:
            raise ConfigError(f"no mask for structure {name!r}")
        mask = np.asarray(masks[name], dtype=bool)
        if mask.shape != data.shape:
            raise ShapeError(f"mask {name} {mask.shape} does not match dose {data.shape}")
        doses = data[mask]
        if doses.size == 0:
            raise EmptyRegionError(f"structure {name} is empty")
        row = {}
        for idx in spec.indices:
            kind, val = parse_index(idx)
            if kind == "mean":
                row[idx] = float(doses.mean())
            elif kind == "percent":
                row[idx] = dose_at_percent(doses, val)
            else:
                row[idx] = dose_at_cc(doses, val, voxel_cc)
        out[name] = row
    return out
