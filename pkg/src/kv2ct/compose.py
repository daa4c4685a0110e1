"""Assemble the full-size synthetic CT from the primary and secondary model outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kv2ct.errors import ConfigError, ShapeError
from kv2ct.geometry import AIR_HU, Volume3D
from kv2ct.phantom import Box


@dataclass(frozen=True)
class CompositionSpec:
    """Where each model's output lands in the full grid.

    ``head_box`` receives the secondary output; ``primary_box`` (default: the
    whole grid) receives the primary output, and anything outside it is air.
    """

    head_box: Box
    primary_box: Box | None = None
    upsample_mode: str = "trilinear"
    feather_voxels: int = 2

    def validate(self, full_dims):
        if not self.head_box.inside(full_dims):
            raise ShapeError(f"head box {self.head_box} exceeds the full grid {full_dims}")
        if self.primary_box is not None and not self.primary_box.inside(full_dims):
            raise ShapeError(f"primary box {self.primary_box} exceeds the full grid {full_dims}")
        if self.upsample_mode != "trilinear":
            raise ConfigError(f"unsupported upsample mode {self.upsample_mode!r}")
        if self.feather_voxels < 0 or any(2 * self.feather_voxels >= n for n in self.head_box.shape):
            raise ConfigError(f"feather_voxels={self.feather_voxels} must be >= 0 and below half "
                              f"the head box extent {self.head_box.shape}")


def _resample_axis(arr, n_out, axis):
    """Linear resampling along ``axis`` treating samples as cell centres, edge-clamped."""
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
    t = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    return (1.0 - t) * a + t * b


def upsample(data, dims):
    """Trilinear resampling of a block-sampled grid onto ``dims`` (cell-centre aligned)."""
    out = np.asarray(data, dtype=np.float64)
    for ax, n in enumerate(dims):
        out = _resample_axis(out, int(n), ax)
    return out


def feather_weights(shape, feather):
    """Blend weight of the inner grid: linear ramp over ``feather`` voxels at every face."""
    w = np.ones(shape)
    if feather == 0:
        return w
    for ax, n in enumerate(shape):
        i = np.arange(n)
        d = np.minimum(i, n - 1 - i)
        ramp = np.minimum(1.0, (d + 1.0) / (feather + 1.0))
        sh = [1] * len(shape)
        sh[ax] = n
        w = np.minimum(w, ramp.reshape(sh))
    return w


def compose(primary_out, secondary_out, spec, full_dims, spacing_mm=None, origin_mm=None):
    """Overlay the upsampled secondary output on the upsampled primary output.

    ``primary_out`` is upsampled to the primary box, ``secondary_out`` to the
    head box; inside the head box a feathered cross-fade replaces the primary.
    """
    full_dims = tuple(int(n) for n in full_dims)
    spec.validate(full_dims)
    pbox = spec.primary_box or Box((0, 0, 0), tuple(n - 1 for n in full_dims))
    hbox = spec.head_box
    for name, vol, box in (("primary", primary_out, pbox), ("secondary", secondary_out, hbox)):
        if any(b % n for b, n in zip(box.shape, vol.dims)):
            raise ShapeError(f"{name} output {vol.dims} does not tile its box {box.shape}")
    out = np.full(full_dims, AIR_HU)
    out[pbox.slices] = upsample(primary_out.data, pbox.shape)
    sec = upsample(secondary_out.data, hbox.shape)
    w = feather_weights(hbox.shape, spec.feather_voxels)
    out[hbox.slices] = w * sec + (1.0 - w) * out[hbox.slices]
    if spacing_mm is None:
        f = [b // n for b, n in zip(pbox.shape, primary_out.dims)]
        spacing_mm = tuple(s / k for s, k in zip(primary_out.spacing_mm, f))
    if origin_mm is None:
        origin_mm = tuple(-(n - 1) / 2.0 * s for n, s in zip(full_dims, spacing_mm))
    return Volume3D(out.astype(np.float32), spacing_mm, origin_mm, primary_out.unit)
