"""On-disk formats.

Volumes and kV pairs are a JSON header plus a little-endian float32 ``.raw``
payload in x-fastest order.  Structure masks are stored as run-length
encoded flat index runs in ``<name>.masks.json``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from kv2ct.errors import InvalidInputError, ShapeError
from kv2ct.geometry import GeometrySpec, KvImagePair, Volume3D


def _stem(path):
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def _write_raw(path, arr):
    # x-fastest == Fortran order
    np.asarray(arr, dtype="<f4").ravel(order="F").tofile(path)


def _read_raw(path, dims):
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != int(np.prod(dims)):
        raise ShapeError(f"{path}: expected {int(np.prod(dims))} values, found {flat.size}")
    return flat.reshape(dims, order="F")


def save_volume(vol, path):
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "dtype": "f32le",
        "unit": vol.unit,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2))
    _write_raw(stem.with_suffix(".raw"), vol.data)
    return stem.with_suffix(".json")


def load_volume(path):
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("dtype", "f32le") != "f32le":
        raise InvalidInputError(f"{stem}: unsupported dtype {header['dtype']!r}")
    if header.get("unit") not in ("HU", "Gy"):
        raise InvalidInputError(f"{stem}: volume unit must be HU or Gy, got {header.get('unit')!r}")
    dims = tuple(int(n) for n in header["dims"])
    if len(dims) != 3:
        raise ShapeError(f"{stem}: volume header must have 3 dims")
    data = _read_raw(stem.with_suffix(".raw"), dims)
    return Volume3D(data, tuple(header["spacing_mm"]), tuple(header["origin_mm"]), header["unit"])


def save_kv_pair(pair, path):
    """Write a kV pair; the header carries 2-D dims, two views, and the geometry."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    nu, nv = pair.dims
    header = {
        "dims": [nu, nv],
        "views": 2,
        "spacing_mm": [pair.pixel_pitch_mm, pair.pixel_pitch_mm],
        "dtype": "f32le",
        "unit": "lineintegral",
        "couch_shift_mm": pair.couch_shift_mm,
        "geometry": pair.geometry.to_dict(),
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2))
    # each view is an x-fastest 2-D block, views concatenated
    _write_raw(stem.with_suffix(".raw"), np.moveaxis(pair.images, 0, -1))
    return stem.with_suffix(".json")


def load_kv_pair(path):
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("unit") != "lineintegral":
        raise InvalidInputError(f"{stem}: kV unit must be 'lineintegral'")
    nu, nv = (int(n) for n in header["dims"])
    data = _read_raw(stem.with_suffix(".raw"), (nu, nv, int(header.get("views", 2))))
    geom = GeometrySpec.from_dict(header["geometry"]) if "geometry" in header else GeometrySpec()
    return KvImagePair(np.moveaxis(data, -1, 0), float(header["spacing_mm"][0]), geom,
                       float(header.get("couch_shift_mm", 0.0)))


def rle_encode(mask):
    """Runs of ``True`` in the x-fastest flattened mask as [start, length] pairs."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F").astype(np.int8)
    edges = np.diff(np.concatenate(([0], flat, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs, dims):
    flat = np.zeros(int(np.prod(dims)), dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(dims, order="F")


def save_masks(masks, path):
    """Write a ``{name: bool array}`` mask set as ``<stem>.masks.json``."""
    path = Path(path)
    if not path.name.endswith(".masks.json"):
        path = _stem(path).with_suffix(".masks.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = next(iter(masks.values())).shape if masks else ()
    doc = {"dims": list(dims), "order": "x-fastest",
           "structures": {name: rle_encode(m) for name, m in masks.items()}}
    path.write_text(json.dumps(doc))
    return path


def load_masks(path):
    path = Path(path)
    if not path.name.endswith(".masks.json"):
        path = _stem(path).with_suffix(".masks.json")
    doc = json.loads(path.read_text())
    dims = tuple(doc["dims"])
    return {name: rle_decode(runs, dims) for name, runs in doc["structures"].items()}
