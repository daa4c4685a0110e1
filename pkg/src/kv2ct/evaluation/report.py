"""Structured metric results with deterministic JSON and CSV serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kv2ct.errors import InvalidInputError


@dataclass
class MetricReport:
    mae_hu: float
    # survival curve on the 0..500 HU grid plus |diff| quantiles
    cdvh: dict
    # {"ct" | "dose": {criteria label: {"ref_sct": %, "ref_gct": %, "mean": %}}}
    gamma_pass_percent: dict
    # {structure: {index: {"gct": v, "sct": v, "diff": v}}}
    dvh_indices: dict
    shift_error_mm: float
    extras: dict = field(default_factory=dict)

    def validate(self):
        for key, v in _leaves(self.gamma_pass_percent):
            if not 0.0 <= v <= 100.0:
                raise InvalidInputError(f"gamma {key} = {v} is not a percentage")
        frac = np.asarray(self.cdvh.get("fraction", []), dtype=float)
        if frac.size and (np.any(np.diff(frac) > 0) or frac[0] > 1.0 or frac.min() < 0.0):
            raise InvalidInputError("cdvh must be a non-increasing survival fraction in [0, 1]")
        if not (math.isfinite(self.mae_hu) and self.mae_hu >= 0):
            raise InvalidInputError(f"mae_hu = {self.mae_hu} is invalid")
        return self

    def to_dict(self):
        return _plain(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        """Flat ``metric,key,value`` rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "key", "value"])
        for metric, key, value in self.rows():
            w.writerow([metric, key, repr(value) if isinstance(value, float) else value])
        return buf.getvalue()

    def rows(self):
        yield "mae_hu", "", self.mae_hu
        yield "shift_error_mm", "", self.shift_error_mm
        for k, v in sorted(self.cdvh.get("quantiles", {}).items()):
            yield "cdvh_quantile", k, v
        for t, f in zip(self.cdvh.get("threshold_hu", []), self.cdvh.get("fraction", [])):
            if float(t) % 50 == 0:
                yield "cdvh", f"{float(t):g}", float(f)
        for key, v in _leaves(self.gamma_pass_percent):
            yield "gamma", key, v
        for s in sorted(self.dvh_indices):
            for idx in sorted(self.dvh_indices[s]):
                for which, v in sorted(self.dvh_indices[s][idx].items()):
                    yield "dvh", f"{s} {idx} {which}", v
        for k in sorted(self.extras):
            v = self.extras[k]
            if isinstance(v, (int, float)):
                yield "extra", k, float(v)

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        (directory / "report.csv").write_text(self.to_csv())
        return directory / "report.json"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _leaves(tree, prefix=""):
    for k in sorted(tree):
        v = tree[k]
        key = f"{prefix} {k}".strip()
        if isinstance(v, dict):
            yield from _leaves(v, key)
        else:
            yield key, float(v)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
