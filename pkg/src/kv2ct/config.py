"""Run configuration: TOML presets, validation and per-stage hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import tomli

from kv2ct.compose import CompositionSpec
from kv2ct.errors import ConfigError
from kv2ct.evaluation.dvh import DvhSpec
from kv2ct.evaluation.gamma import GammaCriteria
from kv2ct.geometry import GeometrySpec
from kv2ct.grss import GrssConfig
from kv2ct.model import ModelConfig
from kv2ct.phantom import Box, PhantomSpec, generate, head_bbox
from kv2ct.training import TrainConfig

PRESETS = ("desk", "clinical")
MODEL_TAGS = ("primary", "secondary")


@dataclass(frozen=True)
class ModelPreset:
    """Everything one of the two models needs: crop region, augmentation, network, optimiser.

    ``region`` is an explicit voxel box, or ``"head"`` for a box centred on the
    HEAD mask with extent ``region_shape`` (0 on an axis means the mask extent).
    """

    region: Box | str | None
    grss: GrssConfig
    model: ModelConfig
    train: TrainConfig
    region_shape: tuple = (0, 0, 0)


@dataclass(frozen=True)
class EvalConfig:
    test_shift_mm: float = 2.0
    gamma: tuple = (GammaCriteria(3, 3), GammaCriteria(3, 2), GammaCriteria(2, 2))
    dvh: DvhSpec = DvhSpec()
    # CT-number gamma is run on HU + offset so the low threshold excludes air
    ct_gamma_offset_hu: float = 1024.0
    prescription_gy: float = 60.0
    dose_axis: str = "R-L"
    triptych: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int
    workspace: Path
    phantom: PhantomSpec
    geometry: GeometrySpec
    primary: ModelPreset
    secondary: ModelPreset
    compose_feather: int = 2
    noise_sigma: float = 0.0
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: str = "<dict>"

    def preset(self, tag):
        if tag not in MODEL_TAGS:
            raise ConfigError(f"unknown model preset {tag!r}; choose one of {MODEL_TAGS}")
        return getattr(self, tag)

    def with_seed(self, seed):
        seed = int(seed)
        return replace(self, seed=seed, phantom=replace(self.phantom, seed=seed),
                       primary=replace(self.primary, train=replace(self.primary.train, seed=seed)),
                       secondary=replace(self.secondary, train=replace(self.secondary.train, seed=seed + 1)))

    def with_workspace(self, workspace):
        return replace(self, workspace=Path(workspace))

    # -- validation ---------------------------------------------------------
    def resolve(self, masks=None):
        """Return a copy with every region an explicit Box and every model shape checked.

        Generates the phantom masks when a region is given relative to the head.
        """
        presets = {}
        for tag in MODEL_TAGS:
            p = self.preset(tag)
            region = p.region
            if region is None:
                region = Box((0, 0, 0), tuple(n - 1 for n in self.phantom.dims))
            elif region == "head":
                if masks is None:
                    masks = generate(self.phantom)[1]
                region = head_region(masks, p.region_shape, self.phantom.dims)
            elif not isinstance(region, Box):
                raise ConfigError(f"[{tag}] region must be a box or 'head', got {region!r}")
            model = p.model
            if model.out_depth == 0:
                model = replace(model, out_depth=region.shape[0] // p.grss.ct_downsample[0])
            presets[tag] = replace(p, region=region, model=model)
        out = replace(self, primary=presets["primary"], secondary=presets["secondary"])
        out.validate()
        return out

    def validate(self):
        """Cross-check presets against each other; raises ConfigError naming the conflict."""
        dims = tuple(self.phantom.dims)
        geom = self.geometry
        for tag in MODEL_TAGS:
            p = self.preset(tag)
            g, m = p.grss, p.model
            if p.grss.model_tag != tag or m.model_tag != tag:
                raise ConfigError(f"[{tag}] grss.model_tag and model.model_tag must both be {tag!r}")
            if abs(g.kv_shift_factor - geom.magnification) > 1e-9:
                raise ConfigError(f"[{tag}] kv_shift_factor {g.kv_shift_factor} != magnification "
                                  f"{geom.magnification:g} (sdd/sad)")
            crop = g.kv_crop or geom.detector_pixels
            for ax, (n, f) in enumerate(zip(crop, g.kv_downsample)):
                if n % f:
                    raise ConfigError(f"[{tag}] kv_crop {crop} not divisible by kv_downsample {g.kv_downsample}")
            if any(c > d for c, d in zip(crop, geom.detector_pixels)):
                raise ConfigError(f"[{tag}] kv_crop {crop} exceeds detector {geom.detector_pixels}")
            kv_in = tuple(c // f for c, f in zip(crop, g.kv_downsample))
            if kv_in != m.input_hw:
                raise ConfigError(f"[{tag}] model input_hw {m.input_hw} != kv_crop/kv_downsample {kv_in}")
            if isinstance(p.region, Box):
                if not p.region.inside(dims):
                    raise ConfigError(f"[{tag}] region {p.region.to_list()} outside phantom dims {dims}")
                shape = p.region.shape
                if any(n % f for n, f in zip(shape, g.ct_downsample)):
                    raise ConfigError(f"[{tag}] region shape {shape} not divisible by ct_downsample "
                                      f"{g.ct_downsample}")
                ct_out = tuple(n // f for n, f in zip(shape, g.ct_downsample))
                expect = m.output_dims if m.out_depth else (ct_out[0],) + m.output_dims[1:]
                if ct_out != expect:
                    raise ConfigError(f"[{tag}] model output {m.output_dims} != region/ct_downsample {ct_out}")
            else:
                # only the in-plane part can be checked before the head is located
                shape = self.preset(tag).region_shape
                for ax in (1, 2):
                    if shape[ax] and shape[ax] // g.ct_downsample[ax] != m.output_dims[ax]:
                        raise ConfigError(f"[{tag}] region_shape {shape} / ct_downsample does not give "
                                          f"model output {m.output_dims}")
            if g.shift_range_mm > 20.0:
                raise ConfigError(f"[{tag}] shift_range_mm must stay within the 20 mm projector limit")
        if isinstance(self.primary.region, Box) and isinstance(self.secondary.region, Box):
            if not self.primary.region.contains(self.secondary.region):
                raise ConfigError("secondary region must lie inside the primary region")
            CompositionSpec(self.secondary.region, self.primary.region,
                            feather_voxels=self.compose_feather).validate(dims)
        if abs(self.eval.test_shift_mm) > 20.0:
            raise ConfigError("eval.test_shift_mm must stay within 20 mm")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self

    # -- serialisation -----------------------------------------------------
    def to_dict(self):
        def preset(p):
            return {"region": p.region.to_list() if isinstance(p.region, Box) else p.region,
                    "region_shape": list(p.region_shape),
                    "grss": p.grss.to_dict(), "model": p.model.to_dict(), "train": p.train.to_dict()}
        e = self.eval
        return {
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "geometry": self.geometry.to_dict(),
            "noise_sigma": self.noise_sigma,
            "primary": preset(self.primary),
            "secondary": preset(self.secondary),
            "compose": {"feather_voxels": self.compose_feather},
            "eval": {"test_shift_mm": e.test_shift_mm,
                     "gamma": [[c.dd_percent, c.dta_mm, c.low_threshold_percent] for c in e.gamma],
                     "dvh_indices": list(e.dvh.indices), "dvh_structures": list(e.dvh.structures),
                     "ct_gamma_offset_hu": e.ct_gamma_offset_hu, "prescription_gy": e.prescription_gy,
                     "dose_axis": e.dose_axis, "triptych": e.triptych},
        }

    def stage_hash(self, *sections):
        """Short digest of the named top-level sections (the config slice a stage depends on)."""
        d = self.to_dict()
        payload = json.dumps({s: d[s] for s in sections}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def head_region(masks, shape, dims):
    """Box of ``shape`` centred on the HEAD mask bounding box, shifted to fit inside ``dims``."""
    bb = head_bbox(masks, "HEAD")
    lo, hi = [], []
    for ax in range(3):
        n = int(shape[ax]) or bb.shape[ax]
        if n > dims[ax]:
            raise ConfigError(f"head region extent {n} exceeds grid size {dims[ax]} on axis {ax}")
        centre = (bb.lo[ax] + bb.hi[ax]) / 2.0
        start = int(round(centre - (n - 1) / 2.0))
        start = min(max(start, 0), dims[ax] - n)
        lo.append(start)
        hi.append(start + n - 1)
    return Box(tuple(lo), tuple(hi))


_TOP_KEYS = {"seed", "workspace", "phantom", "geometry", "projection", "primary", "secondary",
             "compose", "eval"}


def _section(d, name, allowed=None):
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    if "seed" in sec:
        raise ConfigError(f"[{name}] sets its own seed; use the top-level seed")
    if allowed is not None:
        extra = set(sec) - set(allowed)
        if extra:
            raise ConfigError(f"[{name}] unknown keys {sorted(extra)}")
    return dict(sec)


def _build(cls, d, where):
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _model_preset(d, tag, seed):
    sec = _section(d, tag, {"region", "region_shape", "grss", "model", "train"})
    region = sec.get("region")
    if isinstance(region, list):
        region = Box.from_list(region)
    elif region not in (None, "head"):
        raise ConfigError(f"[{tag}] region must be [[lo], [hi]] or 'head'")
    grss = _build(GrssConfig, {"model_tag": tag, **sec.get("grss", {})}, f"{tag}.grss")
    model = _build(ModelConfig, {"model_tag": tag, **sec.get("model", {})}, f"{tag}.model")
    tr = dict(sec.get("train", {}))
    if "seed" in tr:
        raise ConfigError(f"[{tag}.train] sets its own seed; use the top-level seed")
    train = _build(TrainConfig, {**tr, "seed": seed + (tag == "secondary")}, f"{tag}.train")
    return ModelPreset(region, grss, model, train, tuple(sec.get("region_shape", (0, 0, 0))))


def from_dict(d, source="<dict>"):
    d = copy.deepcopy(d)
    extra = set(d) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    seed = int(d.get("seed", 1))
    ph = _section(d, "phantom")
    phantom = _build(PhantomSpec, {**ph, "seed": seed}, "phantom")
    geometry = _build(GeometrySpec, _section(d, "geometry"), "geometry")
    proj = _section(d, "projection", {"noise_sigma"})
    comp = _section(d, "compose", {"feather_voxels"})
    ev = _section(d, "eval", {"test_shift_mm", "gamma", "dvh_indices", "dvh_structures",
                              "ct_gamma_offset_hu", "prescription_gy", "dose_axis", "triptych"})
    gamma = tuple(GammaCriteria.parse(c) if isinstance(c, str) else GammaCriteria(*c)
                  for c in ev.pop("gamma", ["3,3,10", "3,2,10", "2,2,10"]))
    dvh = DvhSpec(tuple(ev.pop("dvh_indices", DvhSpec.indices)),
                  tuple(ev.pop("dvh_structures", DvhSpec.structures)))
    evcfg = EvalConfig(gamma=gamma, dvh=dvh, **ev)
    if evcfg.dose_axis not in ("R-L", "A-P", "S-I"):
        raise ConfigError(f"eval.dose_axis must be R-L, A-P or S-I, got {evcfg.dose_axis!r}")
    cfg = RunConfig(
        seed=seed,
        workspace=Path(d.get("workspace", "kv2ct_work")),
        phantom=phantom,
        geometry=geometry,
        primary=_model_preset(d, "primary", seed),
        secondary=_model_preset(d, "secondary", seed),
        compose_feather=int(comp.get("feather_voxels", 2)),
        noise_sigma=float(proj.get("noise_sigma", 0.0)),
        eval=evcfg,
        source=source,
    )
    return cfg.validate()


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose one of {PRESETS}")
    return resources.files("kv2ct.presets").joinpath(f"{name}.toml").read_text()


def load_config(path_or_name="desk"):
    """Load a TOML file, or one of the shipped presets by name."""
    text_or_path = str(path_or_name)
    if text_or_path in PRESETS:
        text, source = preset_text(text_or_path), f"preset:{text_or_path}"
    else:
        path = Path(text_or_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found (presets: {', '.join(PRESETS)})")
        text, source = path.read_text(), str(path)
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return from_dict(d, source)
