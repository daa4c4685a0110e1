"""End-to-end experiment: phantom -> project -> augment -> train -> synthesize -> compose -> eval.

Every stage writes its artifacts under ``<workspace>/<stage>[/<model>]/<key>``
where ``key`` digests the config slice the stage reads plus the keys of its
inputs, so changing a setting re-runs exactly the stages downstream of it.
A stage directory counts as complete once its ``stage.json`` marker exists.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np
import torch

from kv2ct import io
from kv2ct.compose import CompositionSpec, compose, upsample
from kv2ct.config import MODEL_TAGS
from kv2ct.errors import Kv2CTError, StageError
from kv2ct.evaluation.dose import synthetic_dose
from kv2ct.evaluation.dvh import dvh_indices
from kv2ct.evaluation.gamma import gamma_both
from kv2ct.evaluation.image import cdvh, diff_quantiles, mae, shift_search
from kv2ct.evaluation.report import MetricReport
from kv2ct.geometry import AIR_HU, Volume3D, project, shift_volume
from kv2ct.grss import augment, model_input, write_pairs, load_pairs
from kv2ct.model import load_checkpoint, save_checkpoint
from kv2ct.phantom import generate
from kv2ct.training import predict, train, write_curve

log = logging.getLogger(__name__)

STAGES = ("phantom", "project", "augment", "train", "synthesize", "compose", "eval")
MARKER = "stage.json"


def _digest(*parts):
    payload = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def set_threads():
    n = os.environ.get("KV2CT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


class Workspace:
    """Artifact locations for a resolved RunConfig."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.workspace)
        d = cfg.to_dict()
        k = {"phantom": _digest("phantom", d["seed"], d["phantom"])}
        k["project"] = _digest("project", k["phantom"], d["geometry"], d["noise_sigma"],
                               d["eval"]["test_shift_mm"])
        for tag in MODEL_TAGS:
            p = d[tag]
            k[("augment", tag)] = _digest("augment", k["project"], p["region"], p["grss"])
            k[("train", tag)] = _digest("train", k[("augment", tag)], p["model"], p["train"])
        k["synthesize"] = _digest("synthesize", *(k[("train", t)] for t in MODEL_TAGS))
        k["compose"] = _digest("compose", k["synthesize"], d["compose"])
        k["eval"] = _digest("eval", k["compose"], d["eval"])
        self.keys = k

    def dir(self, stage, tag=None):
        if stage in ("augment", "train"):
            if tag not in MODEL_TAGS:
                raise Kv2CTError(f"stage {stage} needs a model tag ({', '.join(MODEL_TAGS)})")
            return self.root / stage / tag / self.keys[(stage, tag)]
        return self.root / stage / self.keys[stage]

    def done(self, stage, tag=None):
        return (self.dir(stage, tag) / MARKER).is_file()

    def require(self, stage, tag=None):
        d = self.dir(stage, tag)
        if not (d / MARKER).is_file():
            raise StageError(stage, d, FileNotFoundError(f"missing artifacts; run the '{stage}' stage first"))
        return d


def _finish(directory, stage, started, extra=None):
    doc = {"stage": stage, "seconds": round(time.time() - started, 3)}
    doc.update(extra or {})
    (directory / MARKER).write_text(json.dumps(doc, indent=1, sort_keys=True))


# -- stages -------------------------------------------------------------------

def stage_phantom(ws):
    d, t0 = ws.dir("phantom"), time.time()
    d.mkdir(parents=True, exist_ok=True)
    vol, masks = generate(ws.cfg.phantom)
    io.save_volume(vol, d / "ct")
    io.save_masks(masks, d / "ct")
    _finish(d, "phantom", t0, {"voxels": {k: int(v.sum()) for k, v in masks.items()}})
    return d


def stage_project(ws):
    src = ws.require("phantom")
    d, t0, cfg = ws.dir("project"), time.time(), ws.cfg
    d.mkdir(parents=True, exist_ok=True)
    ct = io.load_volume(src / "ct")
    plan = project(ct, cfg.geometry, 0.0, cfg.noise_sigma, seed=cfg.seed)
    test = project(ct, cfg.geometry, cfg.eval.test_shift_mm, cfg.noise_sigma, seed=cfg.seed + 1)
    io.save_kv_pair(plan, d / "kv_plan")
    io.save_kv_pair(test, d / "kv_test")
    _finish(d, "project", t0)
    return d


def stage_augment(ws, tag):
    src_ph, src_pr = ws.require("phantom"), ws.require("project")
    d, t0 = ws.dir("augment", tag), time.time()
    p = ws.cfg.preset(tag)
    ct = io.load_volume(src_ph / "ct")
    kv = io.load_kv_pair(src_pr / "kv_plan")
    pairs = augment(ct, kv, p.grss, p.region)
    manifest = write_pairs(pairs, d, tag)
    _finish(d, "augment", t0, {"pairs": manifest["count"]})
    return d


def stage_train(ws, tag, progress=None):
    src = ws.require("augment", tag)
    d, t0 = ws.dir("train", tag), time.time()
    p = ws.cfg.preset(tag)
    kv, ct, _ = load_pairs(src / "pairs.json")
    result = train(kv, ct, p.model, p.train, progress=progress)
    save_checkpoint(result.net, d, result.normalization,
                    extra={"best_epoch": result.best_epoch, "best_loss": result.best_loss})
    write_curve(result.curve, d / "curve.csv")
    _finish(d, "train", t0, {"best_epoch": result.best_epoch, "best_loss": result.best_loss})
    return d


def _output_volume(data, ct, region, factors):
    spacing = tuple(s * f for s, f in zip(ct.spacing_mm, factors))
    origin = tuple(o + l * s + (f - 1) / 2.0 * s
                   for o, l, s, f in zip(ct.origin_mm, region.lo, ct.spacing_mm, factors))
    return Volume3D(np.asarray(data, dtype=np.float32), spacing, origin)


def stage_synthesize(ws):
    src_ph, src_pr = ws.require("phantom"), ws.require("project")
    models = {tag: ws.require("train", tag) for tag in MODEL_TAGS}
    d, t0 = ws.dir("synthesize"), time.time()
    d.mkdir(parents=True, exist_ok=True)
    ct = io.load_volume(src_ph / "ct")
    kv = io.load_kv_pair(src_pr / "kv_test")
    for tag in MODEL_TAGS:
        p = ws.cfg.preset(tag)
        net, norm, _ = load_checkpoint(models[tag])
        x = model_input(kv, ct, p.grss, p.region)
        out = predict(net, x[None], norm)[0]
        io.save_volume(_output_volume(out, ct, p.region, p.grss.ct_downsample), d / tag)
    _finish(d, "synthesize", t0)
    return d


def stage_compose(ws):
    src_ph, src_sy = ws.require("phantom"), ws.require("synthesize")
    d, t0, cfg = ws.dir("compose"), time.time(), ws.cfg
    d.mkdir(parents=True, exist_ok=True)
    ct = io.load_volume(src_ph / "ct")
    prim = io.load_volume(src_sy / "primary")
    sec = io.load_volume(src_sy / "secondary")
    spec = CompositionSpec(cfg.secondary.region, cfg.primary.region, feather_voxels=cfg.compose_feather)
    sct = compose(prim, sec, spec, ct.dims, ct.spacing_mm, ct.origin_mm)
    io.save_volume(sct, d / "sct")
    # ablation: primary model alone
    alone = np.full(ct.dims, AIR_HU, dtype=np.float64)
    alone[cfg.primary.region.slices] = upsample(prim.data, cfg.primary.region.shape)
    io.save_volume(ct.with_data(alone), d / "sct_primary_only")
    _finish(d, "compose", t0)
    return d


def shifted_masks(masks, like, delta_mm):
    """Structure masks moved S-I by ``delta_mm`` (linear interpolation, kept where >= 0.5)."""
    out = {}
    for name, m in masks.items():
        v = Volume3D(np.asarray(m, dtype=np.float32), like.spacing_mm, like.origin_mm)
        out[name] = shift_volume(v, delta_mm, "S-I", fill=0.0).data >= 0.5 if delta_mm else np.asarray(m, bool)
    return out


def evaluate(sct, gct, masks, cfg, primary_only=None, head_box=None):
    """MetricReport for a synthetic CT against its ground truth at the same pose."""
    e = cfg.eval
    body = masks["BODY"]
    grid, frac = cdvh(sct, gct, body)
    off = e.ct_gamma_offset_hu
    sct_n, gct_n = sct.with_data(sct.data + off), gct.with_data(gct.data + off)
    dose_g, scale = synthetic_dose(gct, masks["CTV"], e.prescription_gy, e.dose_axis)
    dose_s, _ = synthetic_dose(sct, masks["CTV"], e.prescription_gy, e.dose_axis, scale=scale)
    gamma = {"ct": {}, "dose": {}}
    for crit in e.gamma:
        for kind, (a, b) in (("ct", (sct_n, gct_n)), ("dose", (dose_s, dose_g))):
            r = gamma_both(a, b, crit)
            gamma[kind][crit.label] = {"ref_sct": r["ref_first"], "ref_gct": r["ref_second"], "mean": r["mean"]}
    dg = dvh_indices(dose_g, masks, e.dvh)
    ds = dvh_indices(dose_s, masks, e.dvh)
    dvh = {s: {i: {"gct": dg[s][i], "sct": ds[s][i], "diff": ds[s][i] - dg[s][i]} for i in dg[s]} for s in dg}
    delta_m, _ = shift_search(sct, gct, mask=body)
    extras = {"test_shift_mm": e.test_shift_mm, "delta_m_mm": delta_m,
              "dose_scale": scale, "body_voxels": int(body.sum())}
    if primary_only is not None and head_box is not None:
        head = np.zeros(body.shape, bool)
        head[head_box.slices] = True
        head &= body
        m_comp = mae(sct, gct, head)
        m_prim = mae(primary_only, gct, head)
        extras.update({"mae_head_hu": m_comp, "mae_head_primary_only_hu": m_prim,
                       "head_improvement_percent": 100.0 * (m_prim - m_comp) / m_prim,
                       "mae_primary_only_hu": mae(primary_only, gct, body)})
    report = MetricReport(
        mae_hu=mae(sct, gct, body),
        cdvh={"threshold_hu": grid, "fraction": frac, "quantiles": diff_quantiles(sct, gct, body)},
        gamma_pass_percent=gamma,
        dvh_indices=dvh,
        shift_error_mm=abs(delta_m),
        extras=extras,
    )
    return report.validate()


def stage_eval(ws):
    src_ph, src_co = ws.require("phantom"), ws.require("compose")
    d, t0, cfg = ws.dir("eval"), time.time(), ws.cfg
    d.mkdir(parents=True, exist_ok=True)
    ct = io.load_volume(src_ph / "ct")
    masks = io.load_masks(src_ph / "ct")
    sct = io.load_volume(src_co / "sct")
    alone = io.load_volume(src_co / "sct_primary_only")
    shift = cfg.eval.test_shift_mm
    gct = shift_volume(ct, shift, "S-I") if shift else ct
    report = evaluate(sct, gct, shifted_masks(masks, ct, shift), cfg, alone, cfg.secondary.region)
    report.write(d)
    if cfg.eval.triptych:
        render_figures(report, sct, gct, masks, d)
    _finish(d, "eval", t0)
    return d


def render_figures(report, sct, gct, masks, directory):
    from kv2ct.plotting import cdvh_plot, triptych
    paths = [cdvh_plot(report.cdvh["threshold_hu"], report.cdvh["fraction"], Path(directory) / "cdvh.png")]
    z_ctv = int(round(np.argwhere(masks["CTV"])[:, 2].mean())) if masks["CTV"].any() else sct.dims[2] // 2
    for z in sorted({z_ctv, sct.dims[2] // 2}):
        paths.append(triptych(gct, sct, z, Path(directory) / f"triptych_z{z:03d}.png", f"axial slice {z}"))
    return paths


# -- orchestration ------------------------------------------------------------

def _call(stage, ws, fn, *args, tag=None, **kwargs):
    try:
        return fn(ws, *args, **kwargs)
    except StageError:
        raise
    except (Kv2CTError, OSError, ValueError, FloatingPointError) as exc:
        raise StageError(stage if tag is None else f"{stage}/{tag}", ws.dir(stage, tag), exc) from exc


def run_stage(ws, stage, tag=None, force=False, progress=None):
    """Run one stage (both models when ``tag`` is None for augment/train); cached unless ``force``."""
    if stage not in STAGES:
        raise Kv2CTError(f"unknown stage {stage!r}")
    if stage in ("augment", "train"):
        tags = [tag] if tag else list(MODEL_TAGS)
        for t in tags:
            if force or not ws.done(stage, t):
                log.info("stage %s/%s -> %s", stage, t, ws.dir(stage, t))
                fn = stage_augment if stage == "augment" else stage_train
                kw = {"progress": progress} if stage == "train" else {}
                _call(stage, ws, fn, t, tag=t, **kw)
        return [ws.dir(stage, t) for t in tags]
    if force or not ws.done(stage):
        log.info("stage %s -> %s", stage, ws.dir(stage))
        fn = {"phantom": stage_phantom, "project": stage_project, "synthesize": stage_synthesize,
              "compose": stage_compose, "eval": stage_eval}[stage]
        _call(stage, ws, fn)
    return [ws.dir(stage)]


def prepare(cfg):
    """Resolve and validate ``cfg`` before any stage runs; returns the Workspace."""
    set_threads()
    return Workspace(cfg.resolve())


def run_pipeline(cfg, force=False, progress=None):
    """Execute every stage (reusing cached artifacts) and return the MetricReport."""
    ws = prepare(cfg)
    for stage in STAGES:
        run_stage(ws, stage, force=force, progress=progress)
    report_path = ws.dir("eval") / "report.json"
    return MetricReport.load(report_path), ws
