"""Command-line entry point ``kv2ct``.

Exit codes: 0 success, 2 configuration / input error, 3 numeric failure,
4 I/O failure (missing or unreadable artifacts).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from kv2ct import io
from kv2ct.config import MODEL_TAGS, load_config
from kv2ct.errors import Kv2CTError
from kv2ct.evaluation.dvh import DvhSpec, dvh_indices
from kv2ct.evaluation.gamma import GammaCriteria, gamma3d
from kv2ct.evaluation.image import cdvh, mae, shift_search
from kv2ct.evaluation.report import MetricReport

log = logging.getLogger("kv2ct")


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workspace is not None:
        cfg = cfg.with_workspace(args.workspace)
    return cfg


def _workspace(args):
    from kv2ct.pipeline import prepare
    return prepare(_load_cfg(args))


def _progress(tag):
    def cb(epoch, lr, loss):
        log.info("%s epoch %d lr %.3g loss %.6g", tag, epoch, lr, loss)
    return cb


# -- stage commands -------------------------------------------------------------

def cmd_stage(args):
    from kv2ct.pipeline import run_stage
    ws = _workspace(args)
    tag = getattr(args, "preset", None)
    progress = _progress(tag or "train") if args.command == "train" else None
    for d in run_stage(ws, args.command, tag=tag, force=args.force, progress=progress):
        print(d)
    return 0


def cmd_augment(args):
    if args.dry_run:
        cfg = _load_cfg(args)
        for tag in ([args.preset] if args.preset else MODEL_TAGS):
            g = cfg.preset(tag).grss
            n_s, n_p = len(g.shifts()), len(g.phases())
            print(f"{tag}: {n_s} shifts x {n_p} phases = {n_s * n_p} pairs")
        return 0
    return cmd_stage(args)


def cmd_run(args):
    from kv2ct.pipeline import run_pipeline
    report, ws = run_pipeline(_load_cfg(args), force=args.force, progress=_progress("train"))
    sys.stdout.write(report.to_csv())
    print(f"# report: {ws.dir('eval') / 'report.json'}", file=sys.stderr)
    return 0


def cmd_report(args):
    if args.report:
        path = Path(args.report)
        eval_dir = path.parent
    else:
        ws = _workspace(args)
        eval_dir = ws.require("eval")
        path = eval_dir / "report.json"
    if not path.is_file():
        raise FileNotFoundError(f"report not found: {path}")
    report = MetricReport.load(path)
    sys.stdout.write(report.to_json() if args.format == "json" else report.to_csv())
    if args.figures:
        from kv2ct.plotting import cdvh_plot
        out = Path(args.figures)
        written = [cdvh_plot(report.cdvh["threshold_hu"], report.cdvh["fraction"], out / "cdvh.png")]
        if not args.report:
            from kv2ct.geometry import shift_volume
            from kv2ct.pipeline import render_figures
            ph = ws.require("phantom")
            ct = io.load_volume(ph / "ct")
            shift = ws.cfg.eval.test_shift_mm
            gct = shift_volume(ct, shift, "S-I") if shift else ct
            sct = io.load_volume(ws.require("compose") / "sct")
            written = render_figures(report, sct, gct, io.load_masks(ph / "ct"), out)
        for p in written:
            print(f"# figure: {p}", file=sys.stderr)
    return 0


# -- eval commands ----------------------------------------------------------------

def _mask(args):
    if not args.masks:
        return None
    masks = io.load_masks(args.masks)
    if args.structure not in masks:
        raise Kv2CTError(f"structure {args.structure!r} not in {args.masks}")
    return masks[args.structure]


def cmd_eval(args):
    metric = args.metric
    if metric == "dvh":
        dose = io.load_volume(args.dose)
        masks = io.load_masks(args.masks)
        spec = DvhSpec(tuple(args.indices.split(",")),
                       tuple(args.structures.split(",")) if args.structures else
                       tuple(n for n in DvhSpec.structures if n in masks))
        res = dvh_indices(dose, masks, spec)
        print("structure,index,value")
        for s, row in res.items():
            for idx, v in row.items():
                print(f"{s},{idx},{v!r}")
        return 0
    ref = io.load_volume(args.ref)
    ev = io.load_volume(args.eval)
    if metric == "mae":
        print(repr(mae(ref, ev, _mask(args))))
    elif metric == "cdvh":
        grid, frac = cdvh(ref, ev, _mask(args))
        print("threshold_hu,fraction")
        for t, f in zip(grid, frac):
            print(f"{t:g},{f!r}")
    elif metric == "gamma":
        crit = GammaCriteria.parse(args.crit)
        if args.offset:
            ref, ev = ref.with_data(ref.data + args.offset), ev.with_data(ev.data + args.offset)
        rate = gamma3d(ref, ev, crit)
        if args.both:
            back = gamma3d(ev, ref, crit)
            print(f"ref_first,{rate!r}\nref_second,{back!r}\nmean,{0.5 * (rate + back)!r}")
        else:
            print(rate)
    elif metric == "shift":
        delta_m, maes = shift_search(ev, ref, mask=_mask(args))
        print(f"shift_error_mm,{abs(delta_m)!r}\ndelta_m_mm,{delta_m!r}")
        if args.verbose:
            for d, m in maes.items():
                print(f"candidate,{d!r},{m!r}")
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk", help="TOML file or preset name (desk, clinical)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--workspace", default=None, help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kv2ct", description="Synthetic CT from two orthogonal kV images.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("phantom", "generate the digital phantom and structure masks"),
                       ("project", "render planning and test kV pairs"),
                       ("synthesize", "run both trained models on the test kV pair"),
                       ("compose", "assemble the full synthetic CT")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--force", action="store_true", help="ignore cached artifacts")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("augment", parents=[common], help="expand the planning pair into training pairs")
    p.add_argument("--preset", choices=MODEL_TAGS, default=None, help="model preset (default: both)")
    p.add_argument("--dry-run", action="store_true", help="print the pair count only")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a model on its augmented pairs")
    p.add_argument("--preset", choices=MODEL_TAGS, default=None, help="model preset (default: both)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("run", parents=[common], help="run every stage and print the report")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[common], help="print a report and render its figures")
    p.add_argument("--report", default=None, help="report.json (default: the workspace's)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--figures", default=None, help="directory for PNG figures")
    p.set_defaults(func=cmd_report)

    ev = sub.add_parser("eval", help="metrics on stored volumes")
    evsub = ev.add_subparsers(dest="metric", required=True)
    for name in ("mae", "cdvh", "gamma", "shift"):
        p = evsub.add_parser(name, parents=[common])
        p.add_argument("--ref", required=True, help="reference volume (.json); gCT pool for shift")
        p.add_argument("--eval", required=True, help="evaluated volume (.json); sCT for shift")
        p.add_argument("--masks", default=None, help="structure masks (.masks.json)")
        p.add_argument("--structure", default="BODY")
        if name == "gamma":
            p.add_argument("--crit", default="2,2,10", help="dd%%,dta_mm,threshold%%")
            p.add_argument("--offset", type=float, default=0.0, help="added to both volumes first")
            p.add_argument("--both", action="store_true", help="also swap reference and evaluated")
        p.set_defaults(func=cmd_eval)
    p = evsub.add_parser("dvh", parents=[common])
    p.add_argument("--dose", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--indices", default="D95%,D2%,D0.01cc,Mean")
    p.add_argument("--structures", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Kv2CTError as exc:
        print(f"kv2ct: error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except OSError as exc:
        print(f"kv2ct: I/O error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FloatingPointError) as exc:
        print(f"kv2ct: error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, FloatingPointError) else 2


if __name__ == "__main__":
    sys.exit(main())
