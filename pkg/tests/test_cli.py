import contextlib
import io as stdio
import json
from pathlib import Path

import numpy as np
import pytest

from kv2ct import io
from kv2ct.cli import main
from kv2ct.geometry import Volume3D

MINI = str(Path(__file__).parent / "data" / "mini.toml")


def run_cli(*argv):
    out, err = stdio.StringIO(), stdio.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("mini")
    code, out, err = run_cli("run", "--config", MINI, "--workspace", ws)
    assert code == 0, err
    return ws, out


def only(ws, pattern):
    (hit,) = list(Path(ws).glob(pattern))
    return hit


def test_run_reports_every_metric(mini_run):
    ws, out = mini_run
    assert out.startswith("metric,key,value\n")
    doc = json.loads(only(ws, "eval/*/report.json").read_text())
    assert doc["mae_hu"] > 0 and 0 <= doc["shift_error_mm"] <= 1.0
    assert set(doc["gamma_pass_percent"]) == {"ct", "dose"}
    assert set(doc["gamma_pass_percent"]["ct"]) == {"3%/3mm/10%", "2%/2mm/10%"}
    assert set(doc["dvh_indices"]) == {"CTV", "BRAINSTEM", "PAROTID", "ORAL_CAVITY", "MANDIBLE"}
    assert len(doc["cdvh"]["fraction"]) == 501
    for key in ("mae_head_hu", "mae_head_primary_only_hu", "head_improvement_percent"):
        assert key in doc["extras"]
    eval_dir = only(ws, "eval/*")
    assert (eval_dir / "report.csv").is_file() and (eval_dir / "cdvh.png").is_file()
    assert list(eval_dir.glob("triptych_z*.png"))


def test_rerun_uses_cache(mini_run):
    ws, out = mini_run
    marker = only(ws, "train/primary/*/stage.json")
    before = marker.stat().st_mtime_ns
    code, again, _ = run_cli("run", "--config", MINI, "--workspace", ws)
    assert code == 0 and again == out
    assert marker.stat().st_mtime_ns == before


def test_report_formats_and_figures(mini_run, tmp_path):
    ws, out = mini_run
    code, csv_text, _ = run_cli("report", "--config", MINI, "--workspace", ws)
    assert code == 0 and csv_text == out
    code, js, _ = run_cli("report", "--config", MINI, "--workspace", ws, "--format", "json")
    assert code == 0 and js == only(ws, "eval/*/report.json").read_text()
    code, _, err = run_cli("report", "--config", MINI, "--workspace", ws, "--figures", tmp_path)
    assert code == 0 and (tmp_path / "cdvh.png").is_file() and list(tmp_path.glob("triptych_z*.png"))
    code, _, _ = run_cli("report", "--report", only(ws, "eval/*/report.json"), "--figures", tmp_path / "r")
    assert code == 0 and (tmp_path / "r" / "cdvh.png").is_file()


def test_stages_run_individually(mini_run):
    ws, _ = mini_run
    for cmd in (["phantom"], ["project"], ["augment", "--preset", "secondary"],
                ["train", "--preset", "secondary"], ["synthesize"], ["compose"]):
        code, out, err = run_cli(*cmd, "--config", MINI, "--workspace", ws)
        assert code == 0, err
        assert out.strip() and Path(out.split()[0]).is_dir()


def test_eval_subcommands_on_artifacts(mini_run):
    ws, _ = mini_run
    ct = only(ws, "phantom/*/ct.json")
    masks = only(ws, "phantom/*/ct.masks.json")
    sct = only(ws, "compose/*/sct.json")
    code, out, _ = run_cli("eval", "gamma", "--ref", ct, "--eval", ct, "--crit", "2,2,10")
    assert code == 0 and out.strip() == "100.0"
    code, out, _ = run_cli("eval", "gamma", "--ref", ct, "--eval", sct, "--offset", 1024, "--both")
    assert code == 0 and [l.split(",")[0] for l in out.split()] == ["ref_first", "ref_second", "mean"]
    code, out, _ = run_cli("eval", "mae", "--ref", ct, "--eval", ct, "--masks", masks)
    assert code == 0 and float(out) == 0.0
    code, out, _ = run_cli("eval", "cdvh", "--ref", ct, "--eval", sct, "--masks", masks, "--structure", "HEAD")
    assert code == 0 and len(out.splitlines()) == 502
    code, out, _ = run_cli("eval", "shift", "--ref", ct, "--eval", ct, "--masks", masks)
    assert code == 0 and out.splitlines()[0] == "shift_error_mm,0.0"


def test_eval_dvh(tmp_path):
    dose = Volume3D(np.full((4, 4, 4), 60.0), (5.0, 5.0, 5.0))
    io.save_volume(dose, tmp_path / "dose")
    io.save_masks({"CTV": np.ones((4, 4, 4), bool)}, tmp_path / "dose")
    code, out, _ = run_cli("eval", "dvh", "--dose", tmp_path / "dose.json", "--masks", tmp_path / "dose.masks.json")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "structure,index,value" and "CTV,D95%,60.0" in lines and len(lines) == 5


def test_augment_dry_run_counts():
    code, out, _ = run_cli("augment", "--preset", "primary", "--dry-run")
    assert code == 0 and out.strip() == "primary: 17 shifts x 36 phases = 612 pairs"
    code, out, _ = run_cli("augment", "--dry-run")
    assert code == 0 and out.splitlines()[1] == "secondary: 33 shifts x 4 phases = 132 pairs"


def test_exit_codes(tmp_path):
    assert run_cli("run", "--config", tmp_path / "missing.toml")[0] == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[primary.grss]\nkv_shift_factor = 2.0\n")
    assert run_cli("phantom", "--config", bad)[0] == 2
    # artifacts of an earlier stage are missing
    code, _, err = run_cli("report", "--config", MINI, "--workspace", tmp_path / "empty")
    assert code == 4 and "eval" in err
    code, _, _ = run_cli("synthesize", "--config", MINI, "--workspace", tmp_path / "empty")
    assert code == 4
    assert run_cli("eval", "mae", "--ref", tmp_path / "no.json", "--eval", tmp_path / "no.json")[0] == 4
    zero = Volume3D(np.zeros((3, 3, 3)))
    io.save_volume(zero, tmp_path / "zero")
    assert run_cli("eval", "gamma", "--ref", tmp_path / "zero.json", "--eval", tmp_path / "zero.json")[0] == 3


def test_help_lists_subcommands():
    with pytest.raises(SystemExit) as exc:
        run_cli("--help")
    assert exc.value.code == 0
