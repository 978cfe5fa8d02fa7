import csv
import io
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from kneet1rho.cli import main
from kneet1rho.nifti import read_volume
from kneet1rho.phantom import PhantomSpec
from kneet1rho.pipeline import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    PipelineConfig,
    agreement_report,
)

SMALL = PhantomSpec(dims=(72, 80, 64), spacing=(1.5, 1.5, 1.5), axcodes="PSR", fov_centre=(0, 6, 10))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    (root / "spec.json").write_text(json.dumps(SMALL.to_dict()))
    code = main(["phantom", "generate", "--config", str(root / "spec.json"), "--out", str(root / "data"),
                 "--cases", "3", "--comparison", "erode", "--vary", "--seed", "11"])
    assert code == EXIT_OK
    return root / "data"


def _config(data: Path, **changes) -> Path:
    cfg = json.loads((data / "pipeline.json").read_text())
    cfg.update(changes)
    path = data / f"cfg_{abs(hash(json.dumps(changes, sort_keys=True)))}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_generate_layout(cohort):
    cfg = json.loads((cohort / "pipeline.json").read_text())
    assert [c["id"] for c in cfg["cases"]] == ["case01", "case02", "case03"]
    assert cfg["cases"][0]["tsl"] == [0, 50, 30, 10]
    for name in ("frame_00.nii.gz", "mask.nii.gz", "mask_pred.nii.gz", "truth_subregions.nii.gz",
                 "truth_table.json"):
        assert (cohort / "case01" / name).exists()
    assert (cohort / "reference.nii.gz").exists()


def test_pipeline_run_outputs_and_determinism(cohort, tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["pipeline", "run", "--config", str(cohort / "pipeline.json"), "--out", str(out)]) == EXIT_OK
        outs.append(out)
    rows = list(csv.DictReader(io.StringIO((outs[0] / "case01" / "region_stats.csv").read_text())))
    assert len(rows) == 23
    manifest = json.loads((outs[0] / "case01" / "manifest.json").read_text())
    assert manifest["report"]["stages_ran"] == ["standardise", "parcellate", "fit", "stats"]
    assert len(manifest["config_sha256"]) == 64 and "numpy" in manifest["versions"]
    compared = 0
    for path in sorted(outs[0].rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            assert path.read_bytes() == (outs[1] / path.relative_to(outs[0])).read_bytes(), path
            compared += 1
    assert compared >= 3 * 10


def test_parallel_workers_match_serial(cohort, tmp_path):
    assert main(["pipeline", "run", "--config", str(cohort / "pipeline.json"), "--out", str(tmp_path / "s")]) == 0
    assert main(["pipeline", "run", "--config", str(cohort / "pipeline.json"), "--out", str(tmp_path / "p"),
                 "--workers", "2"]) == 0
    for case in ("case01", "case02", "case03"):
        a = (tmp_path / "s" / case / "region_stats.csv").read_bytes()
        assert a == (tmp_path / "p" / case / "region_stats.csv").read_bytes()


def test_missing_mask_is_io_error(cohort, tmp_path):
    cfg = json.loads((cohort / "pipeline.json").read_text())
    cfg["cases"][1]["mask"] = "case02/nope.nii.gz"
    path = cohort / "missing_mask.json"
    path.write_text(json.dumps(cfg))
    code = main(["pipeline", "run", "--config", str(path), "--out", str(tmp_path)])
    assert code == EXIT_IO
    summary = json.loads((tmp_path / "batch_summary.json").read_text())
    by_id = {c["case_id"]: c for c in summary["cases"]}
    assert by_id["case02"]["stage"] == "ingest" and by_id["case02"]["exit_code"] == EXIT_IO
    assert by_id["case01"]["status"] == "ok" and by_id["case03"]["status"] == "ok"


def test_config_errors(cohort, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "run", "--config", str(bad)]) == EXIT_CONFIG
    cfg = json.loads((cohort / "pipeline.json").read_text())
    base = cohort
    variants = [
        {**cfg, "colour": 1},
        {**cfg, "cases": [{**cfg["cases"][0], "tsl": [0, 10]}]},
        {**cfg, "cases": [cfg["cases"][0], cfg["cases"][0]]},
        {**cfg, "stages": {"fit": False}},
        {**cfg, "stages": {"standardise": False}},
        {**cfg, "reference_path": None},
        {**cfg, "cases": [{**cfg["cases"][0], "mask": cfg["cases"][0]["series"][0]}]},
    ]
    for v in variants:
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(v, base)
    ok = {**cfg, "stages": {"standardise": False},
          "cases": [{**c, "pre_standardised": True} for c in cfg["cases"]]}
    assert PipelineConfig.from_dict(ok, base).stages["standardise"] is False


def test_unstandardised_run_records_stages(cohort, tmp_path):
    cfg = json.loads((cohort / "pipeline.json").read_text())
    cfg["stages"] = {"standardise": False}
    cfg["cases"] = [{**cfg["cases"][0], "pre_standardised": True}]
    path = cohort / "nostd.json"
    path.write_text(json.dumps(cfg))
    code = main(["pipeline", "run", "--config", str(path), "--out", str(tmp_path)])
    # the raw phantom is PSR-oriented, so parcellation refuses it
    assert code == EXIT_NUMERIC
    manifest = json.loads((tmp_path / "case01" / "manifest.json").read_text())
    assert manifest["report"]["stage"] == "parcellate"
    assert "standardise" not in manifest["report"]["stages_ran"]


def test_agreement_run(cohort, tmp_path):
    code = main(["agreement", "run", "--config", str(cohort / "pipeline.json"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "agreement" / "agreement.json").read_text())
    assert len(report["regions"]) == 20
    assert all(r["test_used"] in ("paired_t", "wilcoxon") for r in report["regions"])
    seg = list(csv.DictReader(io.StringIO((tmp_path / "agreement" / "segmentation.csv").read_text())))
    assert {r["compartment"] for r in seg} == {"FC", "MTC", "LTC", "PC"}
    assert all(0 < float(r["dsc"]) < 1 for r in seg)
    assert (tmp_path / "agreement" / "bland_altman" / "aMFC.csv").exists()
    lines = (tmp_path / "agreement" / "agreement.csv").read_text().strip().splitlines()
    assert lines[-1].split(",")[1] == "Average"


def test_agreement_identical_masks(cohort, tmp_path):
    cfg = json.loads((cohort / "pipeline.json").read_text())
    for c in cfg["cases"]:
        shutil.copy(cohort / c["mask"], cohort / c["id"] / "mask_copy.nii.gz")
        c["comparison_mask"] = f"{c['id']}/mask_copy.nii.gz"
    path = cohort / "same.json"
    path.write_text(json.dumps(cfg))
    assert main(["agreement", "run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "agreement" / "agreement.json").read_text())
    assert all(r["rmsd"] == 0 for r in report["regions"] if r["rmsd"] is not None)
    assert all(s["dsc"] == 1 for s in report["segmentation"])


def test_agreement_needs_three_cases(cohort, tmp_path):
    cfg = json.loads((cohort / "pipeline.json").read_text())
    cfg["cases"] = cfg["cases"][:2]
    path = cohort / "two.json"
    path.write_text(json.dumps(cfg))
    assert main(["agreement", "run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(ConfigError, match="minimum 3 cases for paired testing"):
        agreement_report([{}, {}])


def test_single_stage_commands(cohort, tmp_path):
    case = cohort / "case01"
    frames = [str(case / f"frame_{k:02d}.nii.gz") for k in range(4)]
    tsl = ["0", "50", "30", "10"]
    std = tmp_path / "std"
    assert main(["standardize", "--series", *frames, "--tsl", *tsl, "--mask", str(case / "mask.nii.gz"),
                 "--reference", str(cohort / "reference.nii.gz"), "--out", str(std)]) == EXIT_OK
    transform = json.loads((std / "transform.json").read_text())
    assert len(transform["rotations_deg"]) == 3
    assert main(["parcellate", "--mask", str(std / "mask_std.nii.gz"), "--out", str(tmp_path / "p")]) == 0
    std_frames = [str(std / f"series_std_{k:02d}.nii.gz") for k in range(4)]
    assert main(["fit", "--series", *std_frames, "--tsl", *tsl, "--mask", str(std / "mask_std.nii.gz"),
                 "--out", str(tmp_path / "f")]) == 0
    assert main(["stats", "--t1rho", str(tmp_path / "f" / "t1rho.nii.gz"),
                 "--subregions", str(tmp_path / "p" / "subregions.nii.gz"),
                 "--valid", str(tmp_path / "f" / "t1rho_valid.nii.gz"), "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "s" / "region_stats.csv").read_text())))
    assert len(rows) == 23 and all(float(r["mean_ms"]) > 20 for r in rows if r["n"] != "0")
    t1 = read_volume(tmp_path / "f" / "t1rho.nii.gz")
    assert t1.dims == read_volume(std / "mask_std.nii.gz").dims


def test_cli_error_codes(cohort, tmp_path):
    case = cohort / "case01"
    assert main(["parcellate", "--mask", str(case / "absent.nii.gz"), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["fit", "--series", str(case / "frame_00.nii.gz"), "--tsl", "0", "10",
                 "--mask", str(case / "mask.nii.gz"), "--out", str(tmp_path)]) == EXIT_CONFIG
    # raw PSR mask is not RAS+: numeric/stage failure
    assert main(["parcellate", "--mask", str(case / "mask.nii.gz"), "--out", str(tmp_path)]) == EXIT_NUMERIC
    assert main(["pipeline", "run"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"shape_factr": 0.4}')
    assert main(["parcellate", "--mask", str(case / "mask.nii.gz"), "--config", str(bad),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    bad.write_text('{"model": "biexponential"}')
    assert main(["fit", "--series", str(case / "frame_00.nii.gz"), str(case / "frame_01.nii.gz"),
                 "--tsl", "0", "10", "--mask", str(case / "mask.nii.gz"), "--config", str(bad),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
