"""Batch orchestration: standardise, parcellate, fit and report.

Cases are described in a JSON configuration; relative paths resolve
against the configuration file's directory. Every case writes into its
own folder under the output directory and failures are reported per
stage without stopping the batch.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .agreement import QuantPairs, assd, bland_altman, confusion, dsc, gated_compare
from .fitting import FitConfig, fit_map, fmt, region_stats, round6, stats_to_csv, stats_to_json
from .labels import COMPARTMENT_NAMES, SUBREGION_NAMES
from .nifti import LabelVolume, MaskError, NiftiError, read_mask, read_volume, write_volume
from .parcellate import ParcellationConfig, ParcellationError, codebook_json, parcellate
from .standardize import (
    OrientationError,
    RegistrationConfig,
    RegistrationError,
    standardize_case,
)
from .volume import DynamicSeries, Volume

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

STAGES = ("standardise", "parcellate", "fit", "stats")

AGREEMENT_COLUMNS = ("region_code", "region_name", "n", "test_used", "p_value", "rmsd", "cv_rmsd",
                     "bias", "loa_low", "loa_high", "normality_p_ref", "normality_p_pred", "errors")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A case failed in ``stage``; ``exit_code`` classifies the failure."""

    def __init__(self, stage: str, exit_code: int, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = exit_code
        self.message = message


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    series: tuple
    tsl: tuple
    mask: str
    comparison_mask: str | None = None
    pre_standardised: bool = False

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "CaseSpec":
        allowed = {"id", "series", "tsl", "mask", "comparison_mask", "pre_standardised"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown case keys {sorted(unknown)}")
        for key in ("id", "series", "tsl", "mask"):
            if key not in d:
                raise ConfigError(f"case is missing {key!r}")

        def resolve(p):
            p = Path(p)
            return str(p if p.is_absolute() else base / p)

        series = tuple(resolve(p) for p in d["series"])
        tsl = tuple(float(t) for t in d["tsl"])
        if len(series) != len(tsl):
            raise ConfigError(f"case {d['id']}: {len(tsl)} tsl values for {len(series)} series frames")
        comparison = resolve(d["comparison_mask"]) if d.get("comparison_mask") else None
        paths = list(series) + [resolve(d["mask"])] + ([comparison] if comparison else [])
        if len(set(paths)) != len(paths):
            raise ConfigError(f"case {d['id']}: input paths must be distinct")
        return cls(str(d["id"]), series, tsl, resolve(d["mask"]), comparison, bool(d.get("pre_standardised", False)))


@dataclass(frozen=True)
class PipelineConfig:
    cases: tuple
    output_dir: str
    reference_path: str | None = None
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    parcellation: ParcellationConfig = field(default_factory=ParcellationConfig)
    stages: dict = field(default_factory=lambda: {s: True for s in STAGES})
    workers: int = 1
    alpha: float = 0.05
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict, base: Path | str = ".") -> "PipelineConfig":
        base = Path(base)
        allowed = {"cases", "output_dir", "reference_path", "registration", "fit", "parcellation",
                   "stages", "workers", "alpha"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        if not d.get("cases"):
            raise ConfigError("configuration lists no cases")
        cases = tuple(CaseSpec.from_dict(c, base) for c in d["cases"])
        ids = [c.case_id for c in cases]
        if len(set(ids)) != len(ids):
            raise ConfigError("case ids must be unique")
        stages = {s: True for s in STAGES}
        for key, val in (d.get("stages") or {}).items():
            if key not in stages:
                raise ConfigError(f"unknown stage {key!r}")
            stages[key] = bool(val)
        for later, needs in (("stats", "fit"), ("stats", "parcellate")):
            if stages[later] and not stages[needs]:
                raise ConfigError(f"stage {later!r} requires stage {needs!r}")
        if not stages["standardise"]:
            raw_cases = [c.case_id for c in cases if not c.pre_standardised]
            if raw_cases:
                raise ConfigError("standardisation disabled but cases not declared pre-standardised: "
                                  + ", ".join(raw_cases))
        ref = d.get("reference_path")
        if ref is not None:
            ref = str(Path(ref) if Path(ref).is_absolute() else base / ref)
        elif stages["standardise"]:
            raise ConfigError("reference_path is required when standardisation is enabled")
        out = Path(d.get("output_dir", "out"))
        try:
            reg = RegistrationConfig.from_dict(d.get("registration"))
            fit = FitConfig.from_dict(d.get("fit"))
            parc = ParcellationConfig.from_dict(d.get("parcellation"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        workers = int(d.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        return cls(cases, str(out if out.is_absolute() else base / out), ref, reg, fit, parc, stages,
                   workers, float(d.get("alpha", 0.05)), raw=d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def versions() -> dict:
    return {"kneet1rho": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_case(case: CaseSpec):
    """Read the series and masks of one case; I/O problems raise StageError(ingest)."""
    try:
        frames = [read_volume(p) for p in case.series]
        mask = read_mask(case.mask)
        comparison = read_mask(case.comparison_mask) if case.comparison_mask else None
    except (OSError, NiftiError) as exc:
        raise StageError("ingest", EXIT_IO, str(exc)) from exc
    except MaskError as exc:
        raise StageError("ingest", EXIT_NUMERIC, str(exc)) from exc
    try:
        series = DynamicSeries(case.tsl, frames)
    except ValueError as exc:
        raise StageError("ingest", EXIT_CONFIG, str(exc)) from exc
    for m in (mask, comparison):
        if m is not None and not series.grid.same_grid(m.volume):
            raise StageError("ingest", EXIT_CONFIG, "mask grid differs from the series grid")
    return series, mask, comparison


def _standardise(cfg: PipelineConfig, series, masks, reference: Volume | None = None):
    """Returns (series, masks, info) on the standardised grid."""
    if not cfg.stages["standardise"]:
        return series, masks, {"standardised": False}
    if reference is None:
        try:
            reference = read_volume(cfg.reference_path)
        except (OSError, NiftiError) as exc:
            raise StageError("standardise", EXIT_IO, f"reference: {exc}") from exc
    try:
        res = standardize_case(series, masks[0], reference, cfg.registration, extra_masks=masks[1:])
    except (RegistrationError, OrientationError, ValueError) as exc:
        raise StageError("standardise", EXIT_NUMERIC, str(exc)) from exc
    info = {
        "standardised": True,
        "orientation": res.orientation_ops.to_dict(),
        "rotations_deg": [round6(v) for v in res.rigid.rotations],
        "translation_mm": [round6(v) for v in res.rigid.translation],
        "registration_cost": round6(res.registration.cost),
    }
    return res.series, [res.mask, *res.extra_masks], info


def _parcellate(cfg, mask: LabelVolume) -> Volume:
    try:
        return parcellate(mask, cfg.parcellation)
    except ParcellationError as exc:
        raise StageError("parcellate", EXIT_NUMERIC, str(exc)) from exc


def _fit(cfg, series, region):
    try:
        return fit_map(series, region, cfg.fit)
    except ValueError as exc:
        raise StageError("fit", EXIT_NUMERIC, str(exc)) from exc


def run_case(cfg: PipelineConfig, case: CaseSpec) -> dict:
    """Run one case end to end and write its outputs; never raises for stage errors."""
    out = Path(cfg.output_dir) / case.case_id
    timings = {}
    report = {"case_id": case.case_id, "status": "ok", "exit_code": EXIT_OK, "stage": None,
              "error": None, "stages_ran": []}
    t0 = time.perf_counter()
    try:
        series, mask, _ = load_case(case)
        timings["ingest"] = time.perf_counter() - t0

        t = time.perf_counter()
        series, (mask,), std_info = _standardise(cfg, series, [mask])
        timings["standardise"] = time.perf_counter() - t
        if std_info["standardised"]:
            report["stages_ran"].append("standardise")
            for k, f in enumerate(series.frames):
                write_volume(f, out / f"series_std_{k:02d}.nii.gz")
            write_volume(mask.volume, out / "mask_std.nii.gz", datatype="uint8")

        sub = None
        if cfg.stages["parcellate"]:
            t = time.perf_counter()
            sub = _parcellate(cfg, mask)
            timings["parcellate"] = time.perf_counter() - t
            report["stages_ran"].append("parcellate")
            write_volume(sub, out / "subregions.nii.gz", datatype="uint8")
            _write_text(out / "subregions.json", codebook_json())

        tmap = None
        if cfg.stages["fit"]:
            t = time.perf_counter()
            tmap = _fit(cfg, series, mask.data > 0)
            timings["fit"] = time.perf_counter() - t
            report["stages_ran"].append("fit")
            write_volume(tmap.t1rho, out / "t1rho.nii.gz")
            write_volume(tmap.i0.with_data(tmap.valid.astype(np.uint8)), out / "t1rho_valid.nii.gz",
                         datatype="uint8")

        if cfg.stages["stats"]:
            t = time.perf_counter()
            rows = region_stats(tmap, sub)
            timings["stats"] = time.perf_counter() - t
            report["stages_ran"].append("stats")
            _write_text(out / "region_stats.csv", stats_to_csv(rows))
            _write_text(out / "region_stats.json", stats_to_json(rows))
            report["n_regions"] = len(rows)
        report["standardisation"] = std_info
    except StageError as exc:
        report.update(status="error", exit_code=exc.exit_code, stage=exc.stage, error=exc.message)
        log.error("case %s failed at %s: %s", case.case_id, exc.stage, exc.message)
    except OSError as exc:
        report.update(status="error", exit_code=EXIT_IO, stage="write", error=str(exc))
    timings["total"] = time.perf_counter() - t0

    manifest = {
        "case_id": case.case_id,
        "versions": versions(),
        "config_sha256": cfg.hash(),
        "tsl_acquisition_order": list(case.tsl),
        "report": report,
        "timings_s": {k: round(v, 4) for k, v in timings.items()},
    }
    try:
        _write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    except OSError:
        pass
    return report


def _map_cases(func, cfg: PipelineConfig, cases):
    cases = sorted(cases, key=lambda c: c.case_id)
    if cfg.workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(func, [cfg] * len(cases), cases))
    return [func(cfg, c) for c in cases]


def run_batch(cfg: PipelineConfig) -> tuple[list[dict], int]:
    """Run every case; returns per-case reports (ordered by id) and the batch exit code."""
    reports = _map_cases(run_case, cfg, cfg.cases)
    summary = {"config_sha256": cfg.hash(), "cases": reports}
    _write_text(Path(cfg.output_dir) / "batch_summary.json", json.dumps(summary, indent=2) + "\n")
    code = max((r["exit_code"] for r in reports), default=EXIT_OK)
    return reports, code


# ---------------------------------------------------------------- agreement


def _means(rows) -> dict:
    return {r.region_code: r.mean_ms for r in rows}


def quantify_pair(cfg: PipelineConfig, case: CaseSpec) -> dict:
    """Dual quantification of one case with its reference and comparison masks."""
    if case.comparison_mask is None:
        raise StageError("ingest", EXIT_CONFIG, f"case {case.case_id} has no comparison_mask")
    series, ref_mask, pred_mask = load_case(case)
    return quantify_masks(cfg, case.case_id, series, ref_mask, pred_mask)


def segmentation_metrics(ref_mask: LabelVolume, pred_mask: LabelVolume) -> list[dict]:
    """DSC and ASSD per compartment on the native grid."""
    out = []
    spacing = ref_mask.volume.spacing
    for code, name in COMPARTMENT_NAMES.items():
        a = ref_mask.data == code
        b = pred_mask.data == code
        row = {"compartment": name, "dsc": None, "assd_mm": None}
        if a.any() or b.any():
            row["dsc"] = dsc(confusion(a, b))
        if a.any() and b.any():
            row["assd_mm"] = assd(a, b, spacing)
        out.append(row)
    return out


def quantify_masks(cfg: PipelineConfig, case_id: str, series, ref_mask, pred_mask, reference=None) -> dict:
    """Segmentation metrics on the native grid, then both masks' subregional means."""
    seg = segmentation_metrics(ref_mask, pred_mask)
    series, (ref_mask, pred_mask), _ = _standardise(cfg, series, [ref_mask, pred_mask], reference)
    sub_ref = _parcellate(cfg, ref_mask)
    sub_pred = _parcellate(cfg, pred_mask)
    # voxels are fitted independently, so one fit over the union serves both masks
    tmap = _fit(cfg, series, (ref_mask.data > 0) | (pred_mask.data > 0))
    return {"case_id": case_id, "segmentation": seg,
            "q_ref": _means(region_stats(tmap, sub_ref)),
            "q_pred": _means(region_stats(tmap, sub_pred))}


def agreement_report(quant: list[dict], alpha: float = 0.05) -> dict:
    """Per-region gated comparison across cases plus averages over the 20 subregions."""
    if len(quant) < 3:
        raise ConfigError("minimum 3 cases for paired testing")
    quant = sorted(quant, key=lambda q: q["case_id"])
    rows, points = [], {}
    for code, name in SUBREGION_NAMES.items():
        ids, ref, pred = [], [], []
        for q in quant:
            a, b = q["q_ref"].get(code), q["q_pred"].get(code)
            if a is not None and b is not None:
                ids.append(q["case_id"])
                ref.append(a)
                pred.append(b)
        if len(ref) < 3:
            row = {"region_code": code, "region_name": name, "n": len(ref),
                   "errors": [f"only {len(ref)} cases with both quantifications"]}
            rows.append(row)
            continue
        pairs = QuantPairs(code, tuple(ref), tuple(pred))
        row = asdict(gated_compare(pairs, alpha, name))
        rows.append(row)
        try:
            points[name] = [(cid, m, d) for cid, (m, d) in zip(ids, bland_altman(pairs)[3].tolist())]
        except ValueError:
            pass
    rmsds = [r["rmsd"] for r in rows if r.get("rmsd") is not None]
    cvs = [r["cv_rmsd"] for r in rows if r.get("cv_rmsd") is not None]
    seg = [{"case_id": q["case_id"], **s} for q in quant for s in q["segmentation"]]
    return {
        "n_cases": len(quant),
        "alpha": alpha,
        "regions": rows,
        "average_rmsd": float(np.mean(rmsds)) if rmsds else None,
        "average_cv_rmsd": float(np.mean(cvs)) if cvs else None,
        "segmentation": seg,
        "bland_altman_points": points,
        "quantifications": [{"case_id": q["case_id"],
                             "q_ref": {str(k): v for k, v in sorted(q["q_ref"].items())},
                             "q_pred": {str(k): v for k, v in sorted(q["q_pred"].items())}} for q in quant],
    }


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    return round6(obj)


def agreement_to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGREEMENT_COLUMNS)
    for row in report["regions"]:
        vals = [fmt(row.get(c)) if c != "errors" else "; ".join(row.get("errors") or [])
                for c in AGREEMENT_COLUMNS]
        w.writerow(vals)
    w.writerow(["", "Average", "", "", "", fmt(report["average_rmsd"]), fmt(report["average_cv_rmsd"]),
                "", "", "", "", "", ""])
    return buf.getvalue()


def segmentation_to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("case_id", "compartment", "dsc", "assd_mm"))
    for s in report["segmentation"]:
        w.writerow([s["case_id"], s["compartment"], fmt(s["dsc"]), fmt(s["assd_mm"])])
    return buf.getvalue()


def write_agreement(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    files = {
        out / "agreement.csv": agreement_to_csv(report),
        out / "agreement.json": json.dumps(_round_tree(report), indent=2) + "\n",
        out / "segmentation.csv": segmentation_to_csv(report),
    }
    for name, pts in report["bland_altman_points"].items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("case_id", "mean_ms", "diff_ms"))
        for cid, m, d in pts:
            w.writerow([cid, fmt(m), fmt(d)])
        files[out / "bland_altman" / f"{name}.csv"] = buf.getvalue()
    for path, text in files.items():
        _write_text(path, text)
    return sorted(files)


def run_agreement(cfg: PipelineConfig, cases=None) -> dict:
    """Experiment-style agreement analysis of reference vs comparison masks."""
    cases = list(cfg.cases if cases is None else cases)
    if len(cases) < 3:
        raise ConfigError("minimum 3 cases for paired testing")
    missing = [c.case_id for c in cases if c.comparison_mask is None]
    if missing:
        raise ConfigError("cases without comparison_mask: " + ", ".join(missing))
    quant = _map_cases(quantify_pair, cfg, cases)
    report = agreement_report(quant, cfg.alpha)
    write_agreement(report, Path(cfg.output_dir) / "agreement")
    return report
