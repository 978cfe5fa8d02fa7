"""Command-line entry point (``kneet1rho``).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric or
stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .fitting import FitConfig, T1rhoMap, fit_map, region_stats, stats_to_csv, stats_to_json
from .nifti import LabelVolume, MaskError, NiftiError, read_mask, read_volume, write_volume
from .parcellate import ParcellationConfig, ParcellationError, codebook_json, parcellate
from .phantom import PhantomError, PhantomSpec, generate, perturb_mask, reference_volume, subject_spec
from .pipeline import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    PipelineConfig,
    StageError,
    run_agreement,
    run_batch,
)
from .standardize import OrientationError, RegistrationConfig, RegistrationError, standardize_case
from .volume import DynamicSeries

log = logging.getLogger("kneet1rho")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _config(cls, path):
    try:
        return cls.from_dict(_read_json(path))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _series(args) -> DynamicSeries:
    if len(args.series) != len(args.tsl):
        raise ConfigError(f"{len(args.tsl)} tsl values for {len(args.series)} series files")
    return DynamicSeries(args.tsl, [read_volume(p) for p in args.series])


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ------------------------------------------------------------------ commands


def cmd_phantom_generate(args) -> int:
    """Write ``--cases`` phantom subjects, a reference volume and a pipeline config.

    Without ``--vary`` the subjects share the phantom spec and differ only in the
    noise seed.
    """
    try:
        spec = PhantomSpec.from_dict(_read_json(args.config)) if args.config else PhantomSpec()
    except (PhantomError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    seed = spec.seed if args.seed is None else args.seed
    ref = reference_volume(spec)
    write_volume(ref, out / "reference.nii.gz")
    cases = []
    for i in range(args.cases):
        case_id = f"case{i + 1:02d}"
        case_spec = subject_spec(spec, seed + i) if args.vary else replace(spec, seed=seed + i)
        case = generate(case_spec)
        cdir = out / case_id
        names = []
        for k, f in enumerate(case.series.frames):
            name = f"{case_id}/frame_{k:02d}.nii.gz"
            write_volume(f, out / name)
            names.append(name)
        write_volume(case.mask.volume, cdir / "mask.nii.gz", datatype="uint8")
        write_volume(case.truth, cdir / "truth_subregions.nii.gz", datatype="uint8")
        _write_json(cdir / "truth_table.json", {str(k): v for k, v in case.truth_table.items()})
        entry = {"id": case_id, "series": names, "tsl": list(case.series.tsl), "mask": f"{case_id}/mask.nii.gz"}
        if args.comparison:
            pred = perturb_mask(case.mask, args.comparison, args.radius)
            write_volume(pred.volume, cdir / "mask_pred.nii.gz", datatype="uint8")
            entry["comparison_mask"] = f"{case_id}/mask_pred.nii.gz"
        cases.append(entry)
    _write_json(out / "phantom_spec.json", spec.to_dict())
    _write_json(out / "pipeline.json", {"cases": cases, "reference_path": "reference.nii.gz",
                                        "output_dir": "results"})
    print(f"wrote {len(cases)} phantom case(s) to {out}")
    return EXIT_OK


def cmd_standardize(args) -> int:
    series = _series(args)
    mask = read_mask(args.mask) if args.mask else None
    reference = read_volume(args.reference)
    cfg = _config(RegistrationConfig, args.config)
    res = standardize_case(series, mask, reference, cfg)
    out = Path(args.out)
    for k, f in enumerate(res.series.frames):
        write_volume(f, out / f"series_std_{k:02d}.nii.gz")
    if res.mask is not None:
        write_volume(res.mask.volume, out / "mask_std.nii.gz", datatype="uint8")
    _write_json(out / "transform.json", {
        "rotations_deg": list(res.rigid.rotations), "translation_mm": list(res.rigid.translation),
        "orientation": res.orientation_ops.to_dict(), "tsl": list(series.tsl)})
    return EXIT_OK


def cmd_parcellate(args) -> int:
    mask = read_mask(args.mask)
    cfg = _config(ParcellationConfig, args.config)
    sub = parcellate(mask, cfg)
    out = Path(args.out)
    write_volume(sub, out / "subregions.nii.gz", datatype="uint8")
    out.mkdir(parents=True, exist_ok=True)
    (out / "subregions.json").write_text(codebook_json())
    return EXIT_OK


def cmd_fit(args) -> int:
    series = _series(args)
    mask = read_mask(args.mask)
    cfg = _config(FitConfig, args.config)
    tmap = fit_map(series, mask.data > 0, cfg)
    out = Path(args.out)
    write_volume(tmap.t1rho, out / "t1rho.nii.gz")
    write_volume(tmap.i0.with_data(tmap.valid.astype(np.uint8)), out / "t1rho_valid.nii.gz", datatype="uint8")
    return EXIT_OK


def cmd_stats(args) -> int:
    t1 = read_volume(args.t1rho)
    sub = read_mask_like(args.subregions)
    if args.valid:
        valid = read_volume(args.valid).data.astype(bool)
    else:
        valid = t1.data > 0
    flag = t1.with_data(valid.astype(np.uint8))
    zero = t1.with_data(np.zeros(t1.dims, dtype=np.uint8))
    tmap = T1rhoMap(t1, t1.with_data(np.zeros(t1.dims)), t1.with_data(np.zeros(t1.dims)),
                    t1.with_data(np.zeros(t1.dims)), flag, flag, zero)
    rows = region_stats(tmap, sub)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "region_stats.csv").write_text(stats_to_csv(rows))
    (out / "region_stats.json").write_text(stats_to_json(rows))
    return EXIT_OK


def read_mask_like(path):
    v = read_volume(path)
    if not v.is_integer:
        raise MaskError("subregion volume must be integer-typed")
    return v


def _pipeline_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = PipelineConfig.load(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=str(Path(args.out)))
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_pipeline_run(args) -> int:
    cfg = _pipeline_config(args)
    reports, code = run_batch(cfg)
    for r in reports:
        status = "ok" if r["status"] == "ok" else f"failed at {r['stage']}: {r['error']}"
        print(f"{r['case_id']}: {status}")
    return code


def cmd_agreement_run(args) -> int:
    cfg = _pipeline_config(args)
    report = run_agreement(cfg)
    print(f"agreement over {report['n_cases']} cases: average RMSD {report['average_rmsd']:.6g} ms, "
          f"average CV {report['average_cv_rmsd']:.6g}%")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, default=None, help="parallel cases")
    common.add_argument("--seed", type=int, default=None, help="random seed (u64)")
    common.add_argument("-v", "--verbose", action="store_true")

    series_args = argparse.ArgumentParser(add_help=False)
    series_args.add_argument("--series", nargs="+", required=True, help="spin-lock frames (NIfTI)")
    series_args.add_argument("--tsl", nargs="+", type=float, required=True, help="tsl per frame, ms")

    parser = argparse.ArgumentParser(prog="kneet1rho", description="Knee cartilage T1rho post-processing")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic data")
    ph_sub = ph.add_subparsers(dest="action", required=True)
    gen = ph_sub.add_parser("generate", parents=[common], help="write phantom cases and a pipeline config")
    gen.add_argument("--cases", type=int, default=1)
    gen.add_argument("--comparison", choices=("erode", "dilate"), help="also write a perturbed mask")
    gen.add_argument("--radius", type=int, default=1)
    gen.add_argument("--vary", action="store_true",
                     help="draw per-subject geometry, T1rho, pose and noise from the seed")
    gen.set_defaults(func=cmd_phantom_generate)

    st = sub.add_parser("standardize", parents=[common, series_args], help="reorient and register a case")
    st.add_argument("--mask")
    st.add_argument("--reference", required=True)
    st.set_defaults(func=cmd_standardize)

    pa = sub.add_parser("parcellate", parents=[common], help="subregion labels from a standardised mask")
    pa.add_argument("--mask", required=True)
    pa.set_defaults(func=cmd_parcellate)

    fi = sub.add_parser("fit", parents=[common, series_args], help="voxelwise T1rho map")
    fi.add_argument("--mask", required=True)
    fi.set_defaults(func=cmd_fit)

    sa = sub.add_parser("stats", parents=[common], help="regional statistics of a T1rho map")
    sa.add_argument("--t1rho", required=True)
    sa.add_argument("--subregions", required=True)
    sa.add_argument("--valid", help="mask of voxels usable for statistics")
    sa.set_defaults(func=cmd_stats)

    pl = sub.add_parser("pipeline", help="batch processing")
    pl_sub = pl.add_subparsers(dest="action", required=True)
    pr = pl_sub.add_parser("run", parents=[common])
    pr.set_defaults(func=cmd_pipeline_run)

    ag = sub.add_parser("agreement", help="reference vs comparison mask analysis")
    ag_sub = ag.add_subparsers(dest="action", required=True)
    ar = ag_sub.add_parser("run", parents=[common])
    ar.set_defaults(func=cmd_agreement_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.func is not cmd_pipeline_run and args.func is not cmd_agreement_run:
        args.out = "."
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, NiftiError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MaskError, ParcellationError, RegistrationError, OrientationError, PhantomError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
