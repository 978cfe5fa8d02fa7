"""Voxelwise mono-exponential T1rho fitting and subregional statistics.

The signal model is ``I(tsl) = i0 * exp(-tsl / t1rho) + c``. For a fixed
``t1rho`` the model is linear in ``i0`` (and ``c``), so those are solved in
closed form and only ``t1rho`` is searched: a coarse log-spaced scan picks a
bracket, then golden-section sectioning narrows it below ``tol``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .labels import COMPARTMENT_ROWS, REGION_NAMES, SUBREGION_NAMES
from .volume import DynamicSeries, Volume

__all__ = [
    "FitConfig",
    "FitResult",
    "T1rhoMap",
    "RegionStats",
    "predict_signal",
    "fit_voxel",
    "fit_voxels",
    "fit_map",
    "region_stats",
    "profile_rss",
    "stats_to_csv",
    "stats_to_json",
]

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
INV_PHI2 = 1.0 - INV_PHI

_CHUNK = 1 << 17


@dataclass(frozen=True)
class FitConfig:
    t1rho_min: float = 1.0
    t1rho_max: float = 300.0
    tol: float = 0.01
    model: str = "two_param"
    intensity_floor: float = 0.0
    prescan_points: int = 32

    def __post_init__(self):
        if not 0 < self.t1rho_min < self.t1rho_max:
            raise ValueError(f"need 0 < t1rho_min < t1rho_max, got {self.t1rho_min}, {self.t1rho_max}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.model not in ("two_param", "three_param"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.prescan_points < 3:
            raise ValueError("prescan needs at least 3 points")

    @property
    def n_params(self) -> int:
        return 2 if self.model == "two_param" else 3

    @classmethod
    def from_dict(cls, d: dict | None) -> "FitConfig":
        return cls(**(d or {}))


@dataclass(frozen=True)
class FitResult:
    t1rho: float
    i0: float
    c: float
    rss: float
    converged: bool
    clamped: bool


def predict_signal(i0, t1rho, c, tsl):
    """Mono-exponential spin-lock decay ``i0 * exp(-tsl / t1rho) + c``."""
    t1rho = np.asarray(t1rho, dtype=np.float64)
    if np.any(t1rho <= 0):
        raise ValueError("t1rho must be positive")
    return np.asarray(i0) * np.exp(-np.asarray(tsl, dtype=np.float64) / t1rho) + c


def _linear_fit(y, tsl, t, model):
    """Closed-form linear parameters and residual sum of squares.

    ``y`` is (n, m), ``t`` is (n,) or scalar. Returns (rss, i0, c).
    """
    e = np.exp(-tsl[None, :] / np.reshape(t, (-1, 1)))
    see = np.einsum("ij,ij->i", e, e)
    sye = np.einsum("ij,ij->i", y, e)
    syy = np.einsum("ij,ij->i", y, y)
    if model == "two_param":
        i0 = sye / see
        rss = syy - i0 * sye
        c = np.zeros_like(i0)
    else:
        m = y.shape[1]
        se = e.sum(axis=1)
        sy = y.sum(axis=1)
        det = m * see - se * se
        i0 = (m * sye - se * sy) / det
        c = (see * sy - se * sye) / det
        rss = syy - (i0 * sye + c * sy)
    return np.maximum(rss, 0.0), i0, c


def profile_rss(y, tsl, t1rho, model="two_param"):
    """Residual sum of squares minimised over the linear parameters.

    Broadcasts a single voxel ``y`` (m,) over candidate ``t1rho`` values, or
    pairs voxels (n, m) with per-voxel ``t1rho`` (n,).
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t1rho, dtype=np.float64))
    if y.shape[0] == 1 and t.size > 1:
        y = np.broadcast_to(y, (t.size, y.shape[1]))
    return _linear_fit(y, np.asarray(tsl, dtype=np.float64), t, model)[0]


def _check_samples(tsl, n_params):
    if len(tsl) < n_params:
        raise ValueError(f"{len(tsl)} samples cannot determine {n_params} parameters")
    if len(np.unique(tsl)) != len(tsl):
        raise ValueError("tsl values must be distinct")


def _prescan(y, tsl, cfg):
    # one shared basis per grid point: rss = |y|^2 - |Q^T y|^2
    grid = np.geomspace(cfg.t1rho_min, cfg.t1rho_max, cfg.prescan_points)
    syy = np.einsum("ij,ij->i", y, y)
    rss = np.empty((y.shape[0], grid.size))
    for k, t in enumerate(grid):
        e = np.exp(-tsl / t)
        basis = e[:, None] if cfg.model == "two_param" else np.stack([e, np.ones_like(e)], axis=1)
        q, _ = np.linalg.qr(basis)
        proj = y @ q
        rss[:, k] = syy - np.einsum("ij,ij->i", proj, proj)
    k = np.argmin(rss, axis=1)
    lo = grid[np.maximum(k - 1, 0)]
    hi = grid[np.minimum(k + 1, grid.size - 1)]
    return lo, hi, grid


def _golden(y, tsl, cfg):
    """Vectorised bracketed golden-section search over t1rho."""
    model = cfg.model
    a, b, grid = _prescan(y, tsl, cfg)
    h = b - a
    # one iteration count for the whole batch, sized by the widest bracket
    widest = float(np.max(np.diff(grid))) * 2.0
    n_iter = max(1, int(math.ceil(math.log(cfg.tol / widest) / math.log(INV_PHI))) + 1)

    c = a + INV_PHI2 * h
    d = a + INV_PHI * h
    fc = _linear_fit(y, tsl, c, model)[0]
    fd = _linear_fit(y, tsl, d, model)[0]
    for _ in range(n_iter):
        left = fc < fd
        h = h * INV_PHI
        # left: minimum in [a, d]; right: minimum in [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_x = np.where(left, a + INV_PHI2 * h, a + INV_PHI * h)
        fx = _linear_fit(y, tsl, new_x, model)[0]
        d_new = np.where(left, c, new_x)
        fd_new = np.where(left, fc, fx)
        c = np.where(left, new_x, d)
        fc = np.where(left, fx, fd)
        d, fd = d_new, fd_new

    use_c = fc <= fd
    t = np.where(use_c, c, d)
    f = np.where(use_c, fc, fd)
    converged = (b - a) < cfg.tol

    # the sectioning never samples the bounds themselves
    for bound in (cfg.t1rho_min, cfg.t1rho_max):
        near = np.abs(t - bound) <= (b - a) + cfg.tol
        if np.any(near):
            fb = _linear_fit(y[near], tsl, np.full(int(near.sum()), bound), model)[0]
            better = fb <= f[near]
            idx = np.flatnonzero(near)[better]
            t[idx] = bound
            f[idx] = fb[better]

    rss, i0, cc = _linear_fit(y, tsl, t, model)
    clamped = (t - cfg.t1rho_min <= cfg.tol) | (cfg.t1rho_max - t <= cfg.tol)
    return t, i0, cc, rss, converged, clamped


def fit_voxels(intensities, tsl, cfg: FitConfig | None = None) -> dict:
    """Fit many voxels at once.

    Parameters
    ----------
    intensities : array_like, shape (n_voxels, n_tsl)
    tsl : array_like, shape (n_tsl,)
        Spin-lock times in ms, any order.

    Returns
    -------
    dict of arrays
        ``t1rho, i0, c, rss`` (float) and ``converged, clamped, below_floor``
        (bool). Voxels below the intensity floor are not fitted and carry
        zeros.
    """
    cfg = cfg or FitConfig()
    y = np.atleast_2d(np.asarray(intensities, dtype=np.float64))
    tsl = np.asarray(tsl, dtype=np.float64)
    if y.shape[1] != tsl.size:
        raise ValueError(f"{y.shape[1]} intensities per voxel but {tsl.size} tsl values")
    _check_samples(tsl, cfg.n_params)
    order = np.argsort(tsl, kind="stable")
    tsl, y = tsl[order], y[:, order]

    n = y.shape[0]
    out = {k: np.zeros(n) for k in ("t1rho", "i0", "c", "rss")}
    out.update({k: np.zeros(n, dtype=bool) for k in ("converged", "clamped", "below_floor")})
    below = ~np.any(y > cfg.intensity_floor, axis=1) | ~np.all(np.isfinite(y), axis=1)
    out["below_floor"] = below
    todo = np.flatnonzero(~below)
    for start in range(0, todo.size, _CHUNK):
        idx = todo[start:start + _CHUNK]
        t, i0, c, rss, conv, clamp = _golden(y[idx], tsl, cfg)
        out["t1rho"][idx] = t
        out["i0"][idx] = i0
        out["c"][idx] = c
        out["rss"][idx] = rss
        out["converged"][idx] = conv
        out["clamped"][idx] = clamp
    return out


def fit_voxel(intensities, tsls, cfg: FitConfig | None = None) -> FitResult:
    """Fit one voxel's decay curve."""
    cfg = cfg or FitConfig()
    y = np.asarray(intensities, dtype=np.float64)
    if y.ndim != 1 or y.size != len(tsls):
        raise ValueError("intensities and tsls must be 1-D and of equal length")
    r = fit_voxels(y[None, :], tsls, cfg)
    if r["below_floor"][0]:
        raise ValueError("signal below floor")
    return FitResult(
        t1rho=float(r["t1rho"][0]), i0=float(r["i0"][0]), c=float(r["c"][0]),
        rss=float(r["rss"][0]), converged=bool(r["converged"][0]), clamped=bool(r["clamped"][0]),
    )


@dataclass(frozen=True, eq=False)
class T1rhoMap:
    """Fitted parameter volumes; zero wherever no fit was made."""

    t1rho: Volume
    i0: Volume
    c: Volume
    rss: Volume
    fitted: Volume
    converged: Volume
    clamped: Volume

    @property
    def valid(self) -> np.ndarray:
        """Voxels usable for statistics: fitted, converged and not clamped."""
        return (self.fitted.data.astype(bool) & self.converged.data.astype(bool)
                & ~self.clamped.data.astype(bool))


def fit_map(series: DynamicSeries, region, cfg: FitConfig | None = None) -> T1rhoMap:
    """Fit every voxel of ``region`` (boolean array or Volume) independently."""
    cfg = cfg or FitConfig()
    grid = series.grid
    region = np.asarray(region.data if isinstance(region, Volume) else region).astype(bool)
    if region.shape != grid.dims:
        raise ValueError(f"region shape {region.shape} does not match series grid {grid.dims}")
    tsl, data = series.stack(ascending=True)
    idx = np.flatnonzero(region.ravel())
    y = data.reshape(len(tsl), -1)[:, idx].T

    shape = grid.dims
    vols = {k: np.zeros(int(np.prod(shape))) for k in ("t1rho", "i0", "c", "rss")}
    flags = {k: np.zeros(int(np.prod(shape)), dtype=np.uint8) for k in ("fitted", "converged", "clamped")}
    if idx.size:
        r = fit_voxels(y, tsl, cfg)
        ok = ~r["below_floor"]
        for k in vols:
            vols[k][idx] = r[k]
        flags["fitted"][idx] = ok
        flags["converged"][idx] = r["converged"] & ok
        flags["clamped"][idx] = r["clamped"] & ok
    wrap = {k: grid.with_data(v.reshape(shape)) for k, v in {**vols, **flags}.items()}
    return T1rhoMap(**wrap)


@dataclass(frozen=True)
class RegionStats:
    region_code: int
    region_name: str
    n: int
    excluded_n: int
    mean_ms: float | None = None
    sd_ms: float | None = None
    median_ms: float | None = None
    min_ms: float | None = None
    max_ms: float | None = None


def _stats_row(code, values, excluded):
    name = REGION_NAMES[code]
    if values.size == 0:
        return RegionStats(code, name, 0, int(excluded))
    sd = float(np.std(values, ddof=1)) if values.size > 1 else None
    return RegionStats(
        code, name, int(values.size), int(excluded),
        mean_ms=float(np.mean(values)), sd_ms=sd, median_ms=float(np.median(values)),
        min_ms=float(np.min(values)), max_ms=float(np.max(values)),
    )


def region_stats(tmap: T1rhoMap, subregions) -> list[RegionStats]:
    """Per-subregion (codes 1-20) and per-compartment (21 FC, 22 MTC, 23 LTC) statistics.

    Only fitted, converged and unclamped voxels enter the statistics; the
    rest of each region is counted in ``excluded_n``.
    """
    labels = np.asarray(subregions.data if hasattr(subregions, "data") else subregions)
    if labels.shape != tmap.t1rho.dims:
        raise ValueError("subregion volume and T1rho map must share a grid")
    valid = tmap.valid
    t1 = tmap.t1rho.data
    rows = []
    for code in SUBREGION_NAMES:
        sel = labels == code
        vals = t1[sel & valid]
        rows.append(_stats_row(code, vals, np.count_nonzero(sel) - vals.size))
    for code, (_, members) in COMPARTMENT_ROWS.items():
        sel = np.isin(labels, members)
        vals = t1[sel & valid]
        rows.append(_stats_row(code, vals, np.count_nonzero(sel) - vals.size))
    return rows


STATS_COLUMNS = ("region_code", "region_name", "n", "excluded_n", "mean_ms", "sd_ms",
                 "median_ms", "min_ms", "max_ms")


def fmt(v) -> str:
    """Six-significant-digit text form used by every report."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return ""
        return f"{float(v):.6g}"
    return str(v)


def round6(v):
    """Round a float to six significant digits for JSON output."""
    if isinstance(v, (float, np.floating)):
        return float(f"{float(v):.6g}") if np.isfinite(v) else None
    return v


def stats_to_csv(rows: list[RegionStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    for r in rows:
        d = asdict(r)
        w.writerow([fmt(d[c]) for c in STATS_COLUMNS])
    return buf.getvalue()


def stats_to_json(rows: list[RegionStats]) -> str:
    data = [{k: round6(v) for k, v in asdict(r).items()} for r in rows]
    return json.dumps(data, indent=2, sort_keys=False) + "\n"
