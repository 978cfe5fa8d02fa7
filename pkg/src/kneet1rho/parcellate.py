"""Rule-based parcellation of femoral and tibial cartilage into 20 subregions.

All rules work on world coordinates (mm) of a RAS+ standardised mask:
x points right, y anterior, z superior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .labels import FC, FEMORAL_CODES, LTC, MTC, SUBREGION_COMPARTMENT, SUBREGION_NAMES, TIBIAL_CODES
from .nifti import LabelVolume
from .standardize import is_ras
from .volume import Volume

__all__ = [
    "ParcellationError",
    "ParcellationConfig",
    "ParcellationLandmarks",
    "compute_landmarks",
    "parcellate_femoral",
    "parcellate_tibial",
    "parcellate",
    "partition_errors",
    "codebook_json",
]

_EPS = 1e-9


class ParcellationError(ValueError):
    pass


@dataclass(frozen=True)
class ParcellationConfig:
    shape_factor: float = 0.45
    strict: bool = True
    min_ml_separation_mm: float = 1.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "ParcellationConfig":
        return cls(**(d or {}))


@dataclass
class ParcellationLandmarks:
    mtc_centroid: np.ndarray | None
    ltc_centroid: np.ndarray | None
    ml_split_x: float
    medial_sign: int  # +1 when the medial compartment lies at x > ml_split_x
    # side -> (y_min, y_max) of that side's tibial compartment in mm
    tibial_ap_extent: dict = field(default_factory=dict)
    # compartment code -> ((cx, cy), (a, b)) in mm
    ellipses: dict = field(default_factory=dict)
    # side -> (y_low, y_high) fallback AP cut when a tibial compartment is missing
    fallback_ap: dict = field(default_factory=dict)

    def side_of(self, x) -> np.ndarray:
        """True for points on the medial side of the split."""
        x = np.asarray(x, dtype=np.float64)
        return np.sign(x - self.ml_split_x) == self.medial_sign

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (tuple, list)):
                return [clean(x) for x in v]
            if isinstance(v, np.generic):
                return v.item()
            return v
        return clean(self.__dict__)


def _points(mask: LabelVolume | Volume, code: int) -> np.ndarray:
    vol = mask.volume if isinstance(mask, LabelVolume) else mask
    sel = np.asarray(vol.data) == code
    idx = np.argwhere(sel).astype(np.float64)
    return idx @ vol.affine[:3, :3].T + vol.affine[:3, 3]


def _require_ras(vol: Volume):
    if not is_ras(vol.affine):
        raise ParcellationError("mask is not RAS+ oriented; standardise it first")


def compute_landmarks(mask: LabelVolume, cfg: ParcellationConfig | None = None) -> ParcellationLandmarks:
    """Tibial centroids, medial/lateral split and per-compartment ellipses."""
    cfg = cfg or ParcellationConfig()
    _require_ras(mask.volume)
    fc = _points(mask, FC)
    if fc.shape[0] == 0:
        raise ParcellationError("empty compartment FC")
    tib = {MTC: _points(mask, MTC), LTC: _points(mask, LTC)}
    names = {MTC: "MTC", LTC: "LTC"}
    missing = [code for code, pts in tib.items() if pts.shape[0] == 0]
    if missing and (cfg.strict or len(missing) == 2):
        raise ParcellationError("empty compartment " + ", ".join(names[c] for c in missing))

    centroids = {code: (pts.mean(axis=0) if pts.shape[0] else None) for code, pts in tib.items()}
    fallback = {}
    if not missing:
        mx, lx = centroids[MTC][0], centroids[LTC][0]
        if abs(mx - lx) < cfg.min_ml_separation_mm:
            raise ParcellationError("cannot separate medial/lateral: tibial centroids coincide in x")
        split = 0.5 * (mx + lx)
        medial_sign = 1 if mx > split else -1
    else:
        # lenient mode: split at the FC mid-range, orient by the compartment that exists
        present = MTC if LTC in missing else LTC
        split = 0.5 * (fc[:, 0].min() + fc[:, 0].max())
        side_sign = 1 if centroids[present][0] > split else -1
        if abs(centroids[present][0] - split) < _EPS:
            raise ParcellationError("cannot separate medial/lateral: tibial centroid on the FC midline")
        medial_sign = side_sign if present == MTC else -side_sign

    lm = ParcellationLandmarks(centroids[MTC], centroids[LTC], float(split), medial_sign)
    for code, pts in tib.items():
        side = "medial" if code == MTC else "lateral"
        if pts.shape[0] == 0:
            side_fc = fc[lm.side_of(fc[:, 0]) == (side == "medial")]
            if side_fc.shape[0] == 0:
                raise ParcellationError(f"no FC voxels on the {side} side")
            lo, hi = np.percentile(side_fc[:, 1], [30.0, 70.0])
            fallback[side] = (float(lo), float(hi))
            continue
        lm.tibial_ap_extent[side] = (float(pts[:, 1].min()), float(pts[:, 1].max()))
        half_x = 0.5 * (pts[:, 0].max() - pts[:, 0].min())
        half_y = 0.5 * (pts[:, 1].max() - pts[:, 1].min())
        centre = (float(centroids[code][0]), float(centroids[code][1]))
        lm.ellipses[code] = (centre, (cfg.shape_factor * half_x, cfg.shape_factor * half_y))
    lm.fallback_ap = fallback
    return lm


def _thirds(x: np.ndarray) -> np.ndarray:
    """Equal-width band index 0..2 over the range of ``x``; exact boundaries go to the lower band."""
    lo, hi = float(x.min()), float(x.max())
    width = (hi - lo) / 3.0
    if width <= 0:
        return np.ones(x.shape, dtype=int)
    k = np.ceil((x - lo) / width - _EPS).astype(int) - 1
    return np.clip(k, 0, 2)


def parcellate_femoral(fc: np.ndarray, lm: ParcellationLandmarks, require_central: bool = False) -> np.ndarray:
    """Subregion codes 1-10 for femoral cartilage points (N, 3) in world mm.

    A side whose FC lies entirely outside its tibial AP extent only receives
    anterior/posterior codes, unless ``require_central`` makes that an error.
    """
    fc = np.asarray(fc, dtype=np.float64).reshape(-1, 3)
    codes = np.zeros(fc.shape[0], dtype=np.uint8)
    medial = lm.side_of(fc[:, 0])
    for side, on_side in (("medial", medial), ("lateral", ~medial)):
        idx = np.flatnonzero(on_side)
        if idx.size == 0:
            continue
        a, ec, cc, ic, p = FEMORAL_CODES[side]
        y = fc[idx, 1]
        if side in lm.tibial_ap_extent:
            y_min, y_max = lm.tibial_ap_extent[side]
        else:
            y_min, y_max = lm.fallback_ap[side]
        post = y < y_min
        ant = y > y_max
        central = ~post & ~ant
        codes[idx[post]] = p
        codes[idx[ant]] = a
        if not central.any():
            if require_central:
                raise ParcellationError(f"tibial coverage does not intersect FC ({side} side)")
            continue
        cidx = idx[central]
        band = _thirds(fc[cidx, 0])
        # band 0 has the lowest x; it is exterior when this side lies at lower x than the split
        side_sign = lm.medial_sign if side == "medial" else -lm.medial_sign
        side_below = side_sign < 0
        order = (ec, cc, ic) if side_below else (ic, cc, ec)
        codes[cidx] = np.asarray(order, dtype=np.uint8)[band]
    return codes


def parcellate_tibial(tc: np.ndarray, compartment: int, lm: ParcellationLandmarks) -> np.ndarray:
    """Subregion codes for one tibial compartment's points (N, 3) in world mm."""
    tc = np.asarray(tc, dtype=np.float64).reshape(-1, 3)
    if tc.shape[0] == 0:
        raise ParcellationError("empty tibial compartment")
    if compartment not in lm.ellipses:
        raise ParcellationError(f"no landmarks for compartment {compartment}")
    a_code, e_code, p_code, i_code, c_code = TIBIAL_CODES[compartment]
    (cx, cy), (sa, sb) = lm.ellipses[compartment]
    dx = tc[:, 0] - cx
    dy = tc[:, 1] - cy
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx == 0, 0.0, (dx / sa) ** 2) if sa > 0 else np.where(dx == 0, 0.0, np.inf)
        ty = np.where(dy == 0, 0.0, (dy / sb) ** 2) if sb > 0 else np.where(dy == 0, 0.0, np.inf)
    central = tx + ty <= 1.0
    toward_split = np.sign(lm.ml_split_x - cx)
    codes = np.empty(tc.shape[0], dtype=np.uint8)
    ant = (dy > 0) & (np.abs(dx) <= dy)
    post = (dy < 0) & (np.abs(dx) <= -dy)
    interior = np.sign(dx) == toward_split
    codes[:] = e_code
    codes[interior] = i_code
    codes[ant] = a_code
    codes[post] = p_code
    codes[central] = c_code
    return codes


def parcellate(mask: LabelVolume, cfg: ParcellationConfig | None = None) -> Volume:
    """Subregion volume (codes 1-20, 0 elsewhere) on the mask grid.

    Patellar cartilage is left unlabelled.
    """
    cfg = cfg or ParcellationConfig()
    # rules only depend on relative positions; dropping the translation keeps
    # tie-breaks exactly invariant to where the grid sits in world space
    local = np.array(mask.volume.affine, dtype=np.float64)
    local[:3, 3] = 0.0
    vol = Volume(mask.volume.data, local)
    lm = compute_landmarks(LabelVolume(vol), cfg)
    out = np.zeros(vol.dims, dtype=np.uint8)

    def world(sel):
        idx = np.argwhere(sel).astype(np.float64)
        return idx @ vol.affine[:3, :3].T + vol.affine[:3, 3]

    sel = vol.data == FC
    out[sel] = parcellate_femoral(world(sel), lm, require_central=cfg.strict)
    for code in (MTC, LTC):
        sel = vol.data == code
        if sel.any():
            out[sel] = parcellate_tibial(world(sel), code, lm)
    return Volume(out, mask.volume.affine)


def partition_errors(mask: LabelVolume | Volume, subregions: Volume) -> list[str]:
    """Violations of the partition property; empty when the parcellation is exact."""
    m = np.asarray(mask.data)
    s = np.asarray(subregions.data)
    problems = []
    if m.shape != s.shape:
        return [f"grid mismatch {m.shape} vs {s.shape}"]
    bad = set(np.unique(s).tolist()) - set(SUBREGION_NAMES) - {0}
    if bad:
        problems.append(f"unknown subregion codes {sorted(bad)}")
    for comp, name in ((FC, "FC"), (MTC, "MTC"), (LTC, "LTC")):
        members = [c for c, k in SUBREGION_COMPARTMENT.items() if k == comp]
        union = np.isin(s, members)
        if not np.array_equal(union, m == comp):
            problems.append(f"{name}: subregion union differs from compartment "
                            f"({np.count_nonzero(union ^ (m == comp))} voxels)")
    return problems


def codebook_json() -> str:
    """Code-to-name sidecar for subregion volumes."""
    return json.dumps({str(k): v for k, v in SUBREGION_NAMES.items()}, indent=2) + "\n"
