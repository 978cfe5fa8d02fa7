"""Reorientation to RAS+ and rigid registration to a reference image."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numba
import numpy as np
from scipy import ndimage

from .nifti import LabelVolume
from .volume import (
    DynamicSeries,
    RigidTransform,
    Volume,
    mean_series,
    resample,
    rotation_matrix,
)

__all__ = [
    "OrientationError",
    "RegistrationError",
    "OrientationOps",
    "RegistrationConfig",
    "RegistrationResult",
    "StandardizationResult",
    "dominant_axes",
    "is_ras",
    "canonical_orientation",
    "apply_orientation",
    "invert_orientation",
    "golden_section",
    "register",
    "rigid_register",
    "standardize_case",
]

log = logging.getLogger(__name__)

_TIE = 1e-12
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class OrientationError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


def dominant_axes(affine) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """World axis and sign each array axis points along.

    Returns ``(world_axis, sign)`` per array axis. A column whose largest
    direction cosines tie picks the lowest world axis not already claimed,
    array axes taking their pick in index order.
    """
    r = np.asarray(affine, dtype=np.float64)[:3, :3]
    r = r / np.linalg.norm(r, axis=0)
    mags = np.abs(r)
    candidates = []
    for i in range(3):
        col = mags[:, i]
        candidates.append([w for w in range(3) if col.max() - col[w] <= _TIE])
    unique = {c[0] for c in candidates if len(c) == 1}
    chosen = []
    for i in range(3):
        options = [w for w in candidates[i] if w not in chosen]
        if len(candidates[i]) > 1:
            options = [w for w in options if w not in unique] or options
        if not options:
            raise OrientationError(
                f"array axis {i} has the same dominant world axis as another axis (degenerate oblique)")
        chosen.append(options[0])
    if sorted(chosen) != [0, 1, 2]:
        raise OrientationError("two affine columns share one dominant world axis (degenerate oblique)")
    signs = tuple(1 if r[w, i] > 0 else -1 for i, w in enumerate(chosen))
    return tuple(chosen), signs


def is_ras(affine) -> bool:
    """True when array axes 0, 1, 2 point (mostly) along +x, +y, +z."""
    try:
        axes, signs = dominant_axes(affine)
    except OrientationError:
        return False
    return axes == (0, 1, 2) and signs == (1, 1, 1)


@dataclass(frozen=True)
class OrientationOps:
    """Reorientation as an axis permutation followed by flips.

    Output axis ``j`` is input axis ``perm[j]``, reversed when ``flips[j]``.
    """

    perm: tuple = (0, 1, 2)
    flips: tuple = (False, False, False)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)

    def to_dict(self) -> dict:
        return {"perm": list(self.perm), "flips": list(self.flips)}


def _orientation_ops(affine) -> OrientationOps:
    axes, signs = dominant_axes(affine)
    perm = [0, 0, 0]
    flips = [False, False, False]
    for i, (w, s) in enumerate(zip(axes, signs)):
        perm[w] = i
        flips[w] = s < 0
    return OrientationOps(tuple(perm), tuple(flips))


def apply_orientation(v: Volume, ops: OrientationOps) -> Volume:
    """Permute/flip the array of ``v`` and update the affine so world positions are kept."""
    if ops.is_identity:
        return v
    data = np.transpose(v.data, ops.perm)
    new_dims = data.shape
    # new index -> old index
    m = np.zeros((4, 4))
    m[3, 3] = 1.0
    for j, i in enumerate(ops.perm):
        if ops.flips[j]:
            m[i, j] = -1.0
            m[i, 3] = new_dims[j] - 1
        else:
            m[i, j] = 1.0
    flip_axes = tuple(j for j in range(3) if ops.flips[j])
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    return Volume(np.ascontiguousarray(data), v.affine @ m)


def invert_orientation(v: Volume, ops: OrientationOps) -> Volume:
    """Undo :func:`apply_orientation`."""
    if ops.is_identity:
        return v
    flip_axes = tuple(j for j in range(3) if ops.flips[j])
    data = np.flip(v.data, axis=flip_axes) if flip_axes else v.data
    inv_perm = tuple(int(k) for k in np.argsort(ops.perm))
    old = np.transpose(data, inv_perm)
    # rebuild the original affine from the reoriented one
    m = np.zeros((4, 4))
    m[3, 3] = 1.0
    for j, i in enumerate(ops.perm):
        if ops.flips[j]:
            m[i, j] = -1.0
            m[i, 3] = v.dims[j] - 1
        else:
            m[i, j] = 1.0
    return Volume(np.ascontiguousarray(old), v.affine @ np.linalg.inv(m))


def canonical_orientation(v: Volume) -> tuple[Volume, OrientationOps]:
    """Reorder and flip voxel axes so the affine is closest to positive diagonal (RAS+)."""
    ops = _orientation_ops(v.affine)
    return apply_orientation(v, ops), ops


@dataclass(frozen=True)
class RegistrationConfig:
    pyramid_levels: int = 3
    max_iters_per_level: int = 6
    rot_bound_deg: float = 30.0
    trans_bound_mm: float = 40.0
    tol_deg: float = 0.02
    tol_mm: float = 0.02
    initial_step_deg: float = 20.0
    initial_step_mm: float = 10.0
    min_overlap: float = 0.10
    # Gaussian sigma at the finest level, in units of the finest reference spacing
    final_smoothing: float = 0.5
    reference_path: str | None = None

    @classmethod
    def from_dict(cls, d: dict | None) -> "RegistrationConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**d)


def golden_section(f, a: float, b: float, tol: float):
    """Minimise a scalar function on ``[a, b]`` by golden-section search.

    Returns ``(x, f(x))`` for the best point evaluated.
    """
    a, b = min(a, b), max(a, b)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _center_of_mass(v: Volume) -> np.ndarray:
    data = np.clip(np.asarray(v.data, dtype=np.float64), 0, None)
    total = data.sum()
    if total <= 0:
        idx = (np.asarray(v.dims) - 1) / 2.0
    else:
        idx = np.asarray(ndimage.center_of_mass(data))
    return v.affine[:3, :3] @ idx + v.affine[:3, 3]


def _smooth(data, sigma_vox):
    if max(sigma_vox) <= 0:
        return np.asarray(data, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(data, dtype=np.float64), sigma_vox, mode="constant")


@numba.njit(cache=True, nogil=True)
def _mse_kernel(moving, ref, m):
    """Squared differences over reference voxels mapping inside ``moving``.

    ``m`` (3x4) maps reference voxel indices to moving voxel indices; sampling
    is trilinear. Returns ``(sum, used, inside)``: ``inside`` counts samples
    within the moving grid, ``used`` those entering the sum. Cells touching an
    exactly-zero moving voxel are treated as padding and skipped.
    """
    nx, ny, nz = moving.shape
    ux, uy, uz = nx - 1.0, ny - 1.0, nz - 1.0
    total = 0.0
    count = 0
    inside = 0
    for i in range(ref.shape[0]):
        for j in range(ref.shape[1]):
            bx = m[0, 0] * i + m[0, 1] * j + m[0, 3]
            by = m[1, 0] * i + m[1, 1] * j + m[1, 3]
            bz = m[2, 0] * i + m[2, 1] * j + m[2, 3]
            for k in range(ref.shape[2]):
                x = bx + m[0, 2] * k
                y = by + m[1, 2] * k
                z = bz + m[2, 2] * k
                if x < 0.0 or y < 0.0 or z < 0.0 or x > ux or y > uy or z > uz:
                    continue
                x0 = min(int(x), nx - 2) if nx > 1 else 0
                y0 = min(int(y), ny - 2) if ny > 1 else 0
                z0 = min(int(z), nz - 2) if nz > 1 else 0
                fx, fy, fz = x - x0, y - y0, z - z0
                x1 = x0 + 1 if nx > 1 else 0
                y1 = y0 + 1 if ny > 1 else 0
                z1 = z0 + 1 if nz > 1 else 0
                inside += 1
                v000, v100 = moving[x0, y0, z0], moving[x1, y0, z0]
                v010, v110 = moving[x0, y1, z0], moving[x1, y1, z0]
                v001, v101 = moving[x0, y0, z1], moving[x1, y0, z1]
                v011, v111 = moving[x0, y1, z1], moving[x1, y1, z1]
                if (v000 == 0.0 or v100 == 0.0 or v010 == 0.0 or v110 == 0.0
                        or v001 == 0.0 or v101 == 0.0 or v011 == 0.0 or v111 == 0.0):
                    continue
                c00 = v000 * (1 - fx) + v100 * fx
                c10 = v010 * (1 - fx) + v110 * fx
                c01 = v001 * (1 - fx) + v101 * fx
                c11 = v011 * (1 - fx) + v111 * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                d = c0 * (1 - fz) + c1 * fz - ref[i, j, k]
                total += d * d
                count += 1
    return total, count, inside


class _Metric:
    """Mean squared intensity difference at one pyramid level."""

    def __init__(self, moving: Volume, reference: Volume, factor: int, centre, min_overlap,
                 final_smoothing: float = 0.0):
        ref_sp = reference.spacing
        if factor > 1:
            sigma_ref = [0.5 * (factor - 1)] * 3
            sigma_mm = 0.5 * (factor - 1) * ref_sp.mean()
        else:
            sigma_mm = final_smoothing * ref_sp.min()
            sigma_ref = [sigma_mm / s for s in ref_sp]
        ref = _smooth(reference.data, sigma_ref)[::factor, ::factor, ::factor]
        aff = reference.affine.copy()
        aff[:3, :3] = aff[:3, :3] * factor
        sigma_mov = [sigma_mm / s for s in moving.spacing]
        raw = np.asarray(moving.data)
        # smoothing must not turn zero padding into data
        self.moving = np.ascontiguousarray(np.where(raw == 0, 0.0, _smooth(raw, sigma_mov)))
        self.ref = np.ascontiguousarray(ref)
        self.size = ref.size
        # reference voxel index -> centred world coordinates
        self.ref_index = aff.copy()
        self.ref_index[:3, 3] -= centre
        self.centre = centre
        self.inv_moving = np.linalg.inv(moving.affine)
        self.min_overlap = min_overlap
        self.evaluations = 0

    def matrix(self, params, offset):
        # params are (rx, ry, rz, tx, ty, tz) about ``centre``; offset is the centring shift
        r = rotation_matrix(params[:3])
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = self.centre + offset + params[3:]
        return m

    def _index_map(self, params, offset):
        return np.ascontiguousarray((self.inv_moving @ self.matrix(params, offset) @ self.ref_index)[:3])

    def overlap(self, params, offset) -> float:
        _, _, inside = _mse_kernel(self.moving, self.ref, self._index_map(params, offset))
        return inside / self.size

    def __call__(self, params, offset) -> float:
        self.evaluations += 1
        total, used, inside = _mse_kernel(self.moving, self.ref, self._index_map(params, offset))
        if used == 0 or inside / self.size < self.min_overlap:
            return math.inf
        return total / used


@dataclass
class RegistrationResult:
    transform: RigidTransform
    cost: float
    levels: list = field(default_factory=list)  # per level: factor, initial/final cost, evaluations


def register(moving: Volume, reference: Volume, config: RegistrationConfig | None = None) -> RegistrationResult:
    """Rigid registration by coordinate descent with golden-section line searches.

    The returned transform maps reference-world points to moving-world
    points, i.e. it is the pull transform :func:`resample` expects to bring
    ``moving`` onto the reference grid.
    """
    cfg = config or RegistrationConfig()
    centre = _center_of_mass(reference)
    offset = _center_of_mass(moving) - centre
    bounds = np.array([cfg.rot_bound_deg] * 3 + [cfg.trans_bound_mm] * 3)
    tols = np.array([cfg.tol_deg] * 3 + [cfg.tol_mm] * 3)
    params = np.zeros(6)

    levels = []
    for level in reversed(range(cfg.pyramid_levels)):
        factor = 2 ** level
        metric = _Metric(moving, reference, factor, centre, cfg.min_overlap, cfg.final_smoothing)
        if metric.overlap(params, offset) < cfg.min_overlap:
            raise RegistrationError("insufficient overlap between moving and reference fields of view")
        scale = 2.0 ** -(cfg.pyramid_levels - 1 - level)
        steps = np.array([cfg.initial_step_deg] * 3 + [cfg.initial_step_mm] * 3) * scale
        # the finest level only refines
        level_tols = tols * factor
        cost = metric(params, offset)
        start_cost = cost
        for _ in range(cfg.max_iters_per_level):
            before = params.copy()
            for j in range(6):
                lo = max(params[j] - steps[j], -bounds[j])
                hi = min(params[j] + steps[j], bounds[j])

                def line(x, j=j):
                    p = params.copy()
                    p[j] = x
                    return metric(p, offset)

                x, fx = golden_section(line, lo, hi, level_tols[j])
                if fx < cost:
                    params[j] = x
                    cost = fx
            moved = np.abs(params - before)
            if np.all(moved < level_tols):
                break
            steps = np.maximum(np.maximum(0.5 * steps, 3.0 * moved), 4.0 * level_tols)
        levels.append({"factor": factor, "initial_cost": start_cost, "final_cost": cost,
                       "evaluations": metric.evaluations})
        log.debug("level %d: cost %.6g -> %.6g, params %s", factor, start_cost, cost, params)

    # metric points are centred; fold the centring back into the world transform
    uncentre = np.eye(4)
    uncentre[:3, 3] = -centre
    m = metric.matrix(params, offset) @ uncentre
    return RegistrationResult(RigidTransform.from_matrix(m), cost, levels)


def rigid_register(moving: Volume, reference: Volume, config: RegistrationConfig | None = None) -> RigidTransform:
    """Rigid transform aligning ``moving`` to ``reference`` (see :func:`register`)."""
    return register(moving, reference, config).transform


@dataclass(frozen=True, eq=False)
class StandardizationResult:
    series: DynamicSeries
    mask: LabelVolume | None
    orientation_ops: OrientationOps
    rigid: RigidTransform
    registration: RegistrationResult | None = None
    extra_masks: tuple = ()


def standardize_case(
    series: DynamicSeries,
    mask: LabelVolume | None,
    reference: Volume,
    config: RegistrationConfig | None = None,
    extra_masks=(),
) -> StandardizationResult:
    """Reorient a case to RAS+ and register it rigidly to ``reference``.

    The transform is estimated once on the mean image and applied to every
    frame (trilinear) and to the mask(s) (nearest neighbour). Outputs live on
    the canonically oriented reference grid.
    """
    grid = series.grid
    masks = ([mask] if mask is not None else []) + list(extra_masks)
    for m in masks:
        if not grid.same_grid(m.volume):
            raise ValueError("mask must share the series grid")

    canon_series_frames = []
    ops = None
    for f in series.frames:
        cf, ops = canonical_orientation(f)
        canon_series_frames.append(cf)
    canon = DynamicSeries(series.tsl, canon_series_frames, series.acquisition_order)
    canon_masks = [apply_orientation(m.volume, ops) for m in masks]
    ref, _ = canonical_orientation(reference)

    reg = register(mean_series(canon), ref, config)
    out = canon.map_frames(lambda f: resample(f, ref, reg.transform, "trilinear"))
    out_masks = [LabelVolume(resample(m, ref, reg.transform, "nearest")) for m in canon_masks]
    main = out_masks[0] if mask is not None else None
    extra = tuple(out_masks[1:] if mask is not None else out_masks)
    return StandardizationResult(out, main, ops, reg.transform, reg, extra)
