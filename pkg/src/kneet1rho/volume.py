"""Volumetric data model, affine geometry and resampling.

Arrays are indexed ``data[i, j, k]`` with ``i`` along the first voxel axis.
On disk (NIfTI) the first axis varies fastest, which is what
``data.ravel(order="F")`` produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "DynamicSeries",
    "RigidTransform",
    "rotation_matrix",
    "resample",
    "mean_series",
    "world_from_voxel",
    "voxel_from_world",
    "voxel_world_coords",
]

_SPACING_RTOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar grid with a voxel-to-world affine (mm).

    Parameters
    ----------
    data : array_like, shape (nx, ny, nz)
        Voxel values. Integer dtypes are kept as-is, anything else is stored
        as float64.
    affine : array_like, shape (4, 4)
        Maps homogeneous voxel indices to world millimetres.
    """

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {data.shape}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not (np.issubdtype(data.dtype, np.integer)):
            data = data.astype(np.float64)
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        if not np.all(np.isfinite(affine)):
            raise ValueError("affine contains non-finite values")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine rotation/zoom block is singular")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        """Voxel size in mm, the column norms of the affine's 3x3 block."""
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def is_integer(self) -> bool:
        return bool(np.issubdtype(self.data.dtype, np.integer))

    def with_data(self, data) -> "Volume":
        """Same grid, new voxel values."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ValueError(f"shape {data.shape} does not match grid {self.dims}")
        return Volume(data, self.affine)

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.array_equal(self.affine, other.affine)

    @classmethod
    def from_spacing(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        """Axis-aligned volume with ``diag(spacing)`` and the given origin."""
        affine = np.diag([*map(float, spacing), 1.0])
        affine[:3, 3] = origin
        return cls(data, affine)


@dataclass(frozen=True, eq=False)
class DynamicSeries:
    """Spin-lock-prepared frames sharing one grid.

    ``frames`` are kept in the order given; ``acquisition_order[i]`` is the
    position at which ``frames[i]`` was acquired.
    """

    tsl: tuple
    frames: tuple
    acquisition_order: tuple = field(default=None)

    def __post_init__(self):
        tsl = tuple(float(t) for t in self.tsl)
        frames = tuple(self.frames)
        if len(frames) == 0:
            raise ValueError("series has no frames")
        if len(tsl) != len(frames):
            raise ValueError(f"{len(tsl)} tsl values for {len(frames)} frames")
        if len(frames) < 2:
            raise ValueError("series needs at least 2 frames")
        if len(set(tsl)) != len(tsl):
            raise ValueError(f"tsl values must be distinct, got {tsl}")
        if min(tsl) < 0 or not all(np.isfinite(tsl)):
            raise ValueError(f"tsl values must be finite and >= 0, got {tsl}")
        first = frames[0]
        for f in frames[1:]:
            if not first.same_grid(f):
                raise ValueError("all frames must share dims and affine")
        order = self.acquisition_order
        if order is None:
            order = tuple(range(len(frames)))
        order = tuple(int(i) for i in order)
        if sorted(order) != list(range(len(frames))):
            raise ValueError(f"acquisition_order {order} is not a permutation")
        object.__setattr__(self, "tsl", tsl)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "acquisition_order", order)

    @property
    def grid(self) -> Volume:
        return self.frames[0]

    def __len__(self):
        return len(self.frames)

    def stack(self, ascending: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(tsl, data)`` with data shaped (n_frames, nx, ny, nz).

        With ``ascending`` the frames are sorted by tsl.
        """
        idx = np.argsort(self.tsl, kind="stable") if ascending else np.arange(len(self))
        tsl = np.asarray(self.tsl)[idx]
        data = np.stack([np.asarray(self.frames[i].data, dtype=np.float64) for i in idx])
        return tsl, data

    def map_frames(self, func) -> "DynamicSeries":
        return DynamicSeries(self.tsl, [func(f) for f in self.frames], self.acquisition_order)


def rotation_matrix(rotations_deg: Sequence[float]) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for rotations (degrees) about world x, y, z."""
    ax, ay, az = np.deg2rad(np.asarray(rotations_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class RigidTransform:
    """Six-parameter rigid transform about the world origin.

    ``rotations`` are degrees about world x, y, z (applied x first, then y,
    then z); ``translation`` is in mm and applied after the rotation.
    """

    rotations: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(v) for v in self.rotations)
        tr = tuple(float(v) for v in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise ValueError("rigid transform needs 3 rotations and 3 translations")
        if not all(np.isfinite(rot + tr)):
            raise ValueError(f"non-finite transform parameters: {rot}, {tr}")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = rotation_matrix(self.rotations)
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Recover parameters from a 4x4 rigid matrix (``Rz Ry Rx`` order)."""
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        sy = -r[2, 0]
        ay = np.arcsin(np.clip(sy, -1.0, 1.0))
        if abs(sy) < 1 - 1e-12:
            ax = np.arctan2(r[2, 1], r[2, 2])
            az = np.arctan2(r[1, 0], r[0, 0])
        else:
            # gimbal lock, fold everything into z
            ax = 0.0
            az = np.arctan2(-r[0, 1], r[1, 1])
        return cls(tuple(np.rad2deg([ax, ay, az])), tuple(m[:3, 3]))

    def inverse(self) -> "RigidTransform":
        return RigidTransform.from_matrix(np.linalg.inv(self.matrix))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` applied after ``other``."""
        return RigidTransform.from_matrix(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ rotation_matrix(self.rotations).T + np.asarray(self.translation)


def world_from_voxel(v: Volume, index) -> np.ndarray:
    """World position (mm) of an integer voxel index."""
    idx = np.asarray(index)
    if idx.shape != (3,) or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"index must be 3 integers, got {index!r}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(v.dims)):
        raise IndexError(f"index {tuple(idx)} outside dims {v.dims}")
    return v.affine[:3, :3] @ idx + v.affine[:3, 3]


def voxel_from_world(v: Volume, points) -> np.ndarray:
    """Continuous voxel coordinates of world points, shape (..., 3)."""
    inv = np.linalg.inv(v.affine)
    pts = np.asarray(points, dtype=np.float64)
    return pts @ inv[:3, :3].T + inv[:3, 3]


def voxel_world_coords(v: Volume) -> np.ndarray:
    """World coordinates of every voxel centre, shape (nx, ny, nz, 3)."""
    idx = np.indices(v.dims, dtype=np.float64)
    idx = np.moveaxis(idx, 0, -1)
    return idx @ v.affine[:3, :3].T + v.affine[:3, 3]


def _sample(data: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    # coords: (3, N) continuous voxel coordinates in ``data``
    data = np.asarray(data, dtype=np.float64)
    if order == 1:
        return ndimage.map_coordinates(data, coords, order=1, mode="constant", cval=0.0, prefilter=False)
    # nearest neighbour: every voxel owns its half-voxel neighbourhood, edges included
    out = ndimage.map_coordinates(data, coords, order=0, mode="nearest", prefilter=False)
    shape = np.asarray(data.shape)[:, None]
    outside = np.any((coords < -0.5) | (coords > shape - 0.5), axis=0)
    out[outside] = 0.0
    return out


def resample(
    moving: Volume,
    target_grid: Volume,
    transform: RigidTransform | None = None,
    interpolation: str = "trilinear",
) -> Volume:
    """Resample ``moving`` onto the grid of ``target_grid``.

    Each output voxel centre ``p`` (target world, mm) is sampled from
    ``moving`` at the world position ``transform(p)``; the transform is a pull
    mapping from the target frame into the moving frame. Samples falling
    outside ``moving`` are 0.

    Integer-typed volumes only accept ``interpolation="nearest"`` and keep
    their dtype.
    """
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if moving.is_integer and interpolation != "nearest":
        raise ValueError("integer (label) volumes must be resampled with nearest neighbour")
    transform = transform or RigidTransform.identity()
    order = 1 if interpolation == "trilinear" else 0

    # target index -> target world -> moving world -> moving index
    m = np.linalg.inv(moving.affine) @ transform.matrix @ target_grid.affine
    if np.allclose(m, np.eye(4), rtol=0, atol=1e-12) and moving.dims == target_grid.dims:
        return Volume(moving.data, target_grid.affine)

    idx = np.indices(target_grid.dims, dtype=np.float64).reshape(3, -1)
    coords = m[:3, :3] @ idx + m[:3, 3:4]
    out = _sample(moving.data, coords, order).reshape(target_grid.dims)
    if moving.is_integer:
        out = np.rint(out).astype(moving.data.dtype)
    return Volume(out, target_grid.affine)


def mean_series(series: DynamicSeries) -> Volume:
    """Voxelwise arithmetic mean of all frames."""
    if len(series.frames) == 0:
        raise ValueError("cannot average an empty series")
    # fixed summation order (sorted by tsl) keeps the result independent of frame order
    _, data = series.stack(ascending=True)
    return series.grid.with_data(data.mean(axis=0))
