"""Synthetic knee phantom with known cartilage geometry and T1rho.

The object lives in its own RAS coordinates (mm): femoral cartilage is a
cylindrical shell around each condyle (axis along x), the tibial cartilage
two elliptical plates just below the joint line at z = 0, and the patellar
cartilage a shell segment in front of the trochlea. Bone and soft tissue
give the registration something to lock onto.

Every voxel is point-sampled at its centre, so cartilage voxels carry pure
cartilage signal. A misalignment moves the object in the scanner; the grid
stays put and the object is re-rasterised, so no interpolation is involved.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from .fitting import FitConfig
from .labels import COMPARTMENT_ROWS, FC, LTC, MTC, PC, SUBREGION_CODES, SUBREGION_NAMES
from .nifti import LabelVolume
from .parcellate import ParcellationConfig, parcellate
from .standardize import apply_orientation, canonical_orientation, invert_orientation
from .volume import DynamicSeries, RigidTransform, Volume, mean_series, voxel_world_coords

__all__ = [
    "KneeGeometry",
    "PhantomSpec",
    "PhantomCase",
    "PhantomError",
    "grid_affine",
    "rasterize",
    "generate",
    "reference_volume",
    "perturb_mask",
    "subject_spec",
    "DESK_GRID",
    "TABLE1_TSL",
]

# spin-lock times in scanning order
TABLE1_TSL = (0.0, 50.0, 30.0, 10.0)

BONE, SOFT = 10, 11

# isotropic 0.5 mm grid cropped to the knee; fine enough that subregion
# boundaries survive voxel quantisation (see the acceptance notes)
DESK_GRID = {"dims": (144, 160, 156), "spacing": (0.5, 0.5, 0.5), "fov_centre": (-1.0, 6.0, 10.0)}

_AXES = {"R": (0, 1), "L": (0, -1), "A": (1, 1), "P": (1, -1), "S": (2, 1), "I": (2, -1)}


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class KneeGeometry:
    """Object-space dimensions in mm, written for a right knee (medial at -x)."""

    condyle_radius: float = 20.0
    fc_thickness: float = 4.5
    joint_gap: float = 1.0
    medial_condyle_x: tuple = (-36.0, -6.0)
    lateral_condyle_x: tuple = (6.0, 34.0)
    fc_arc_deg: tuple = (-100.0, 100.0)
    trochlea_arc_deg: tuple = (65.0, 100.0)
    tibial_thickness: float = 4.0
    mtc_centre: tuple = (-21.0, 0.0)
    mtc_semi_axes: tuple = (12.0, 16.0)
    ltc_centre: tuple = (20.0, 0.0)
    ltc_semi_axes: tuple = (11.0, 15.0)
    tibia_half_size: tuple = (40.0, 26.0)
    pc_thickness: float = 3.5
    pc_arc_deg: tuple = (55.0, 95.0)
    pc_half_width: float = 14.0
    patella_thickness: float = 10.0
    leg_radius: float = 55.0

    def __post_init__(self):
        sizes = [self.condyle_radius, self.fc_thickness, self.joint_gap, self.tibial_thickness,
                 self.pc_thickness, self.pc_half_width, self.patella_thickness, self.leg_radius,
                 *self.mtc_semi_axes, *self.ltc_semi_axes, *self.tibia_half_size]
        if min(sizes) <= 0:
            raise PhantomError("all geometric sizes must be positive")

    @property
    def condyle_centre_z(self) -> float:
        return 0.5 * self.joint_gap + self.fc_thickness + self.condyle_radius


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (200, 200, 44)
    spacing: tuple = (0.8, 1.0, 3.0)
    # direction each array axis points to, e.g. "PSR" = posterior, superior, right
    axcodes: str = "PSR"
    fov_centre: tuple = (0.0, 0.0, 5.0)
    geometry: KneeGeometry = field(default_factory=KneeGeometry)
    side: str = "right"
    # a single value, or {subregion name or code: ms}; unspecified subregions use default_t1rho
    t1rho: object = 40.0
    default_t1rho: float = 40.0
    # T1rho change from the bone side to the articular surface (ms)
    depth_gradient_ms: float = 0.0
    pc_t1rho: float = 40.0
    i0: float = 1000.0
    c: float = 0.0
    bone: tuple = (200.0, 45.0)  # (i0, t1rho)
    soft_tissue: tuple = (450.0, 35.0)
    tsl: tuple = TABLE1_TSL
    noise: str = "none"
    sigma: float = 0.0
    seed: int = 0
    misalignment: RigidTransform = field(default_factory=RigidTransform)
    # full-thickness defects: list of (x, y, z, radius) spheres in object mm
    lesions: tuple = ()

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"bad dims {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomError(f"bad spacing {self.spacing}")
        codes = self.axcodes.upper()
        if len(codes) != 3 or sorted(_AXES[c][0] for c in codes if c in _AXES) != [0, 1, 2]:
            raise PhantomError(f"bad axcodes {self.axcodes!r}")
        if self.noise not in ("none", "gaussian", "rician"):
            raise PhantomError(f"unknown noise model {self.noise!r}")
        if self.sigma < 0:
            raise PhantomError("sigma must be >= 0")
        if self.side not in ("right", "left"):
            raise PhantomError(f"side must be 'right' or 'left', got {self.side!r}")
        values = list(self.subregion_t1rho().values()) + [self.pc_t1rho]
        bounds = FitConfig()
        if min(values) < bounds.t1rho_min or max(values) > bounds.t1rho_max:
            raise PhantomError(f"true T1rho values must lie within the fit bounds "
                               f"[{bounds.t1rho_min:g}, {bounds.t1rho_max:g}] ms")

    def subregion_t1rho(self) -> dict:
        """True base T1rho (ms) per subregion code."""
        if isinstance(self.t1rho, dict):
            table = {code: float(self.default_t1rho) for code in SUBREGION_NAMES}
            for key, val in self.t1rho.items():
                code = SUBREGION_CODES.get(key) if isinstance(key, str) and not key.isdigit() else int(key)
                if code not in SUBREGION_NAMES:
                    raise PhantomError(f"unknown subregion {key!r}")
                table[code] = float(val)
            return table
        return {code: float(self.t1rho) for code in SUBREGION_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["misalignment"] = {"rotations": list(self.misalignment.rotations),
                             "translation": list(self.misalignment.translation)}
        if isinstance(self.t1rho, dict):
            d["t1rho"] = {str(k): v for k, v in self.t1rho.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomError(f"unknown phantom spec keys: {sorted(unknown)}")
        if "geometry" in d and isinstance(d["geometry"], dict):
            d["geometry"] = KneeGeometry(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in d["geometry"].items()})
        if "misalignment" in d and isinstance(d["misalignment"], dict):
            d["misalignment"] = RigidTransform(**d["misalignment"])
        for key in ("dims", "spacing", "fov_centre", "bone", "soft_tissue", "tsl"):
            if key in d:
                d[key] = tuple(d[key])
        if "lesions" in d:
            d["lesions"] = tuple(tuple(x) for x in d["lesions"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def grid_affine(spec: PhantomSpec) -> np.ndarray:
    """Voxel-to-world affine of the phantom grid (centred on ``fov_centre``)."""
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for i, code in enumerate(spec.axcodes.upper()):
        w, s = _AXES[code]
        aff[w, i] = s * spec.spacing[i]
    centre_idx = (np.asarray(spec.dims, dtype=np.float64) - 1) / 2.0
    aff[:3, 3] = np.asarray(spec.fov_centre) - aff[:3, :3] @ centre_idx
    return aff


def _in_range(v, lo_hi):
    return (v >= lo_hi[0]) & (v <= lo_hi[1])


def rasterize(points: np.ndarray, geom: KneeGeometry, side: str = "right", lesions=()):
    """Tissue code and cartilage depth fraction at object-space points (N, 3).

    Depth is 0 at the bone interface and 1 at the articular surface.
    """
    x, y, z = (points[:, k] for k in range(3))
    if side == "left":
        x = -x
    g = geom
    zc = g.condyle_centre_z
    rz = z - zc
    r = np.hypot(y, rz)
    phi = np.degrees(np.arctan2(y, -rz))

    tissue = np.zeros(points.shape[0], dtype=np.uint8)
    depth = np.zeros(points.shape[0])

    leg = x * x + y * y <= g.leg_radius ** 2
    tissue[leg] = SOFT

    condyle_x = _in_range(x, g.medial_condyle_x) | _in_range(x, g.lateral_condyle_x)
    notch_x = (x > g.medial_condyle_x[1]) & (x < g.lateral_condyle_x[0])
    femur_x = _in_range(x, (g.medial_condyle_x[0], g.lateral_condyle_x[1]))

    femur = femur_x & (((r < g.condyle_radius) & (condyle_x | (phi >= g.trochlea_arc_deg[0]) | (rz >= 0)))
                       | ((rz >= 0) & (np.abs(y) < g.condyle_radius)))
    tissue[femur] = BONE

    shell = (r >= g.condyle_radius) & (r <= g.condyle_radius + g.fc_thickness)
    fc = shell & ((condyle_x & _in_range(phi, g.fc_arc_deg)) | (notch_x & _in_range(phi, g.trochlea_arc_deg)))
    tissue[fc] = FC
    depth[fc] = (r[fc] - g.condyle_radius) / g.fc_thickness

    z_top = -0.5 * g.joint_gap
    z_bot = z_top - g.tibial_thickness
    tibia = (np.abs(x) <= g.tibia_half_size[0]) & (np.abs(y) <= g.tibia_half_size[1]) & (z < z_bot)
    tissue[tibia] = BONE
    slab = (z >= z_bot) & (z <= z_top)
    for code, (cx, cy), (ax, ay) in ((MTC, g.mtc_centre, g.mtc_semi_axes),
                                     (LTC, g.ltc_centre, g.ltc_semi_axes)):
        plate = slab & (((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0)
        tissue[plate] = code
        depth[plate] = (z[plate] - z_bot) / g.tibial_thickness

    notch_mid = 0.5 * (g.medial_condyle_x[1] + g.lateral_condyle_x[0])
    pc_in = g.condyle_radius + g.fc_thickness + g.joint_gap
    pc_out = pc_in + g.pc_thickness
    pat_x = np.abs(x - notch_mid) <= g.pc_half_width
    pat_phi = _in_range(phi, g.pc_arc_deg)
    pc = pat_x & pat_phi & (r >= pc_in) & (r <= pc_out)
    patella = pat_x & pat_phi & (r > pc_out) & (r <= pc_out + g.patella_thickness)
    tissue[patella] = BONE
    tissue[pc] = PC
    depth[pc] = (pc_out - r[pc]) / g.pc_thickness

    for lx, ly, lz, rad in lesions:
        if side == "left":
            lx = -lx
        hole = ((x - lx) ** 2 + (y - ly) ** 2 + (z - lz) ** 2 <= rad ** 2) & (tissue >= FC) & (tissue <= PC)
        tissue[hole] = SOFT
        depth[hole] = 0.0
    return tissue, depth


@dataclass(frozen=True, eq=False)
class PhantomCase:
    series: DynamicSeries
    mask: LabelVolume
    truth: Volume  # subregions of the unmisaligned object on the same grid
    truth_table: dict  # region code -> expected mean T1rho (ms), codes 1-23
    t1rho_true: Volume  # voxelwise true T1rho of the (misaligned) rasterisation
    spec: PhantomSpec


def _object_points(spec: PhantomSpec, transform: RigidTransform | None = None) -> np.ndarray:
    grid = Volume(np.zeros(spec.dims, dtype=np.uint8), grid_affine(spec))
    pts = voxel_world_coords(grid).reshape(-1, 3)
    if transform is not None and transform != RigidTransform():
        # world = M(object)  =>  object = M^-1(world)
        pts = transform.inverse().apply(pts)
    return pts


def _labels(spec: PhantomSpec, transform=None):
    tissue, depth = rasterize(_object_points(spec, transform), spec.geometry, spec.side, spec.lesions)
    return tissue.reshape(spec.dims), depth.reshape(spec.dims)


def _truth_subregions(tissue: np.ndarray, affine: np.ndarray, parcellation: ParcellationConfig) -> Volume:
    mask = np.where(tissue <= PC, tissue, 0).astype(np.uint8)
    vol = Volume(mask, affine)
    canon, ops = canonical_orientation(vol)
    sub = parcellate(LabelVolume(canon), parcellation)
    return invert_orientation(sub, ops)


def _fill_nearest(sub: np.ndarray, compartment_mask: np.ndarray) -> np.ndarray:
    """Subregion codes extended to every voxel by nearest labelled voxel of one compartment."""
    labelled = compartment_mask & (sub > 0)
    if not labelled.any():
        return np.zeros_like(sub)
    _, idx = ndimage.distance_transform_edt(~labelled, return_indices=True)
    return sub[tuple(idx)]


def generate(spec: PhantomSpec | None = None, parcellation: ParcellationConfig | None = None) -> PhantomCase:
    """Rasterise the phantom, synthesise the spin-lock series and its ground truth."""
    spec = spec or PhantomSpec()
    parcellation = parcellation or ParcellationConfig()
    affine = grid_affine(spec)

    base_tissue, base_depth = _labels(spec)
    for code, name in ((FC, "FC"), (MTC, "MTC"), (LTC, "LTC")):
        if not np.any(base_tissue == code):
            raise PhantomError(f"phantom geometry produces an empty {name} compartment")
    truth = _truth_subregions(base_tissue, affine, parcellation)
    sub_t1 = spec.subregion_t1rho()
    lut = np.zeros(256)
    for code, t in sub_t1.items():
        lut[code] = t

    def cartilage_t1(sub_codes, depth):
        return lut[sub_codes] + spec.depth_gradient_ms * (depth - 0.5)

    # expected subregional means from the unmisaligned geometry
    t_base = np.where(truth.data > 0, cartilage_t1(truth.data, base_depth), 0.0)
    truth_table = {}
    for code in SUBREGION_NAMES:
        sel = truth.data == code
        truth_table[code] = float(t_base[sel].mean()) if sel.any() else None
    for code, (_, members) in COMPARTMENT_ROWS.items():
        sel = np.isin(truth.data, members)
        truth_table[code] = float(t_base[sel].mean()) if sel.any() else None

    moved = spec.misalignment != RigidTransform()
    if moved:
        tissue, depth = _labels(spec, spec.misalignment)
        # subregion of each moved voxel: look up the unmisaligned truth at its object position
        pts = _object_points(spec, spec.misalignment)
        idx = np.rint(pts @ np.linalg.inv(affine)[:3, :3].T + np.linalg.inv(affine)[:3, 3]).astype(int)
        idx = np.clip(idx, 0, np.asarray(spec.dims) - 1)
        sub = np.zeros(spec.dims, dtype=np.uint8)
        flat_tissue = tissue.reshape(-1)
        flat_sub = sub.reshape(-1)
        for comp in (FC, MTC, LTC):
            filled = _fill_nearest(truth.data, base_tissue == comp)
            sel = flat_tissue == comp
            flat_sub[sel] = filled[idx[sel, 0], idx[sel, 1], idx[sel, 2]]
    else:
        tissue, depth, sub = base_tissue, base_depth, truth.data

    cart = (tissue >= FC) & (tissue <= LTC)
    t1 = np.zeros(spec.dims)
    i0 = np.zeros(spec.dims)
    t1[cart] = cartilage_t1(sub[cart], depth[cart])
    i0[cart] = spec.i0
    pcs = tissue == PC
    t1[pcs] = spec.pc_t1rho + spec.depth_gradient_ms * (depth[pcs] - 0.5)
    i0[pcs] = spec.i0
    for code, (amp, t) in ((BONE, spec.bone), (SOFT, spec.soft_tissue)):
        sel = tissue == code
        t1[sel] = t
        i0[sel] = amp
    if np.any(t1[cart | pcs] <= 0):
        raise PhantomError("depth gradient drives T1rho non-positive")

    rng = np.random.default_rng(spec.seed)
    frames = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for tsl in spec.tsl:
            signal = np.where(t1 > 0, i0 * np.exp(-tsl / np.where(t1 > 0, t1, 1.0)), 0.0)
            signal = signal + np.where(i0 > 0, spec.c, 0.0)
            if spec.noise == "gaussian" and spec.sigma > 0:
                signal = signal + rng.normal(0.0, spec.sigma, spec.dims)
            elif spec.noise == "rician" and spec.sigma > 0:
                n1 = rng.normal(0.0, spec.sigma, spec.dims)
                n2 = rng.normal(0.0, spec.sigma, spec.dims)
                signal = np.sqrt((signal + n1) ** 2 + n2 ** 2)
            frames.append(Volume(signal, affine))
    series = DynamicSeries(spec.tsl, frames)
    mask = LabelVolume(Volume(np.where(tissue <= PC, tissue, 0).astype(np.uint8), affine))
    return PhantomCase(series, mask, truth, truth_table, Volume(t1 * (cart | pcs), affine), spec)


def reference_volume(spec: PhantomSpec | None = None) -> Volume:
    """Mean image of the unmisaligned, noiseless phantom in RAS+ orientation.

    Serves as the default registration reference.
    """
    spec = spec or PhantomSpec()
    spec = replace(spec, misalignment=RigidTransform(), noise="none", sigma=0.0, lesions=())
    case = generate(spec)
    ref, _ = canonical_orientation(mean_series(case.series))
    return ref


def perturb_mask(mask: LabelVolume, op: str, radius_voxels: int = 1) -> LabelVolume:
    """Erode or dilate every compartment label independently (6-connectivity).

    Dilation only claims background voxels; where compartments compete the
    lower label wins. Erosion that empties a compartment is an error.
    """
    if op not in ("erode", "dilate"):
        raise ValueError(f"op must be 'erode' or 'dilate', got {op!r}")
    if radius_voxels < 1:
        raise ValueError("radius must be >= 1")
    data = np.asarray(mask.data)
    structure = ndimage.generate_binary_structure(3, 1)
    out = np.zeros_like(data) if op == "erode" else data.copy()
    names = {FC: "FC", MTC: "MTC", LTC: "LTC", PC: "PC"}
    for code in (FC, MTC, LTC, PC):
        sel = data == code
        if not sel.any():
            continue
        if op == "erode":
            eroded = ndimage.binary_erosion(sel, structure, iterations=radius_voxels, border_value=0)
            if not eroded.any():
                raise ValueError(f"erosion by {radius_voxels} empties compartment {names[code]}")
            out[eroded] = code
        else:
            grown = ndimage.binary_dilation(sel, structure, iterations=radius_voxels)
            claim = grown & (out == 0) & (data == 0)
            out[claim] = code
    return LabelVolume(Volume(out, mask.affine))


def subject_spec(base: PhantomSpec | None = None, seed: int = 0, max_rotation_deg: float = 5.0,
                 max_shift_mm: float = 3.0, sigma_fraction: float = 0.02) -> PhantomSpec:
    """A synthetic subject: jittered anatomy, subregional T1rho, pose and noise.

    Everything is drawn from ``numpy.random.default_rng(seed)``, so a subject
    is a pure function of ``(base, seed)``.
    """
    base = base or PhantomSpec()
    rng = np.random.default_rng(seed)
    g = base.geometry
    k_ap = rng.uniform(0.92, 1.08)
    k_ml = rng.uniform(0.92, 1.08)
    geom = replace(
        g,
        condyle_radius=g.condyle_radius * rng.uniform(0.93, 1.07),
        fc_thickness=g.fc_thickness * rng.uniform(0.9, 1.1),
        tibial_thickness=g.tibial_thickness * rng.uniform(0.9, 1.1),
        mtc_semi_axes=(g.mtc_semi_axes[0] * k_ml, g.mtc_semi_axes[1] * k_ap),
        ltc_semi_axes=(g.ltc_semi_axes[0] * k_ml, g.ltc_semi_axes[1] * k_ap),
    )
    level = rng.normal(42.0, 3.0)
    t1 = {code: float(np.clip(level + rng.normal(0.0, 2.5), 25.0, 70.0)) for code in SUBREGION_NAMES}
    pose = RigidTransform(tuple(rng.uniform(-max_rotation_deg, max_rotation_deg, 3)),
                          tuple(rng.uniform(-max_shift_mm, max_shift_mm, 3)))
    return replace(
        base,
        geometry=geom,
        t1rho=t1,
        pc_t1rho=float(level),
        depth_gradient_ms=float(rng.uniform(6.0, 12.0)),
        noise="gaussian" if sigma_fraction > 0 else "none",
        sigma=sigma_fraction * base.i0,
        seed=int(rng.integers(0, 2**63 - 1)),
        misalignment=pose,
    )
