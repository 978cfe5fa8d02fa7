"""Segmentation overlap/distance metrics and paired agreement statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special, stats

__all__ = [
    "ConfusionCounts",
    "QuantPairs",
    "AgreementRow",
    "confusion",
    "dsc",
    "border_voxels",
    "assd",
    "rmsd_cv",
    "shapiro_wilk",
    "paired_t",
    "wilcoxon_signed_rank",
    "wilcoxon_exact_distribution",
    "bland_altman",
    "gated_compare",
]

_FACES = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")


def confusion(reference, prediction) -> ConfusionCounts:
    ref = np.asarray(reference, dtype=bool)
    pred = np.asarray(prediction, dtype=bool)
    if ref.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {ref.shape} vs {pred.shape}")
    return ConfusionCounts(
        tp=int(np.count_nonzero(ref & pred)),
        fp=int(np.count_nonzero(~ref & pred)),
        fn=int(np.count_nonzero(ref & ~pred)),
    )


def dsc(c: ConfusionCounts) -> float:
    """Dice similarity coefficient ``2TP / (2TP + FP + FN)``."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise ValueError("undefined DSC: both masks are empty")
    return 2 * c.tp / denom


def border_voxels(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask.

    Voxels beyond the array edge count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FACES, border_value=0)
    return mask & ~inner


def _directed_asd(src_border, dst_border, spacing) -> float:
    # exact Euclidean distance of every voxel to the nearest dst border voxel
    dist = ndimage.distance_transform_edt(~dst_border, sampling=spacing)
    return float(dist[src_border].mean())


def assd(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance (mm) between two boolean masks."""
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        raise ValueError("ASSD needs two non-empty masks")
    bx, by = border_voxels(x), border_voxels(y)
    spacing = tuple(float(s) for s in spacing)
    return 0.5 * (_directed_asd(bx, by, spacing) + _directed_asd(by, bx, spacing))


@dataclass(frozen=True)
class QuantPairs:
    """Paired regional means (ms), one entry per subject."""

    region_code: int
    q_ref: tuple
    q_pred: tuple

    def __post_init__(self):
        ref = tuple(float(v) for v in self.q_ref)
        pred = tuple(float(v) for v in self.q_pred)
        if len(ref) != len(pred):
            raise ValueError(f"unpaired lists: {len(ref)} reference vs {len(pred)} predicted")
        if len(ref) < 1:
            raise ValueError("need at least one pair")
        object.__setattr__(self, "q_ref", ref)
        object.__setattr__(self, "q_pred", pred)

    @property
    def n(self) -> int:
        return len(self.q_ref)

    @property
    def ref(self) -> np.ndarray:
        return np.asarray(self.q_ref)

    @property
    def pred(self) -> np.ndarray:
        return np.asarray(self.q_pred)


def rmsd_cv(pairs: QuantPairs) -> tuple[float, float]:
    """Root-mean-square deviation (ms) and its coefficient of variation (%)."""
    d = pairs.pred - pairs.ref
    rmsd = float(np.sqrt(np.mean(d * d)))
    ref_mean = float(np.mean(pairs.ref))
    if ref_mean == 0:
        raise ValueError("CV_RMSD undefined for zero reference mean")
    return rmsd, 100.0 * rmsd / ref_mean


# AS R94 polynomial coefficients, ascending powers
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x):
    return sum(c * x ** i for i, c in enumerate(coef))


def _swilk_coefficients(n: int) -> np.ndarray:
    nn2 = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    an25 = n + 0.25
    m = special.ndtri((np.arange(1, nn2 + 1) - 0.375) / an25)
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(nn2)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                        / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
        a[1] = a2
        start = 2
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        start = 1
    a[0] = a1
    a[start:] = -m[start:] / fac
    return a


def shapiro_wilk(x) -> tuple[float, float]:
    """Shapiro-Wilk W and p-value (Royston's AS R94 approximation).

    Valid for 3 <= n <= 5000.
    """
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if n < 3:
        raise ValueError("Shapiro-Wilk needs at least 3 values")
    if n > 5000:
        raise ValueError("Shapiro-Wilk approximation is valid for n <= 5000")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values")
    if x[-1] - x[0] < 1e-19 * max(1.0, abs(x[0])):
        raise ValueError("zero variance")

    a = _swilk_coefficients(n)
    nn2 = n // 2
    xs = (x - x.mean()) / (x[-1] - x[0])
    b = float(np.dot(a, xs[::-1][:nn2] - xs[:nn2]))
    ssq = float(np.dot(xs, xs))
    w = min(1.0, b * b / ssq)

    if n == 3:
        # exact distribution for n = 3
        pw = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(1.0, max(pw, 0.0)))

    w1 = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return w, 1e-99
        y = -math.log(gamma - w1)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        xx = math.log(n)
        y = w1
        mu = _poly(_C5, xx)
        sigma = math.exp(_poly(_C6, xx))
    if not np.isfinite(y):
        return w, 1.0
    return w, float(special.ndtr(-(y - mu) / sigma))


def paired_t(a, b) -> tuple[float, float]:
    """Paired-sample t statistic and two-sided p (df = n - 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        raise ValueError("zero variance of differences")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), n - 1))
    return t, min(1.0, p)


def _signed_ranks(d):
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("no nonzero pairs")
    ranks = stats.rankdata(np.abs(d))
    return d, ranks


def wilcoxon_exact_distribution(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Null distribution of W+ for the given (possibly tied) ranks.

    Returns the attainable W+ values and their counts out of ``2**n`` sign
    patterns, computed by convolution over doubled (integer) ranks.
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    support = np.flatnonzero(counts != 0)
    return support / 2.0, counts[support]


def wilcoxon_signed_rank(a, b=None, exact_max_n: int = 25) -> tuple[float, float]:
    """Wilcoxon signed-rank test on ``a - b``; returns (W+, two-sided p).

    Zero differences are dropped and tied magnitudes receive average ranks.
    The p-value is exact (sign enumeration) for n <= ``exact_max_n``;
    otherwise a tie-corrected normal approximation with continuity
    correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    d = a if b is None else a - np.asarray(b, dtype=np.float64)
    d, ranks = _signed_ranks(d)
    n = d.size
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_max_n:
        values, counts = wilcoxon_exact_distribution(ranks)
        total = 2 ** n
        le = int(sum(counts[values <= w_plus + 1e-9]))
        ge = int(sum(counts[values >= w_plus - 1e-9]))
        p = 2 * min(le, ge) / total
        return w_plus, min(1.0, p)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    diff = w_plus - mean
    cc = 0.5 * np.sign(diff)
    z = (diff - cc) / math.sqrt(var)
    return w_plus, min(1.0, 2.0 * float(special.ndtr(-abs(z))))


def bland_altman(pairs: QuantPairs):
    """Bias and 95% limits of agreement of ``q_pred - q_ref``.

    Returns ``(bias, loa_low, loa_high, points)`` where ``points`` is an
    (n, 2) array of per-subject (mean, difference).
    """
    if pairs.n < 2:
        raise ValueError("Bland-Altman needs n >= 2")
    diff = pairs.pred - pairs.ref
    bias = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    points = np.column_stack([(pairs.pred + pairs.ref) / 2.0, diff])
    return bias, bias - 1.96 * sd, bias + 1.96 * sd, points


@dataclass
class AgreementRow:
    region_code: int
    region_name: str
    n: int
    test_used: str | None = None
    p_value: float | None = None
    rmsd: float | None = None
    cv_rmsd: float | None = None
    bias: float | None = None
    loa_low: float | None = None
    loa_high: float | None = None
    normality_p_ref: float | None = None
    normality_p_pred: float | None = None
    errors: list = field(default_factory=list)


def gated_compare(pairs: QuantPairs, alpha: float = 0.05, region_name: str = "") -> AgreementRow:
    """Normality-gated paired comparison of one region.

    Shapiro-Wilk is run on both members; if either rejects normality at
    ``alpha`` the Wilcoxon signed-rank test is used, otherwise the paired
    t-test. Degenerate statistics are recorded in ``errors`` instead of
    raising.
    """
    if pairs.n < 3:
        raise ValueError("gated comparison needs n >= 3")
    row = AgreementRow(pairs.region_code, region_name, pairs.n)

    def attempt(label, func):
        try:
            return func()
        except ValueError as exc:
            row.errors.append(f"{label}: {exc}")
            return None

    sw_ref = attempt("shapiro_ref", lambda: shapiro_wilk(pairs.ref))
    sw_pred = attempt("shapiro_pred", lambda: shapiro_wilk(pairs.pred))
    row.normality_p_ref = sw_ref[1] if sw_ref else None
    row.normality_p_pred = sw_pred[1] if sw_pred else None

    # a sample the normality test cannot assess (e.g. constant) is treated as non-normal
    normal = (sw_ref is not None and sw_ref[1] >= alpha
              and sw_pred is not None and sw_pred[1] >= alpha)
    row.test_used = "paired_t" if normal else "wilcoxon"
    if normal:
        res = attempt("paired_t", lambda: paired_t(pairs.pred, pairs.ref))
    else:
        res = attempt("wilcoxon", lambda: wilcoxon_signed_rank(pairs.pred, pairs.ref))
    row.p_value = res[1] if res else None

    rc = attempt("rmsd", lambda: rmsd_cv(pairs))
    if rc:
        row.rmsd, row.cv_rmsd = rc
    ba = attempt("bland_altman", lambda: bland_altman(pairs))
    if ba:
        row.bias, row.loa_low, row.loa_high = ba[:3]
    return row
