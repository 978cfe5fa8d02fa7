import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist
from scipy.stats import norm

from kneet1rho.agreement import (
    ConfusionCounts,
    QuantPairs,
    assd,
    bland_altman,
    confusion,
    dsc,
    gated_compare,
    paired_t,
    rmsd_cv,
    shapiro_wilk,
    wilcoxon_signed_rank,
)

# Published AS R94 check vectors with their reference (W, p)
SW_X1 = [0.11, 7.87, 4.61, 10.14, 7.95, 3.14, 0.46, 4.43, 0.21, 4.75, 0.71, 1.52, 3.24, 0.93,
         0.42, 4.97, 9.53, 4.55, 0.47, 6.66]
SW_X2 = [1.36, 1.14, 2.92, 2.55, 1.46, 1.06, 5.27, -1.11, 3.48, 1.10, 0.88, -0.51, 1.46, 0.52,
         6.20, 1.69, 0.08, 3.67, 2.81, 3.49]
SW_ROYSTON = [0.139, 0.157, 0.175, 0.256, 0.344, 0.413, 0.503, 0.577, 0.614, 0.655, 0.954, 1.392,
              1.557, 1.648, 1.690, 1.994, 2.174, 2.206, 3.245, 3.510, 3.571, 4.354, 4.980, 6.084,
              8.351]
SW_CASES = [(SW_X1, 0.900473, 0.0420897), (SW_X2, 0.959027, 0.5246), (SW_ROYSTON, 0.83467, 0.000914)]


def brute_dsc(a, b):
    return 2 * np.sum(a & b) / (a.sum() + b.sum())


def brute_assd(a, b, spacing):
    def border(m):
        idx = np.argwhere(m)
        out = []
        for p in idx:
            for ax in range(3):
                for s in (-1, 1):
                    q = p.copy()
                    q[ax] += s
                    if q[ax] < 0 or q[ax] >= m.shape[ax] or not m[tuple(q)]:
                        out.append(p)
                        break
                else:
                    continue
                break
        return np.array(out, float) * spacing

    pa, pb = border(a), border(b)
    d = cdist(pa, pb)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def enumerate_wilcoxon(d):
    d = np.asarray(d, float)
    d = d[d != 0]
    from scipy.stats import rankdata
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    sums = np.array([sum(rk for rk, s in zip(r, signs) if s) for signs in itertools.product((0, 1), repeat=len(r))])
    p = 2 * min(np.mean(sums <= w + 1e-9), np.mean(sums >= w - 1e-9))
    return w, min(1.0, p)


def test_dsc_examples():
    m = np.zeros((4, 4, 4), bool)
    m[1:3] = True
    assert dsc(confusion(m, m)) == 1.0
    assert dsc(confusion(m, ~m)) == 0.0
    assert dsc(ConfusionCounts(2, 1, 1)) == pytest.approx(0.6667, abs=1e-4)
    with pytest.raises(ValueError, match="undefined DSC"):
        dsc(confusion(np.zeros(3, bool), np.zeros(3, bool)))


def test_assd_examples():
    x = np.zeros((1, 1, 4), bool)
    y = np.zeros((1, 1, 4), bool)
    x[0, 0, 0] = True
    y[0, 0, 3] = True
    assert assd(x, y) == pytest.approx(3.0, abs=1e-12)
    y[:] = False
    y[0, 0, 0] = y[0, 0, 2] = True
    assert assd(x, y) == pytest.approx(0.5, abs=1e-12)
    assert assd(y, y) == 0.0
    with pytest.raises(ValueError):
        assd(x, np.zeros_like(x))


@given(st.integers(0, 2**32 - 1))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 17, 3))
    a = rng.random(shape) < rng.uniform(0.05, 0.6)
    b = rng.random(shape) < rng.uniform(0.05, 0.6)
    a.flat[0] = b.flat[-1] = True
    spacing = tuple(rng.uniform(0.5, 3.0, 3))
    assert dsc(confusion(a, b)) == brute_dsc(a, b)
    assert dsc(confusion(a, b)) == dsc(confusion(b, a))
    assert assd(a, b, spacing) == pytest.approx(brute_assd(a, b, np.array(spacing)), abs=1e-9)
    assert assd(a, b, spacing) == pytest.approx(assd(b, a, spacing), abs=1e-12)


def test_rmsd_cv_examples():
    assert rmsd_cv(QuantPairs(1, (40, 50), (40, 50))) == (0.0, 0.0)
    r, cv = rmsd_cv(QuantPairs(1, (40, 50), (41, 49)))
    assert r == pytest.approx(1.0)
    assert cv == pytest.approx(2.22, abs=0.005)
    with pytest.raises(ValueError):
        rmsd_cv(QuantPairs(1, (1, -1), (2, 0)))
    with pytest.raises(ValueError):
        QuantPairs(1, (1, 2), (1,))


@given(st.lists(st.tuples(st.floats(20, 80), st.floats(20, 80)), min_size=1, max_size=20), st.randoms())
def test_rmsd_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = rmsd_cv(QuantPairs(1, *zip(*pairs)))[0]
    b = rmsd_cv(QuantPairs(1, *zip(*shuffled)))[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("x,w,p", SW_CASES)
def test_shapiro_wilk_published_vectors(x, w, p):
    got_w, got_p = shapiro_wilk(x)
    assert got_w == pytest.approx(w, abs=1e-3)
    assert got_p == pytest.approx(p, abs=1e-3)


def test_shapiro_wilk_small_and_errors():
    w, p = shapiro_wilk([1, 2, 3, 4, 5])
    assert w >= 0.95 and p >= 0.5
    with pytest.raises(ValueError):
        shapiro_wilk([1, 2])
    with pytest.raises(ValueError, match="zero variance"):
        shapiro_wilk([3, 3, 3, 3])


def test_paired_t_examples():
    t, p = paired_t([1, -1, 1, -1], [0, 0, 0, 0])
    assert t == 0 and p == pytest.approx(1.0)
    t, p = paired_t([1, 2, 3, 4], [0, 0, 0, 0])
    assert t == pytest.approx(3.873, abs=1e-3)
    assert p == pytest.approx(0.0305, abs=5e-4)
    with pytest.raises(ValueError):
        paired_t([1, 2, 3], [1, 2, 3])


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5]) == (15.0, 0.0625)
    assert wilcoxon_signed_rank([1, -2, 3]) == (4.0, 0.75)
    with pytest.raises(ValueError, match="no nonzero pairs"):
        wilcoxon_signed_rank([1, 2], [1, 2])


def test_wilcoxon_matches_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(1, 11))
        d = np.round(rng.normal(0.3, 1, n), 1)  # rounding creates ties and zeros
        if not np.any(d != 0):
            continue
        w, p = wilcoxon_signed_rank(d)
        ow, op = enumerate_wilcoxon(d)
        assert w == ow
        assert p == pytest.approx(op, abs=1e-12)


def test_wilcoxon_normal_approximation_close_to_exact(rng):
    d = rng.normal(0.4, 1, 30)
    _, approx = wilcoxon_signed_rank(d)
    _, exact = wilcoxon_signed_rank(d, exact_max_n=40)
    assert approx == pytest.approx(exact, abs=0.01)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=12), st.floats(-100, 100))
def test_tests_shift_invariant(diffs, k):
    a = np.array(diffs) + 40
    b = np.full(len(diffs), 40.0) + np.linspace(0, 1, len(diffs))
    for test in (paired_t, wilcoxon_signed_rank):
        try:
            ref = test(a, b)
        except ValueError:
            continue
        shifted = test(a + k, b + k)
        assert shifted[1] == pytest.approx(ref[1], abs=1e-6)


def test_bland_altman_examples(rng):
    bias, lo, hi, pts = bland_altman(QuantPairs(1, (10, 20, 30), (10, 20, 30)))
    assert (bias, lo, hi) == (0, 0, 0)
    bias, lo, hi, pts = bland_altman(QuantPairs(1, (10, 20, 30), (11, 22, 33)))
    assert bias == pytest.approx(2)
    assert (lo, hi) == (pytest.approx(0.04), pytest.approx(3.96))
    assert pts.shape == (3, 2)
    with pytest.raises(ValueError):
        bland_altman(QuantPairs(1, (1,), (2,)))
    ref = rng.normal(40, 5, 20000)
    pred = ref + rng.normal(0.5, 1, ref.size)
    bias, lo, hi, _ = bland_altman(QuantPairs(1, ref, pred))
    inside = np.mean((pred - ref >= lo) & (pred - ref <= hi))
    assert abs(inside - 0.95) <= 0.02


def test_gate_routes_by_normality(rng):
    ref = 40 + 3 * norm.ppf((np.arange(1, 13) - 0.375) / 12.25)
    row = gated_compare(QuantPairs(1, ref, ref[::-1] + 0.2))
    assert row.test_used == "paired_t"
    assert row.normality_p_ref >= 0.05 and row.normality_p_pred >= 0.05
    skewed = np.array(SW_ROYSTON) * 10
    row = gated_compare(QuantPairs(1, skewed, skewed + rng.normal(0.2, 0.3, 25)))
    assert row.test_used == "wilcoxon"
    assert min(row.normality_p_ref, row.normality_p_pred) < 0.05
    assert row.loa_low <= row.bias <= row.loa_high


def test_gate_records_degenerate_statistics():
    row = gated_compare(QuantPairs(1, (40, 40, 40), (40, 40, 40)))
    assert row.test_used == "wilcoxon"
    assert row.p_value is None and row.rmsd == 0
    assert any("zero variance" in e for e in row.errors)
    with pytest.raises(ValueError):
        gated_compare(QuantPairs(1, (1, 2), (1, 2)))
