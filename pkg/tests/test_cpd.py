import numpy as np
import pytest

from dalton.cpd import (
    DEFAULT_MIN_SEP,
    DEFAULT_TAU,
    calibrate_tau,
    cpd_score,
    extract_changepoints,
    median_bandwidth,
    normalize,
)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def exact_mmd_score(x, t, w, h):
    """Brute-force unbiased MMD^2 between x[t-w:t] and x[t:t+w] under an
    RBF kernel of bandwidth h. Quadratic; oracle use only."""
    left, right = x[t - w : t], x[t : t + w]

    def gram(a, b):
        d = np.subtract.outer(a, b)
        return np.exp(-(d * d) / (2.0 * h * h))

    kl, kr, kc = gram(left, left), gram(right, right), gram(left, right)
    a = (kl.sum() - np.trace(kl)) / (w * (w - 1))
    b = (kr.sum() - np.trace(kr)) / (w * (w - 1))
    return a + b - 2.0 * kc.mean()


def pooled_median_distance(window):
    d = np.abs(np.subtract.outer(window, window))
    return np.median(d[np.triu_indices(len(window), k=1)])


# ---------------------------------------------------------------------------
# normalize
# ---------------------------------------------------------------------------

def test_normalize_constant_series_is_all_zeros():
    z = normalize(np.full(100, 42.0), resolution=1.0)
    assert np.all(z == 0.0)


def test_normalize_scale_equivariance():
    rng = np.random.default_rng(1)
    x = rng.normal(50, 5, size=500)
    assert np.allclose(normalize(10 * x, 0.1), normalize(x, 0.1), atol=1e-9)


def test_normalize_outlier_zscores():
    # hand-derived: median = 2.005, raw MAD = 0.025, floored to 0.1
    x = np.array([2.0, 2.04, 1.96, 2.02, 1.98, 2.0, 2.03, 1.97, 2.01, 9.0])
    expected = np.array(
        [-0.05, 0.35, -0.45, 0.15, -0.25, -0.05, 0.25, -0.35, 0.05, 69.95]
    )
    z = normalize(x, resolution=0.1)
    assert np.allclose(z, expected, atol=1e-9)
    assert abs(z[-1]) > 3
    assert np.all(np.abs(z[:-1]) <= 1)


# ---------------------------------------------------------------------------
# cpd_score
# ---------------------------------------------------------------------------

def test_score_boundaries_are_zero():
    rng = np.random.default_rng(2)
    n, w = 800, 300
    s = cpd_score(rng.standard_normal(n), w)
    assert np.all(s[:w] == 0.0)
    assert np.all(s[n - w + 1 :] == 0.0)
    assert np.any(s[w : n - w + 1] != 0.0)


def test_score_preconditions():
    x = np.zeros(100)
    with pytest.raises(ValueError):
        cpd_score(x, w=10)          # window too small
    with pytest.raises(ValueError):
        cpd_score(x, w=60)          # series shorter than 2w


def test_null_scores_concentrate_near_zero():
    # Monte-Carlo null at a fixed position, 1000 trials. The statistic's
    # null magnitude is O(1/w): centered within 3/w at the 99% level. The
    # upper tail is chi-square-like (heavier than normal), so the extreme
    # 99.9% bound is double that; both bounds frozen from the MC run.
    rng = np.random.default_rng(3)
    n, w = 700, 300
    mid = n // 2
    draws = np.empty(1000)
    for i in range(1000):
        z = normalize(rng.standard_normal(n), 1.0)
        draws[i] = cpd_score(z, w)[mid]
    assert abs(np.mean(draws)) < 1.0 / w
    assert np.quantile(np.abs(draws), 0.99) <= 3.0 / w
    assert np.quantile(np.abs(draws), 0.999) <= 6.0 / w


def test_step_argmax_matches_bruteforce_oracle():
    rng = np.random.default_rng(4)
    n, w, t0 = 1200, 100, 600
    x = rng.standard_normal(n)
    x[t0:] += 5.0
    z = normalize(x, 1.0)

    # oracle: exact quadratic MMD with per-position pooled-window bandwidth
    grid = np.arange(w, n - w + 1, 5)
    oracle = [
        exact_mmd_score(z, t, w, pooled_median_distance(z[t - w : t + w]))
        for t in grid
    ]
    oracle_argmax = grid[int(np.argmax(oracle))]
    assert abs(oracle_argmax - t0) <= w // 4

    # production scorer localizes the same step
    s = cpd_score(z, w)
    assert abs(int(np.argmax(s)) - t0) <= w // 4


def test_featurized_score_tracks_exact_kernel():
    # same bandwidth both sides; isolates the feature-basis approximation
    rng = np.random.default_rng(5)
    n, w = 1400, 100
    x = rng.standard_normal(n)
    x[500:] += 2.0
    x[1000:] -= 3.0
    z = normalize(x, 1.0)
    h = median_bandwidth(z)

    grid = np.arange(w, n - w + 1, 10)
    exact = np.array([exact_mmd_score(z, t, w, h) for t in grid])
    fast = cpd_score(z, w)[grid]

    assert np.corrcoef(exact, fast)[0, 1] > 0.995
    assert np.max(np.abs(exact - fast)) < 0.05 * (1 + np.max(np.abs(exact)))


def test_mirror_symmetry():
    # with windows [t-w, t) vs [t, t+w), mirroring maps position t -> n-t
    rng = np.random.default_rng(6)
    n, w = 900, 300
    x = rng.standard_normal(n)
    x[450:] += 4.0
    z = normalize(x, 1.0)
    fwd = cpd_score(z, w)
    rev = cpd_score(z[::-1], w)
    for t in range(w, n - w + 1):
        assert rev[t] == pytest.approx(fwd[n - t], abs=1e-5)


def test_identical_windows_score_zero():
    # all samples equal: every feature vector identical, u-statistic is 0
    z = normalize(np.full(700, 7.0), 1.0)
    s = cpd_score(z, 300)
    assert np.allclose(s, 0.0, atol=1e-6)


# ---------------------------------------------------------------------------
# extract_changepoints
# ---------------------------------------------------------------------------

def test_extract_empty_below_threshold():
    s = np.full(500, 0.01)
    assert extract_changepoints(s, tau=0.05, min_sep=60) == []


def test_extract_min_sep_keeps_higher_peak():
    s = np.zeros(300)
    s[100], s[110] = 1.0, 0.8
    cps = extract_changepoints(s, tau=0.5, min_sep=60)
    assert [c.index for c in cps] == [100]


def test_extract_keeps_separated_peaks_in_index_order():
    s = np.zeros(500)
    s[100], s[300], s[450] = 0.6, 0.9, 0.7
    cps = extract_changepoints(s, tau=0.5, min_sep=60)
    assert [c.index for c in cps] == [100, 300, 450]
    assert [round(c.score, 2) for c in cps] == [0.6, 0.9, 0.7]


def test_extract_plateau_resolves_to_leftmost():
    s = np.zeros(200)
    s[50:53] = 0.7
    cps = extract_changepoints(s, tau=0.5, min_sep=10)
    assert [c.index for c in cps] == [50]


def test_extract_rejects_bad_tau():
    with pytest.raises(ValueError):
        extract_changepoints(np.zeros(10), tau=0.0, min_sep=5)


def test_multi_step_detection_f1():
    # small-scale version of the synthetic benchmark: 20 series, 1-5 steps
    rng = np.random.default_rng(7)
    n = 7200
    tp = fp = fn = 0
    for _ in range(20):
        k = int(rng.integers(1, 6))
        while True:
            pos = np.sort(rng.integers(900, n - 900, size=k))
            if k == 1 or np.min(np.diff(pos)) >= 900:
                break
        x = rng.standard_normal(n)
        for p, sgn, mag in zip(pos, rng.choice([-1, 1], k), rng.uniform(3, 6, k)):
            x[p:] += sgn * mag
        s = cpd_score(normalize(x, 1.0))
        found = np.array([c.index for c in extract_changepoints(s)])
        used = set()
        for t in pos:
            if found.size and np.min(np.abs(found - t)) <= 30:
                tp += 1
                used.add(int(found[np.argmin(np.abs(found - t))]))
            else:
                fn += 1
        fp += sum(1 for f in found if int(f) not in used)
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    f1 = 2 * precision * recall / max(precision + recall, 1e-9)
    assert f1 >= 0.9


def test_scale_invariant_changepoint_sets():
    rng = np.random.default_rng(8)
    for _ in range(10):
        x = rng.standard_normal(3000) * rng.uniform(0.5, 50)
        x[1500:] += rng.uniform(3, 8)
        a = extract_changepoints(cpd_score(normalize(x, 1.0)))
        b = extract_changepoints(cpd_score(normalize(100.0 * x, 1.0)))
        assert [c.index for c in a] == [c.index for c in b]


def test_calibrate_tau_quantile():
    s = np.zeros(2000)
    s[300:1700] = np.linspace(0.001, 0.1, 1400)
    tau = calibrate_tau(s, quantile=0.5)
    assert 0.04 < tau < 0.06
