import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from vaecompress.ood import (DetectorError, DetectorState, beta_vae_detect, calibrate, cusum_trace, cusum_update,
                             detect_scores, fit_operating_point, icp_pvalue, icp_pvalues, latent_kl_per_dim,
                             martingale_increment, martingale_update, of_detect, select_reasoners,
                             write_trace_csv)


class Identity:
    """Encoder stub: rows of ``x`` are the means, log-variances are zero."""

    def encode(self, x):
        x = np.asarray(x, np.float64).reshape(len(x), -1)
        return x, np.zeros_like(x)


def kl_by_quadrature(mu, logvar):
    q = stats.norm(mu, math.exp(0.5 * logvar))
    p = stats.norm(0, 1)
    f = lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x))
    return integrate.quad(f, -40, 40, epsabs=1e-12, epsrel=1e-12, limit=200)[0]


def test_kl_examples():
    assert latent_kl_per_dim(0.0, 0.0) == 0
    assert latent_kl_per_dim(1.0, 0.0) == 0.5
    assert latent_kl_per_dim(0.0, 1.0) == pytest.approx((math.e - 2) / 2, abs=1e-12)
    assert abs(latent_kl_per_dim(0.0, 1.0) - kl_by_quadrature(0.0, 1.0)) < 1e-6


@given(st.floats(-3, 3), st.floats(-2, 2))
def test_kl_matches_quadrature(mu, logvar):
    assert abs(latent_kl_per_dim(mu, logvar) - kl_by_quadrature(mu, logvar)) < 1e-6


# exact zeros or values well clear of float underflow
coord = st.one_of(st.just(0.0), st.floats(1e-3, 20), st.floats(-20, -1e-3))


@given(arrays(np.float64, 5, elements=coord), arrays(np.float64, 5, elements=coord))
def test_kl_nonnegative_and_zero_only_at_prior(mu, logvar):
    kl = latent_kl_per_dim(mu, logvar)
    assert np.all(kl >= 0)
    assert np.array_equal(kl == 0, (mu == 0) & (logvar == 0))


def test_select_reasoners_examples():
    kl = np.array([[0, 0], [0, 1], [0, 0], [0, 1]], float)
    assert list(select_reasoners([kl[:2], kl[2:]], 1)) == [1]
    kl3 = np.array([[1, 5, 0], [3, 5, 0], [1, 5, 9], [3, 5, 0]], float)
    assert list(select_reasoners([kl3[:2], kl3[2:]], 3)) == [2, 0, 1]
    # equal variance keeps the lower index
    tied = np.array([[0, 0], [1, 1]], float)
    assert list(select_reasoners([tied[:1], tied[1:]], 1)) == [0]
    with pytest.raises(ValueError):
        select_reasoners([kl[:2], kl[2:]], 0)
    with pytest.raises(ValueError):
        select_reasoners([kl], 1)


def test_icp_examples():
    assert icp_pvalue([1, 2, 3, 4], 2.5) == 0.6
    assert icp_pvalue([1, 2, 3, 4], 0.0) == 1.0
    assert icp_pvalue([1, 2, 3, 4], 9.0) == 0.2
    # ties count as conforming
    assert icp_pvalue([1, 2, 3, 4], 2.0) == 0.8
    with pytest.raises(DetectorError):
        icp_pvalue([], 1.0)


def test_icp_matches_rank_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        calib = rng.integers(0, 8, rng.integers(1, 30)).astype(float)
        tests = rng.integers(-1, 9, 10).astype(float)
        brute = [(sum(c >= t for c in calib) + 1) / (len(calib) + 1) for t in tests]
        assert list(icp_pvalues(np.sort(calib), tests)) == brute
        assert [icp_pvalue(calib, t) for t in tests] == brute


def test_martingale_examples():
    assert math.exp(martingale_increment(1.0, 0.92)) == pytest.approx(0.92)
    assert math.exp(martingale_increment(0.01, 0.92)) == pytest.approx(1.330, abs=5e-4)
    assert abs(martingale_increment(0.01, 1 - 1e-9)) < 1e-7
    assert martingale_update(1.5, 1.0, 0.5) == pytest.approx(1.5 + math.log(0.5))
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            martingale_increment(bad)
    with pytest.raises(ValueError):
        martingale_increment(0.5, 1.0)


def test_cusum_examples():
    assert cusum_update(1.3, 0.2, 0.2) == 1.3
    assert cusum_update(0.0, 0.0, 1.0) == 0.0
    assert cusum_update(2.0, 0.5, 0.1) == pytest.approx(2.4)


def state_for(calib, delta=0.0, tau=1.0):
    return DetectorState(np.array([0]), np.sort(np.asarray(calib, float)), delta=delta, tau=tau)


def test_conforming_stream_keeps_cusum_at_zero():
    st_ = state_for([1, 2, 3, 4])
    res = beta_vae_detect(Identity(), st_, np.full((30, 1), 1.0))
    assert all(r.p == 1.0 and r.cusum == 0.0 and not r.is_ood for r in res)
    assert res[-1].log_m == pytest.approx(30 * math.log(0.92))


def test_saturated_stream_grows_cusum():
    st_ = state_for([1, 2, 3, 4], delta=0.01, tau=0.3)
    # a mean of 1e3 gives kl = 5e5; each step adds log 0.92 - 0.08 log 0.2 = 0.045 before the drift
    res = beta_vae_detect(Identity(), st_, np.full((20, 1), 1e3))
    assert all(r.p == 0.2 for r in res)
    c = [r.cusum for r in res]
    assert all(b > a for a, b in zip(c, c[1:]))
    assert res[-1].is_ood and st_.cusum == c[-1]


def test_state_carries_over_and_resets():
    st_ = state_for([1, 2, 3, 4])
    whole = detect_scores(st_.reset(), [9, 9, 1, 9])
    part = st_.reset()
    split = detect_scores(part, [9, 9]) + detect_scores(part, [1, 9])
    assert whole == split
    fresh = part.reset()
    assert fresh.cusum == 0 and fresh.log_martingale == 0 and part.cusum > 0
    assert np.array_equal(cusum_trace(st_, [9, 9, 1, 9]), [r.cusum for r in whole])


def test_uncalibrated_state_refuses():
    with pytest.raises(DetectorError):
        beta_vae_detect(Identity(), state_for([]), np.zeros((1, 1)))
    with pytest.raises(DetectorError):
        calibrate(Identity(), np.zeros((0, 3)), [])


def test_calibrate_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 5))
    x[:, 2] *= 4
    parts = np.repeat(["low", "medium"], 20)
    a = calibrate(Identity(), x, parts, k=2)
    b = calibrate(Identity(), x, parts, k=2)
    assert np.array_equal(a.reasoner_dims, b.reasoner_dims) and np.array_equal(a.calib_scores, b.calib_scores)
    assert a.reasoner_dims[0] == 2 and len(a.calib_scores) == 40
    assert np.all(np.diff(a.calib_scores) >= 0)
    assert a.log_martingale == 0 and a.cusum == 0


def test_of_detect_examples():
    h = np.zeros((6, 2, 2))
    assert of_detect(Identity(), Identity(), (h, h), 1e-9) == (0.0, False)
    mu = np.zeros((1, 6, 2, 2))
    mu[0, 0, 0, 0] = 1.0
    assert of_detect(Identity(), Identity(), (mu, mu), 0.5)[0] == 1.0
    assert of_detect(Identity(), Identity(), (mu[0], mu[0]), 1.0) == (1.0, False)
    assert of_detect(Identity(), Identity(), (mu[0], mu[0]), 0.999) == (1.0, True)
    with pytest.raises(ValueError):
        of_detect(Identity(), Identity(), (np.zeros((5, 2, 2)), np.zeros((5, 2, 2))), 1.0)
    with pytest.raises(ValueError):
        of_detect(Identity(), Identity(), (h, np.zeros((6, 3, 3))), 1.0)


@given(st.permutations(range(24)))
def test_of_score_permutation_invariant(perm):
    rng = np.random.default_rng(1)
    h, v = rng.normal(size=(2, 3, 6, 2, 2))

    class Permuted(Identity):
        def encode(self, x):
            mu, lv = super().encode(x)
            return mu[:, list(perm)], lv[:, list(perm)]

    a, _ = of_detect(Identity(), Identity(), (h, v), 1.0)
    b, _ = of_detect(Permuted(), Permuted(), (h, v), 1.0)
    assert np.allclose(a, b, rtol=1e-12)


def test_operating_point_respects_fpr():
    rng = np.random.default_rng(0)
    st_ = state_for(rng.exponential(size=200))
    ident = [rng.exponential(size=20) for _ in range(20)]
    ood = [rng.exponential(size=20) + 3 for _ in range(20)]
    delta, tau, tpr = fit_operating_point(st_, ident, ood)
    fpr = np.mean(np.concatenate([cusum_trace(state_for(st_.calib_scores, delta), s) for s in ident]) > tau)
    assert fpr <= 0.25 and tpr > 0.9


def test_trace_csv(tmp_path):
    res = detect_scores(state_for([1, 2, 3, 4]), [0.5, 9.0])
    write_trace_csv(tmp_path / "t.csv", res)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "frame,kl_sum,p,log_M,cusum,is_ood"
    assert len(lines) == 3 and lines[1].startswith("0,0.5,1.0,")
