import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from slowfast_nse.spectral import SpectralSpace
from slowfast_nse.stochastic import (
    CovarianceSpec,
    NoiseStream,
    batch_normals,
    sample_increment,
    sample_increments,
    stream_family,
    trace,
    trace_h,
)


@pytest.fixture(scope="module")
def cov():
    return CovarianceSpec(SpectralSpace(16), alpha=1.5, amplitude=1.0)


def draws(cov, dt, role="slow", n=10_000, seed=3):
    return sample_increments(cov, dt, stream_family(seed, role, range(n)))


# -- trace ----------------------------------------------------------------------


def test_trace_of_single_mode_pair():
    # q = 0.5 on the pair +-(1,0): four real degrees of freedom of variance 0.5
    sp = SpectralSpace(16)
    support = (np.abs(sp.k1) == 1) & (sp.k2 == 0)
    cov = CovarianceSpec(sp, alpha=1.5, amplitude=0.5, support=support)
    assert trace(cov) == pytest.approx(2.0, rel=1e-15)


def test_trace_zero_amplitude_and_linearity(cov):
    assert trace(CovarianceSpec(cov.space, 1.5, 0.0)) == 0.0
    assert trace(CovarianceSpec(cov.space, 1.5, 2.0)) == pytest.approx(2 * trace(cov), rel=1e-15)


def test_eigenvalues_positive_on_retained_modes(cov):
    q = cov.eigenvalues
    assert (q[cov.space.retained] > 0).all()
    assert (q[~cov.space.retained] == 0).all()


def test_invalid_covariance_rejected():
    with pytest.raises(ValueError):
        CovarianceSpec(SpectralSpace(16), alpha=1.0)
    with pytest.raises(ValueError):
        CovarianceSpec(SpectralSpace(16), amplitude=-1.0)


# -- increments -------------------------------------------------------------------


def test_second_moment_equals_trace_times_dt(cov):
    sp = cov.space
    for dt in (1e-2, 1e-4):
        sq = sp.sobolev_sq(draws(cov, dt), 0.0)
        mean, se = sq.mean(), sq.std(ddof=1) / np.sqrt(sq.size)
        assert abs(mean - trace_h(cov) * dt) <= 3 * se


def test_replay_is_bit_identical(cov):
    a = sample_increment(cov, 1e-3, NoiseStream(5, 2, "fast", counter=17))
    b = sample_increment(cov, 1e-3, NoiseStream(5, 2, "fast", counter=17))
    np.testing.assert_array_equal(a.coeffs, b.coeffs)
    s = NoiseStream(5, 2, "fast")
    for _ in range(17):
        sample_increment(cov, 1e-3, s)
    np.testing.assert_array_equal(sample_increment(cov, 1e-3, s).coeffs, a.coeffs)
    assert s.counter == 18


def test_roles_are_uncorrelated(cov):
    sp = cov.space
    e = sp.mode((1, 0)).coeffs
    a = sp.inner(draws(cov, 1.0, "slow"), e)
    b = sp.inner(draws(cov, 1.0, "fast"), e)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) <= 3 / np.sqrt(a.size)


def test_roles_pass_ks_comparison(cov):
    sp = cov.space
    e = sp.mode((1, 2)).coeffs
    samples = {role: sp.inner(draws(cov, 1.0, role, n=4000), e) for role in ("slow", "fast", "frozen")}
    assert stats.ks_2samp(samples["slow"], samples["fast"]).pvalue > 0.01
    assert stats.ks_2samp(samples["slow"], samples["frozen"]).pvalue > 0.01
    # and each marginal is the expected centred normal
    sd = np.sqrt(cov.eigenvalues[1, 2] * 1.0)
    assert stats.kstest(samples["slow"] / sd, "norm").pvalue > 0.01


def test_half_steps_compose_in_distribution(cov):
    sp = cov.space
    e = sp.mode((2, 1)).coeffs
    n = 10_000
    full = sp.inner(draws(cov, 0.2, n=n, seed=1), e)
    streams = stream_family(2, "slow", range(n))
    halves = sample_increments(cov, 0.1, streams) + sample_increments(cov, 0.1, streams)
    split = sp.inner(halves, e)
    for k in (1, 2):
        a, b = full**k, split**k
        gap = abs(a.mean() - b.mean())
        assert gap <= 3 * np.hypot(a.std(ddof=1), b.std(ddof=1)) / np.sqrt(n)


@given(st.integers(0, 2**63 - 1), st.integers(0, 1000), st.sampled_from(["slow", "fast", "frozen"]))
def test_increments_divergence_free_and_hermitian(seed, sample, role):
    cov = CovarianceSpec(SpectralSpace(16))
    c = sample_increment(cov, 0.5, NoiseStream(seed, sample, role)).coeffs
    sp = cov.space
    assert np.abs(sp.divergence(c)).max() <= 1e-12 * np.sqrt(sp.sobolev_sq(c, 1.0))
    np.testing.assert_array_equal(sp.reflect(c), np.conj(c))
    assert not c[:, ~sp.retained].any()


def test_nonpositive_dt_rejected(cov):
    with pytest.raises(ValueError):
        sample_increment(cov, 0.0, NoiseStream(1, 0, "slow"))


def test_batched_normals_match_single_stream_calls():
    streams = stream_family(9, "fast", range(5), counter=3)
    twins = [s.copy() for s in streams]
    batch = batch_normals(streams, 37)
    for row, s in zip(batch, twins):
        np.testing.assert_array_equal(row, s.normals(37))


def test_stream_ids_are_distinct_and_replicas_independent():
    a = NoiseStream(1, 0, "frozen").normals(64)
    b = NoiseStream(1, 0, "frozen", replica=1).normals(64)
    c = NoiseStream(1, 1, "frozen").normals(64)
    d = NoiseStream(2, 0, "frozen").normals(64)
    for other in (b, c, d):
        assert not np.array_equal(a, other)


def test_unknown_role_rejected():
    with pytest.raises(ValueError):
        NoiseStream(1, 0, "medium")


def test_stream_pickles_with_counter():
    import pickle

    s = NoiseStream(4, 2, "slow", counter=11)
    t = pickle.loads(pickle.dumps(s))
    np.testing.assert_array_equal(s.normals(8), t.normals(8))
