import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fields
from slowfast_nse.spectral import (
    NormKind,
    SpaceMismatchError,
    SpectralField,
    SpectralSpace,
    apply_semigroup,
    leray_project,
    nonlinear_B,
    norm,
    solve_poisson,
    trilinear_b,
)

seeds = st.integers(0, 2**32 - 1)


def wrap(space, c):
    return SpectralField(space, c)


# -- geometry -----------------------------------------------------------------


def test_lambda1_is_one_and_mask_follows_two_thirds_rule():
    for n in (8, 12, 16, 32):
        sp = SpectralSpace(n)
        assert sp.lambda1 == 1.0
        kmax = np.maximum(np.abs(sp.k1), np.abs(sp.k2))
        assert not sp.retained[kmax > n / 3].any()
        assert sp.retained[(kmax <= n / 3) & (kmax > 0)].all()
        assert not sp.retained[0, 0]


def test_wavenumbers_cover_half_open_range():
    sp = SpectralSpace(8)
    assert sorted(set(sp.k1[:, 0].tolist())) == list(range(-3, 5))


def test_rejects_odd_grid():
    with pytest.raises(ValueError):
        SpectralSpace(15)


def test_product_grid_padded_only_when_needed():
    assert SpectralSpace(16).product_n == 16
    assert SpectralSpace(32).product_n == 32
    sp = SpectralSpace(12)
    assert sp.product_n > 3 * sp.cutoff and sp.product_n % 2 == 0


# -- Leray projector --------------------------------------------------------


def test_gradient_field_projects_to_zero(space16):
    sp = space16
    xi = np.arange(sp.n) * 2 * np.pi / sp.n
    a, _ = np.meshgrid(xi, xi, indexing="ij")
    raw = sp.from_physical(np.stack([np.cos(a), np.zeros_like(a)]))
    assert np.abs(leray_project(raw, sp).coeffs).max() < 1e-14


def test_shear_is_a_fixed_point(space16):
    sp = space16
    xi = np.arange(sp.n) * 2 * np.pi / sp.n
    _, b = np.meshgrid(xi, xi, indexing="ij")
    raw = sp.from_physical(np.stack([np.sin(b), np.zeros_like(b)]))
    np.testing.assert_allclose(leray_project(raw, sp).coeffs, raw, atol=1e-15)


def test_single_mode_projection_matches_dense_matrix(space16):
    sp = space16
    raw = np.zeros(sp.shape, complex)
    raw[:, 1, 1] = [1.0, 0.0]
    raw[:, -1, -1] = [1.0, 0.0]
    out = leray_project(raw, sp)
    k = np.array([1.0, 1.0])
    dense = np.eye(2) - np.outer(k, k) / (k @ k)
    np.testing.assert_allclose(out.coefficient((1, 1)), dense @ [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.coefficient((1, 1)), [0.5, -0.5], atol=1e-15)


def test_projector_agrees_with_dense_oracle_on_every_mode(space16, rng):
    sp = space16
    raw = sp.symmetrize(rng.standard_normal(sp.shape) + 1j * rng.standard_normal(sp.shape))
    out = sp.project(raw)
    for i, j in zip(*np.nonzero(sp.retained)):
        k = np.array([sp.k1[i, j], sp.k2[i, j]], float)
        P = np.eye(2) - np.outer(k, k) / (k @ k)
        np.testing.assert_allclose(out[:, i, j], P @ raw[:, i, j], atol=1e-14)


@given(seeds)
def test_projection_idempotent_and_divergence_free(seed):
    sp = SpectralSpace(32)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(sp.shape) + 1j * rng.standard_normal(sp.shape)
    once = leray_project(raw, sp)
    twice = leray_project(once)
    # identity-level tolerance: the second pass only adds rounding
    assert np.abs(twice.coeffs - once.coeffs).max() <= 1e-12 * np.abs(once.coeffs).max()
    h1 = once.norm(NormKind.sobolev(1))
    assert np.abs(sp.divergence(once.coeffs)).max() <= 1e-12 * h1
    assert once.coeffs[:, 0, 0].tolist() == [0, 0]
    np.testing.assert_array_equal(sp.reflect(once.coeffs), np.conj(once.coeffs))


def test_space_mismatch_is_structural_error(space16, space32):
    with pytest.raises(SpaceMismatchError):
        leray_project(np.zeros(space32.shape), space16)
    with pytest.raises(SpaceMismatchError):
        leray_project(np.zeros(space16.shape))
    with pytest.raises(SpaceMismatchError):
        nonlinear_B(space16.taylor_green(), space32.taylor_green())


def test_field_constructor_rejects_divergent_input(space16):
    raw = np.zeros(space16.shape, complex)
    raw[0, 1, 0] = raw[0, -1, 0] = 1.0
    with pytest.raises(ValueError):
        SpectralField(space16, raw)


# -- transforms ---------------------------------------------------------------


@given(seeds)
def test_physical_round_trip(seed):
    sp = SpectralSpace(16)
    c = fields(sp, seed)
    for m in (sp.n, sp.product_n):
        back = sp.from_physical(sp.to_physical(c, m))
        np.testing.assert_allclose(back, c, atol=1e-14)


def test_padded_grid_round_trip_when_n_divisible_by_three():
    sp = SpectralSpace(12)
    c = fields(sp, 4)
    np.testing.assert_allclose(sp.from_physical(sp.to_physical(c, sp.product_n)), c, atol=1e-14)


# -- semigroup ----------------------------------------------------------------


def test_semigroup_single_mode_and_identity(space16):
    u = space16.mode((1, 0))
    np.testing.assert_allclose(apply_semigroup(u, 1.0).coeffs, np.exp(-1.0) * u.coeffs, rtol=1e-15)
    v = wrap(space16, fields(space16, 1))
    np.testing.assert_array_equal(apply_semigroup(v, 0.0).coeffs, v.coeffs)
    with pytest.raises(ValueError):
        apply_semigroup(v, -1e-3)


@given(seeds, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_semigroup_property(seed, s, t):
    sp = SpectralSpace(16)
    u = wrap(sp, fields(sp, seed))
    a = apply_semigroup(u, s + t).coeffs
    b = apply_semigroup(apply_semigroup(u, s), t).coeffs
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


def test_semigroup_smoothing_bound(space32):
    # max over lambda of lambda exp(-2 lambda t) is 1/(2 e t)
    sp = space32
    us = fields(sp, 7, 100, decay=0.0)
    times = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0]
    violations = 0
    for t in times:
        lhs = np.sqrt(sp.sobolev_sq(sp.semigroup(us, t), 1.0))
        rhs = (2 * np.e * t) ** -0.5 * np.sqrt(sp.sobolev_sq(us, 0.0))
        violations += int(np.sum(lhs > rhs))
    assert violations == 0


# -- nonlinearity ---------------------------------------------------------------


def test_shear_has_no_self_advection(space16):
    assert np.abs(nonlinear_B(space16.shear()).coeffs).max() < 1e-15


def test_taylor_green_advection_is_a_gradient(space32):
    tg = space32.taylor_green()
    ref = np.sqrt(space32.sobolev_sq(space32.advection(tg.coeffs, tg.coeffs), 0.0))
    assert nonlinear_B(tg).norm() <= 1e-10 * max(ref, 1.0)


def test_taylor_green_advection_matches_physical_oracle():
    # (u.grad)u = (sin 2a, sin 2b)/2 for u = (sin a cos b, -cos a sin b)
    sp = SpectralSpace(64)
    xi = np.arange(sp.n) * 2 * np.pi / sp.n
    a, b = np.meshgrid(xi, xi, indexing="ij")
    oracle = sp.from_physical(np.stack([0.5 * np.sin(2 * a), 0.5 * np.sin(2 * b)]))
    tg = sp.taylor_green()
    np.testing.assert_allclose(sp.advection(tg.coeffs, tg.coeffs), oracle, atol=1e-13)
    assert np.abs(sp.project(oracle)).max() < 1e-15
    assert nonlinear_B(tg).norm() < 1e-13


def _quadrature_trilinear(sp, u, v, w, m=96):
    # direct sum on a fine grid using analytic derivatives of the Fourier series
    xi = np.arange(m) * 2 * np.pi / m
    a, b = np.meshgrid(xi, xi, indexing="ij")
    ks = np.nonzero(sp.retained)
    k1, k2 = sp.k1[ks], sp.k2[ks]
    phase = np.exp(1j * (k1[:, None, None] * a + k2[:, None, None] * b)) / (2 * np.pi)

    def phys(c, factor=1.0):
        return np.real(np.einsum("jm,mxy->jxy", c[:, ks[0], ks[1]] * factor, phase))

    up, wp = phys(u), phys(w)
    dv = [phys(v, 1j * k1), phys(v, 1j * k2)]
    integrand = sum(up[i] * dv[i][j] * wp[j] for i in range(2) for j in range(2))
    return float(integrand.sum() * (2 * np.pi / m) ** 2)


def test_trilinear_matches_independent_quadrature(space16):
    u, v, w = fields(space16, 1), fields(space16, 2), fields(space16, 3)
    assert space16.trilinear(u, v, w) == pytest.approx(_quadrature_trilinear(space16, u, v, w), rel=1e-12, abs=1e-14)


def test_trilinear_consistent_with_B(space16):
    u, v, w = (wrap(space16, fields(space16, s)) for s in (4, 5, 6))
    assert trilinear_b(u, v, w) == pytest.approx(nonlinear_B(u, v).inner(w), rel=1e-12)


def test_operator_identities_on_1000_triples(space32):
    sp = space32
    u, v, w = (fields(sp, s, 1000, decay=1.0) for s in (11, 12, 13))
    h1 = lambda c: np.sqrt(sp.sobolev_sq(c, 1.0))
    scale = h1(u) * h1(v) * h1(w)
    anti = sp.trilinear(u, v, w) + sp.trilinear(u, w, v)
    assert np.max(np.abs(anti) / scale) <= 1e-10
    vv = sp.trilinear(u, v, v)
    assert np.max(np.abs(vv) / (h1(u) * h1(v) ** 2)) <= 1e-10
    energy = sp.inner(sp.nonlinear(u, u), u)
    assert np.max(np.abs(energy) / h1(u) ** 3) <= 1e-10
    assert np.max(np.abs(sp.divergence(sp.nonlinear(u, v))).max(axis=(-2, -1)) / scale) <= 1e-12


@given(seeds, st.floats(1e-3, 1e3))
def test_energy_conservation_any_amplitude(seed, amp):
    sp = SpectralSpace(16)
    u = amp * fields(sp, seed)
    h1 = np.sqrt(sp.sobolev_sq(u, 1.0))
    assert abs(sp.inner(sp.nonlinear(u, u), u)) <= 1e-10 * h1**3


def _fitted_constant(n, num, den, count=200, seed=0):
    sp = SpectralSpace(n)
    us = fields(sp, seed, count, decay=1.0) * np.exp(np.random.default_rng(seed).uniform(-3, 3, count))[:, None, None, None]
    return float(np.max(num(sp, us) / den(sp, us)))


def test_B_minus_one_norm_constant_does_not_grow_with_N():
    num = lambda sp, u: np.sqrt(sp.sobolev_sq(sp.nonlinear(u, u), -1.0))
    den = lambda sp, u: np.sqrt(sp.sobolev_sq(u, 0.0) * sp.sobolev_sq(u, 1.0))
    c16 = _fitted_constant(16, num, den)
    c64 = _fitted_constant(64, num, den)
    assert c64 <= 2.0 * c16


def test_trilinear_bound_constant_stable_across_N():
    consts = []
    for n in (16, 32, 64):
        sp = SpectralSpace(n)
        u, v, w = (fields(sp, s, 300, decay=1.0) for s in (21, 22, 23))
        r = np.abs(sp.trilinear(u, v, w)) / np.sqrt(
            sp.sobolev_sq(u, 0.5) * sp.sobolev_sq(v, 1.0) * sp.sobolev_sq(w, 0.5)
        )
        consts.append(float(r.max()))
    # no blow-up with N: each refinement may not double the constant
    assert all(b <= 2.0 * a for a, b in zip(consts, consts[1:]))


# -- norms ------------------------------------------------------------------


def test_norm_of_unit_11_mode(space16):
    u = space16.mode((1, 1))
    assert norm(u, NormKind.sobolev(0)) == pytest.approx(1.0, abs=1e-15)
    assert norm(u, NormKind.sobolev(1)) == pytest.approx(np.sqrt(2.0), abs=1e-14)


@given(seeds)
def test_parseval_sobolev0_equals_l2(seed):
    sp = SpectralSpace(16)
    u = wrap(sp, fields(sp, seed, norm=3.0))
    assert norm(u, NormKind.lebesgue(2)) == pytest.approx(norm(u, NormKind.sobolev(0)), rel=1e-12)


def test_interpolation_inequality(space16):
    us = fields(space16, 8, 1000, decay=1.0)
    s0, s1, sh = (space16.sobolev_sq(us, s) for s in (0.0, 1.0, 0.5))
    assert np.all(sh <= np.sqrt(s0 * s1) * (1 + 1e-12))


def test_lebesgue_domain_error(space16):
    with pytest.raises(ValueError):
        NormKind.lebesgue(0.5)
    with pytest.raises(ValueError):
        space16.lebesgue(fields(space16, 1), 0.5)


# -- Poisson ------------------------------------------------------------------


def test_poisson_examples(space16):
    e = space16.mode((1, 0))
    np.testing.assert_allclose(solve_poisson(e).coeffs, e.coeffs, atol=1e-16)
    assert np.abs(solve_poisson(space16.zeros()).coeffs).max() == 0


@given(seeds)
def test_poisson_round_trip(seed):
    sp = SpectralSpace(16)
    f = wrap(sp, fields(sp, seed))
    u = solve_poisson(f)
    residual = sp.eigenvalues * u.coeffs - f.coeffs
    assert np.sqrt(sp.sobolev_sq(residual, 0.0)) <= 1e-12 * f.norm()


# -- concurrency ----------------------------------------------------------------


def test_concurrent_calls_do_not_interfere(space32):
    us = fields(space32, 99, 16)
    expected = [space32.nonlinear(u, u) for u in us]
    barrier = threading.Barrier(4)

    def work(i):
        if i < 4:
            barrier.wait()
        return space32.nonlinear(us[i], us[i])

    with ThreadPoolExecutor(4) as ex:
        got = list(ex.map(work, range(len(us))))
    for a, b in zip(expected, got):
        np.testing.assert_array_equal(a, b)
