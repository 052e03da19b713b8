"""Numeric checks of the coercivity and local-monotonicity inequalities of
the coupled drift on the product space ``H x H``.

For ``w = (u, v)`` the coupled operator is ``A~w = (nu A u, A v / eps)``,
``F(w) = (-B(u) + f(u, v), g(u, v) / eps)`` and the noise norm is
``|sigma(w)|^2 = |sigma1(u)|^2_{Q1} + |sigma2(u, v)|^2_{Q2} / eps``.  Two
ratios are sampled:

    coercivity   (<A~w + F(w), w> + |sigma(w)|^2 + C_eps ||w||_V^2) / (1 + |w|^2)
    monotonicity (<A~dw + F(w1) - F(w2), dw> + |sigma(w1) - sigma(w2)|^2)
                 / ((1 + |u2|_{L4}^4) |dw|^2)

with ``C_eps = min(nu, 1/eps) / 2``.  Both must stay below a fixed
constant.  The constant is the largest ratio on a training set of moderate
amplitude, floored by a scale computed from the declared Lipschitz
constants; a fresh test set reaching much larger amplitudes must not exceed
twice that value.  A correct nonlinearity cancels in ``<B(u), u>``, so the
ratios stay bounded; a broken one grows with amplitude and is caught.
"""

from __future__ import annotations

import numpy as np

from .coefficients import CoefficientSet, builtin, field_sampler
from .report import Table
from .spectral import SpectralSpace
from .stochastic import CovarianceSpec

__all__ = ["InequalityReport", "miscomponent_advection", "verify_coercivity_monotonicity"]


def _advection(space: SpectralSpace, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(u.grad) v`` used by the checks; replaced in fault-injection tests."""
    return space.advection(u, v)


def miscomponent_advection(space: SpectralSpace, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """A deliberately wrong advection that writes ``(u.grad) v_1`` into both components.

    Used as a fault fixture: unlike the true term it does not conserve
    energy, since ``<B(u, u), u>`` picks up ``int (u.grad u_1) u_2``.
    """
    m = space.product_n
    up = space.to_physical(u, m)
    gv1 = space.to_physical(space.gradient(v)[..., :, 0, :, :], m)
    adv = np.einsum("...iyz,...iyz->...yz", up, gv1)
    return space.from_physical(np.stack([adv, adv], axis=-3))


def _B(space, u, v):
    # module-level lookup so that monkeypatching _advection takes effect
    return space.project(_advection(space, u, v))


def rebuild(cs: CoefficientSet, n: int) -> CoefficientSet:
    """The same family and parameters on an ``n``-mode space."""
    sp = SpectralSpace(n)
    c1 = CovarianceSpec(sp, cs.cov_slow.alpha, cs.cov_slow.amplitude)
    c2 = CovarianceSpec(sp, cs.cov_fast.alpha, cs.cov_fast.amplitude)
    return builtin(cs.name, sp, c1, c2, **dict(cs.params))


def coercivity_ratio(cs: CoefficientSet, u, v, eps: float, nu: float = 1.0) -> np.ndarray:
    sp = cs.space
    h1u, h1v = sp.sobolev_sq(u, 1.0), sp.sobolev_sq(v, 1.0)
    lhs = (
        -nu * h1u
        - sp.inner(_B(sp, u, u), u)
        + sp.inner(cs.f(u, v), u)
        + (-h1v + sp.inner(cs.g(u, v), v)) / eps
        + np.asarray(cs.sigma1(u).hs_norm(cs.cov_slow)) ** 2
        + np.asarray(cs.sigma2(u, v).hs_norm(cs.cov_fast)) ** 2 / eps
    )
    c_eps = 0.5 * min(nu, 1.0 / eps)
    return (lhs + c_eps * (h1u + h1v)) / (1.0 + sp.sobolev_sq(u, 0.0) + sp.sobolev_sq(v, 0.0))


def monotonicity_ratio(cs: CoefficientSet, w1, w2, eps: float, nu: float = 1.0) -> np.ndarray:
    sp = cs.space
    (u1, v1), (u2, v2) = w1, w2
    du, dv = u1 - u2, v1 - v2
    lhs = (
        -nu * sp.sobolev_sq(du, 1.0)
        - sp.sobolev_sq(dv, 1.0) / eps
        + sp.inner(-_B(sp, u1, u1) + _B(sp, u2, u2) + cs.f(u1, v1) - cs.f(u2, v2), du)
        + sp.inner(cs.g(u1, v1) - cs.g(u2, v2), dv) / eps
        + np.asarray((cs.sigma1(u1) - cs.sigma1(u2)).hs_norm(cs.cov_slow)) ** 2
        + np.asarray((cs.sigma2(u1, v1) - cs.sigma2(u2, v2)).hs_norm(cs.cov_fast)) ** 2 / eps
    )
    l4 = sp.lebesgue(u2, 4.0)
    dist = sp.sobolev_sq(du, 0.0) + sp.sobolev_sq(dv, 0.0)
    return lhs / ((1.0 + l4**4) * dist)


def _pairs(cs: CoefficientSet, rng, n: int, scale):
    s = field_sampler(cs.space, scale)
    u1, v1, u2, v2 = s(rng, n), s(rng, n), s(rng, n), s(rng, n)
    # a quarter of the pairs are close, a few have w2 = 0
    near = np.arange(n) % 4 == 1
    eps_ = np.exp(rng.uniform(np.log(1e-3), 0.0, n))[:, None, None, None]
    u1 = np.where(near[:, None, None, None], u2 + eps_ * u1, u1)
    v1 = np.where(near[:, None, None, None], v2 + eps_ * v1, v1)
    zero = np.arange(n) % 16 == 3
    u2 = np.where(zero[:, None, None, None], 0.0, u2)
    v2 = np.where(zero[:, None, None, None], 0.0, v2)
    return (u1, v1), (u2, v2)


class InequalityReport(Table):
    """Fitted constants and violation counts, one row per (inequality, N)."""

    @property
    def violations(self) -> int:
        return int(sum(r["violations"] for r in self.rows))

    @property
    def passed(self) -> bool:
        return bool(self.meta["passed"])


def reference_constant(cs: CoefficientSet, eps: float) -> float:
    """Scale of the positive part allowed by the declared Lipschitz constants.

    ``(L_f_x + L_f_y) + (L_g_x + L_g_y)/eps + L_sigma1^2 + (L_sigma2_x + L_sigma2_y)^2/eps``
    plus the squared noise norms at zero.  Any correct implementation keeps
    both ratios below this value up to sampling luck; it floors the fitted
    constant so that sampled ratios that are all negative still give a
    positive admissible constant.
    """
    L = cs.lipschitz
    z = cs.space.zeros().coeffs
    noise0 = float(np.asarray(cs.sigma1(z).hs_norm(cs.cov_slow)) ** 2
                   + np.asarray(cs.sigma2(z, z).hs_norm(cs.cov_fast)) ** 2 / eps)
    return float(
        L["f_x"] + L["f_y"] + (L["g_x"] + L["g_y"]) / eps + L["sigma1"] ** 2
        + (L["sigma2_x"] + L["sigma2_y"]) ** 2 / eps + noise0
    )


def _check_one(cs, n_samples, eps, nu, seed, test_scale, batch=250):
    rng = np.random.default_rng(seed)
    c_ref = reference_constant(cs, eps)
    out = {}
    for name in ("coercivity", "monotonicity"):
        stats = {}
        for phase, scale in (("train", (1e-2, 1e1)), ("test", (1e-2, test_scale))):
            vals = []
            done = 0
            while done < n_samples:
                b = min(batch, n_samples - done)
                w1, w2 = _pairs(cs, rng, b, scale)
                if name == "coercivity":
                    r = coercivity_ratio(cs, w1[0], w1[1], eps, nu)
                    if done == 0 and phase == "train":
                        z = cs.space.zeros().coeffs[None]
                        r = np.concatenate([r, coercivity_ratio(cs, z, z, eps, nu)])
                else:
                    r = monotonicity_ratio(cs, w1, w2, eps, nu)
                vals.append(r)
                done += b
            stats[phase] = np.concatenate(vals)
        c_fit = float(np.max(stats["train"]))
        c_adm = max(c_fit, c_ref)
        bad = ~np.isfinite(stats["test"]) | (stats["test"] > 2.0 * c_adm)
        out[name] = {"C_fit": c_fit, "C_ref": c_ref, "C_admissible": c_adm,
                     "max_test": float(np.nanmax(stats["test"])), "violations": int(bad.sum()),
                     "n": int(stats["train"].size + stats["test"].size)}
    return out


def verify_coercivity_monotonicity(
    n_samples: int = 1000,
    coeffs: CoefficientSet | None = None,
    *,
    eps: float = 0.1,
    nu: float = 1.0,
    check_n: int | None = 32,
    seed: int = 0,
    test_scale: float = 1e5,
) -> InequalityReport:
    """Sample both inequalities at the coefficient space and at ``check_n``.

    Passing means no violation anywhere and fitted constants at ``check_n``
    within a factor of two of those at the base resolution.
    """
    cs = coeffs or builtin("linear_ou")
    results = {cs.space.n: _check_one(cs, n_samples, eps, nu, seed, test_scale)}
    if check_n and check_n != cs.space.n:
        results[check_n] = _check_one(rebuild(cs, check_n), n_samples, eps, nu, seed, test_scale)
    rows = []
    for n, res in results.items():
        for name, st in res.items():
            rows.append({"inequality": name, "N": n, **st})
    stable = {}
    base = cs.space.n
    for name in ("coercivity", "monotonicity"):
        if check_n and check_n != base:
            ratio = results[check_n][name]["C_admissible"] / results[base][name]["C_admissible"]
            stable[name] = ratio
    violations = sum(r["violations"] for r in rows)
    passed = violations == 0 and all(0.5 <= r <= 2.0 for r in stable.values())
    cols = ["inequality", "N", "C_fit", "C_ref", "C_admissible", "max_test", "violations", "n"]
    meta = {"eps": eps, "nu": nu, "seed": seed, "coefficients": cs.name, "stability_ratios": stable,
            "violations": violations, "passed": passed, "n_samples": n_samples}
    return InequalityReport("inequalities", cols, rows, meta)
