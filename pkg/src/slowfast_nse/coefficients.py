"""Coefficient maps f, g, sigma1, sigma2 and their structural checks.

All maps work on batched coefficient arrays ``(..., 2, N, N)`` and also
accept ``SpectralField`` arguments (returning fields, or ``NoiseMap`` for the
noise coefficients).  Noise coefficients are diagonal modulations: a scalar,
state-dependent gain times the covariance embedding, so their
Hilbert-Schmidt norms are analytic.

Extending: build a :class:`CoefficientSet` directly with your own array-level
callables and declared Lipschitz constants; :func:`lipschitz_estimates` then
checks the declarations empirically.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError
from .spectral import SpectralField, SpectralSpace, random_fields
from .stochastic import CovarianceSpec, trace_h

__all__ = [
    "BUILTIN_SETS",
    "CoefficientSet",
    "NoiseMap",
    "builtin",
    "estimate_lipschitz",
    "field_sampler",
    "lipschitz_estimates",
    "verify_dissipativity",
]


@dataclass(frozen=True, eq=False)
class NoiseMap:
    """Linear map ``w -> gain * profile * w`` on noise increments.

    ``gain`` is a scalar or an array over the batch dimensions; ``profile``
    an optional real modewise multiplier (it commutes with the projector).
    """

    gain: np.ndarray | float
    profile: np.ndarray | None = None

    def __call__(self, w):
        if isinstance(w, SpectralField):
            return SpectralField._wrap(w.space, self(w.coeffs))
        g = np.asarray(self.gain, dtype=float)[..., None, None, None]
        out = g * w
        return out if self.profile is None else self.profile * out

    def hs_norm(self, cov: CovarianceSpec) -> np.ndarray | float:
        """``|sigma|_{L_Q} = sqrt(Tr(sigma Q sigma*))`` on divergence-free fields."""
        q = cov.eigenvalues
        tr = q.sum() if self.profile is None else (self.profile**2 * q).sum()
        return np.abs(self.gain) * np.sqrt(tr)

    def __sub__(self, other: "NoiseMap") -> "NoiseMap":
        if (self.profile is None) != (other.profile is None) or (
            self.profile is not None and not np.array_equal(self.profile, other.profile)
        ):
            raise ValueError("noise maps with different profiles cannot be subtracted")
        return NoiseMap(np.asarray(self.gain) - np.asarray(other.gain), self.profile)


def _fieldwise(fn):
    """Let an array-level map accept SpectralField arguments too."""

    @functools.wraps(fn)
    def wrapper(*args):
        if args and isinstance(args[0], SpectralField):
            space = args[0].space
            out = fn(*(a.coeffs for a in args))
            if isinstance(out, NoiseMap):
                return out if np.ndim(out.gain) == 0 else NoiseMap(float(out.gain), out.profile)
            return SpectralField._wrap(space, out)
        return fn(*args)

    return wrapper


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """The four coefficient maps plus their declared structural constants.

    ``lipschitz`` keys: ``f_x``, ``f_y``, ``g_x``, ``g_y``, ``sigma1``,
    ``sigma2_x``, ``sigma2_y`` (per-argument constants, noise ones measured in
    the Hilbert-Schmidt norm of the matching covariance).
    """

    name: str
    space: SpectralSpace
    cov_slow: CovarianceSpec
    cov_fast: CovarianceSpec
    f: Callable
    g: Callable
    sigma1: Callable
    sigma2: Callable
    lipschitz: Mapping[str, float]
    zeta: float
    params: Mapping[str, float] = field(default_factory=dict)
    averaged_drift: Callable | None = None
    sigma2_growth: float | None = None

    def __post_init__(self):
        for key in ("f_x", "f_y", "g_x", "g_y", "sigma1", "sigma2_x", "sigma2_y"):
            if key not in self.lipschitz:
                raise ConfigError(f"missing declared Lipschitz constant {key!r}")
            if not self.lipschitz[key] >= 0:
                raise ConfigError(f"Lipschitz constant {key} must be nonnegative")
        if not 0.0 < self.zeta < 1.0:
            raise ConfigError(f"growth exponent zeta must lie in (0, 1), got {self.zeta}")

    @property
    def L_f(self) -> float:
        return max(self.lipschitz["f_x"], self.lipschitz["f_y"])

    @property
    def L_g(self) -> float:
        return self.lipschitz["g_y"]

    @property
    def L_sigma1(self) -> float:
        return self.lipschitz["sigma1"]

    @property
    def L_sigma2(self) -> float:
        return self.lipschitz["sigma2_y"]

    @property
    def has_closed_form_average(self) -> bool:
        return self.averaged_drift is not None


def verify_dissipativity(cs, lambda1: float | None = None) -> float:
    """Return the margin ``2*lambda1 - 2*L_g - L_sigma2**2`` (admissible iff > 0)."""
    if lambda1 is None:
        lambda1 = cs.space.lambda1
    if not lambda1 > 0:
        raise ValueError(f"lambda1 must be positive, got {lambda1}")
    return 2.0 * lambda1 - 2.0 * cs.L_g - cs.L_sigma2**2


# -- empirical Lipschitz estimates ------------------------------------------


def field_sampler(space: SpectralSpace, scale=(1e-2, 1e1)):
    """Random fields with log-uniform norms in ``scale`` and mixed spectra."""
    lo, hi = np.log(scale[0]), np.log(scale[1])

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        c = random_fields(space, rng, n, decay=float(rng.choice([1.0, 2.0])))
        return c * np.exp(rng.uniform(lo, hi, n))[:, None, None, None]

    return sample


def _distance(space, a, b, cov):
    if isinstance(a, NoiseMap):
        if cov is None:
            raise ValueError("a covariance is needed to measure noise-map differences")
        return np.broadcast_to((a - b).hs_norm(cov), np.shape(a.gain))
    return np.sqrt(space.sobolev_sq(a - b, 0.0))


def estimate_lipschitz(fn, sampler, n_pairs: int, *, space: SpectralSpace | None = None, cov=None, seed: int = 0, batch: int = 256) -> float:
    """Largest observed ``|fn(u) - fn(v)| / |u - v|`` over random pairs.

    Half of the pairs are independent draws, half are ``u`` and a random
    perturbation of ``u`` at a random scale.  Coincident pairs are skipped.
    The result is a lower bound for the true constant.
    """
    if n_pairs < 2:
        raise ValueError("need at least two pairs")
    rng = np.random.default_rng(seed)
    best = 0.0
    done = 0
    while done < n_pairs:
        b = min(batch, n_pairs - done)
        u = sampler(rng, b)
        sp = space
        if sp is None:
            sp = SpectralSpace(u.shape[-1])
        v = sampler(rng, b)
        near = np.arange(b) % 2 == 1
        scale = np.exp(rng.uniform(np.log(1e-4), 0.0, b))[:, None, None, None]
        v = np.where(near[:, None, None, None], u + scale * v, v)
        du = np.sqrt(sp.sobolev_sq(u - v, 0.0))
        dfu = _distance(sp, fn(u), fn(v), cov)
        ok = du > 0
        if ok.any():
            best = max(best, float(np.max(dfu[ok] / du[ok])))
        done += b
    return best


def lipschitz_estimates(cs: CoefficientSet, n_pairs: int = 10_000, seed: int = 0, n_fixed: int = 8) -> dict[str, float]:
    """Per-argument estimates for every declared constant of ``cs``."""
    sp = cs.space
    sampler = field_sampler(sp)
    rng = np.random.default_rng(seed + 7919)
    fixed = sampler(rng, n_fixed)
    per = max(2, n_pairs // n_fixed)
    out = {k: 0.0 for k in cs.lipschitz}
    for i, z in enumerate(fixed):
        s = seed + 31 * i
        checks = {
            "f_x": (lambda u: cs.f(u, z), None),
            "f_y": (lambda u: cs.f(z, u), None),
            "g_x": (lambda u: cs.g(u, z), None),
            "g_y": (lambda u: cs.g(z, u), None),
            "sigma1": (lambda u: cs.sigma1(u), cs.cov_slow),
            "sigma2_x": (lambda u: cs.sigma2(u, z), cs.cov_fast),
            "sigma2_y": (lambda u: cs.sigma2(z, u), cs.cov_fast),
        }
        for key, (fn, cov) in checks.items():
            est = estimate_lipschitz(fn, sampler, per, space=sp, cov=cov, seed=s)
            out[key] = max(out[key], est)
    return out


# -- built-in families -------------------------------------------------------


def _l2(space: SpectralSpace, c: np.ndarray) -> np.ndarray:
    return np.sqrt(space.sobolev_sq(c, 0.0))


def _mode_mask(space: SpectralSpace, k) -> np.ndarray:
    m = np.zeros((space.n, space.n), dtype=bool)
    m[k[0] % space.n, k[1] % space.n] = True
    m[(-k[0]) % space.n, (-k[1]) % space.n] = True
    if not (m & space.retained).any():
        raise ConfigError(f"mode {tuple(k)} is not retained at N={space.n}")
    return m


def _radial_clamp(c: np.ndarray, radius: float) -> np.ndarray:
    """Modewise projection of each complex 2-vector onto the ball of ``radius``."""
    mag = np.sqrt(np.abs(c[..., 0, :, :]) ** 2 + np.abs(c[..., 1, :, :]) ** 2)
    factor = np.where(mag > radius, radius / np.where(mag > 0, mag, 1.0), 1.0)
    return c * factor[..., None, :, :]


def _check_params(name: str, given: Mapping, defaults: Mapping) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {name!r}: {', '.join(sorted(unknown))}")
    out = dict(defaults)
    for k, v in given.items():
        try:
            out[k] = type(defaults[k])(v) if not isinstance(defaults[k], tuple) else tuple(int(a) for a in v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"parameter {name}.{k}: {exc}") from None
    return out


LINEAR_OU_DEFAULTS = {
    "c1": -0.5,
    "c2": 1.0,
    "h_gain": 1.0,
    "h_mode": (1, 0),
    "a0": 0.5,
    "a1": 0.25,
    "r_max": 1.0,
    "b0": 0.5,
}

SATURATING_DEFAULTS = {
    **LINEAR_OU_DEFAULTS,
    "kappa": 0.25,
    "sat_radius": 0.25,
    "b1": 0.25,
    "L_sigma2": 0.5,
    "r0": 1.0,
    "zeta": 0.5,
}

DECOUPLED_DEFAULTS = {**LINEAR_OU_DEFAULTS, "forcing": 0.5}


def _common(space, p, cov_slow):
    h_mask = _mode_mask(space, p["h_mode"]) & space.retained
    tr1 = np.sqrt(trace_h(cov_slow))

    def h(x):
        return p["h_gain"] * np.where(h_mask, x, 0.0)

    @_fieldwise
    def sigma1(x):
        return NoiseMap(p["a0"] + p["a1"] * np.minimum(_l2(space, x), p["r_max"]))

    return h, sigma1, abs(p["a1"]) * tr1


def _linear_ou(space, cov_slow, cov_fast, params):
    p = _check_params("linear_ou", params, LINEAR_OU_DEFAULTS)
    h, sigma1, l_s1 = _common(space, p, cov_slow)
    inv = space.inv_eigenvalues

    @_fieldwise
    def f(x, y):
        return p["c1"] * x + p["c2"] * y

    @_fieldwise
    def g(x, y):
        return h(x) + 0.0 * y

    @_fieldwise
    def sigma2(x, y):
        batch = np.broadcast_shapes(np.shape(x)[:-3], np.shape(y)[:-3])
        return NoiseMap(np.full(batch, p["b0"]) if batch else p["b0"])

    @_fieldwise
    def fbar(x):
        # invariant mean of the frozen OU equation is (-A)^{-1} h(x)
        return p["c1"] * x + p["c2"] * inv * h(x)

    lip = {
        "f_x": abs(p["c1"]),
        "f_y": abs(p["c2"]),
        "g_x": abs(p["h_gain"]),
        "g_y": 0.0,
        "sigma1": l_s1,
        "sigma2_x": 0.0,
        "sigma2_y": 0.0,
    }
    return CoefficientSet(
        "linear_ou", space, cov_slow, cov_fast, f, g, sigma1, sigma2, lip, 0.5, p, fbar,
        sigma2_growth=abs(p["b0"]) * np.sqrt(trace_h(cov_fast)),
    )


def _saturating(space, cov_slow, cov_fast, params):
    p = _check_params("saturating", params, SATURATING_DEFAULTS)
    h, sigma1, l_s1 = _common(space, p, cov_slow)
    tr2 = np.sqrt(trace_h(cov_fast))
    if p["r0"] <= 0 or p["sat_radius"] <= 0:
        raise ConfigError("saturating: r0 and sat_radius must be positive")
    # psi(r) = sqrt(r + r0) - sqrt(r0) has Lipschitz constant 1/(2 sqrt(r0))
    b2 = 2.0 * np.sqrt(p["r0"]) * p["L_sigma2"] / tr2 if tr2 > 0 else 0.0

    def sat(y):
        return _radial_clamp(y, p["sat_radius"])

    @_fieldwise
    def f(x, y):
        return p["c1"] * x + p["c2"] * sat(y)

    @_fieldwise
    def g(x, y):
        return -p["kappa"] * sat(y) + h(x)

    @_fieldwise
    def sigma2(x, y):
        rx = np.minimum(_l2(space, x), p["r_max"])
        ry = _l2(space, y)
        return NoiseMap(p["b0"] + p["b1"] * rx + b2 * (np.sqrt(ry + p["r0"]) - np.sqrt(p["r0"])))

    lip = {
        "f_x": abs(p["c1"]),
        "f_y": abs(p["c2"]),
        "g_x": abs(p["h_gain"]),
        "g_y": abs(p["kappa"]),
        "sigma1": l_s1,
        "sigma2_x": abs(p["b1"]) * tr2,
        "sigma2_y": abs(p["L_sigma2"]),
    }
    # |sigma2|_LQ <= (|b0| + |b1| r_max + |b2| |y|^(1/2)) * sqrt(Tr Q)
    growth = (abs(p["b0"]) + abs(p["b1"]) * p["r_max"] + abs(b2)) * tr2
    return CoefficientSet(
        "saturating", space, cov_slow, cov_fast, f, g, sigma1, sigma2, lip, p["zeta"], p,
        None, sigma2_growth=growth,
    )


def _decoupled(space, cov_slow, cov_fast, params):
    p = _check_params("decoupled", params, DECOUPLED_DEFAULTS)
    forcing_params = {k: v for k, v in p.items() if k != "forcing"}
    base = _linear_ou(space, cov_slow, cov_fast, forcing_params)
    forcing = p["forcing"] * space.mode((0, 1)).coeffs

    @_fieldwise
    def f0(x):
        return p["c1"] * x + forcing

    @_fieldwise
    def f(x, y):
        return f0(x) + 0.0 * y

    lip = dict(base.lipschitz, f_y=0.0)
    return CoefficientSet(
        "decoupled", space, cov_slow, cov_fast, f, base.g, base.sigma1, base.sigma2, lip, 0.5, p,
        f0, sigma2_growth=base.sigma2_growth,
    )


BUILTIN_SETS = {"linear_ou": _linear_ou, "saturating": _saturating, "decoupled": _decoupled}


def builtin(
    name: str,
    space: SpectralSpace | None = None,
    cov_slow: CovarianceSpec | None = None,
    cov_fast: CovarianceSpec | None = None,
    **params,
) -> CoefficientSet:
    """Construct a shipped coefficient family.

    ``linear_ou``
        ``f = c1 x + c2 y``, ``g = h(x)`` with ``h`` the projection onto the
        modes ``+-h_mode`` times ``h_gain``; constant ``sigma2``.  The frozen
        equation is Ornstein-Uhlenbeck, so the averaged drift is
        ``c1 x + c2 (-A)^{-1} h(x)`` in closed form.
    ``saturating``
        ``g = -kappa sat(y) + h(x)`` with ``sat`` a modewise radial clamp, and
        ``sigma2`` growing like ``|y|^(1/2)``; Lipschitz in ``y`` with constant
        ``L_sigma2``.
    ``decoupled``
        ``f = f0(x) = c1 x + forcing * shear`` does not see ``y``; the averaged
        drift is ``f0`` itself.
    """
    try:
        factory = BUILTIN_SETS[name]
    except KeyError:
        raise ConfigError(f"unknown coefficient set {name!r}; choose from {sorted(BUILTIN_SETS)}") from None
    space = space or SpectralSpace(16)
    cov_slow = cov_slow or CovarianceSpec(space)
    cov_fast = cov_fast or CovarianceSpec(space)
    if cov_slow.space != space or cov_fast.space != space:
        raise ConfigError("covariances must live on the coefficient space")
    return factory(space, cov_slow, cov_fast, params)
