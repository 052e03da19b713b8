"""Time integrators for the slow-fast system, the frozen and averaged
equations, and the Khasminskii auxiliary pair.

Every integrator is the same exponential Euler scheme: the linear part is
integrated exactly mode by mode, the drift (``B``, ``f``, ``g``) is frozen at
the left point and integrated against the exact linear flow, and the noise
term is the exact stochastic convolution of the left-point noise map.  For a
mode with rate ``r`` (``nu |k|^2`` for the slow equation, ``|k|^2 / eps`` for
the fast one) and time step ``h`` one step reads

    u' = e^{-r h} u + s (1 - e^{-r h}) / r * N(u) + sqrt(s) c(r h) * sigma(u) dW

with ``s`` the time-scale factor (1 or ``1/eps``) and
``c(z) = sqrt((1 - e^{-2z}) / (2z))``.  The last factor turns an increment
of variance ``q h`` into the exact variance of the convolution, so the
Ornstein-Uhlenbeck frozen equation is sampled exactly in law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .coefficients import CoefficientSet, verify_dissipativity
from .errors import AdmissibilityError, BlowUpError, ConfigError
from .spectral import SpectralField, SpectralSpace
from .stochastic import CovarianceSpec, NoiseStream, sample_increments

__all__ = [
    "AuxiliaryRun",
    "AuxiliaryState",
    "CoupledEnsemble",
    "FbarEstimator",
    "SlowFastState",
    "default_dt",
    "estimate_fbar",
    "run_auxiliary",
    "step_averaged",
    "step_frozen",
    "step_slow_fast",
]


def default_dt(eps: float, cfl: float = 0.1, dt_max: float = 1e-3) -> float:
    """``min(cfl * eps, dt_max)``: keeps the explicit fast drift increment O(cfl)."""
    return min(cfl * eps, dt_max)


@dataclass(frozen=True)
class StepFactors:
    decay: np.ndarray
    drift: np.ndarray
    noise: np.ndarray


@lru_cache(maxsize=256)
def _factors(n: int, dt: float, scale: float, nu: float) -> StepFactors:
    sp = SpectralSpace(n)
    r = np.where(sp.retained, nu * scale * sp.eigenvalues, 1.0)
    z = r * dt
    decay = np.exp(-z)
    drift = -scale * np.expm1(-z) / r
    noise = math.sqrt(scale) * np.sqrt(-np.expm1(-2.0 * z) / (2.0 * z))
    keep = sp.retained
    out = StepFactors(np.where(keep, decay, 0.0), np.where(keep, drift, 0.0), np.where(keep, noise, 0.0))
    for a in (out.decay, out.drift, out.noise):
        a.setflags(write=False)
    return out


def step_factors(space: SpectralSpace, dt: float, scale: float = 1.0, nu: float = 1.0) -> StepFactors:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return _factors(space.n, float(dt), float(scale), float(nu))


def _advance(fac: StepFactors, u, drift, noise_map, dW, space: SpectralSpace, scaled: bool = False):
    """One exponential Euler step; ``scaled`` means ``dW`` already carries ``fac.noise``."""
    out = space.project(drift)
    out *= fac.drift
    out += fac.decay * u
    if noise_map is not None:
        # noise maps are diagonal, so they commute with the modewise factor
        out += noise_map(dW if scaled else fac.noise * dW)
    return out


def _finite(a: np.ndarray) -> np.ndarray:
    return np.isfinite(a).all(axis=(-3, -2, -1))


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"eps must lie in (0, 1), got {eps}")


# -- slow-fast system ---------------------------------------------------------


@dataclass(frozen=True)
class SlowFastState:
    """State of one coupled path; the streams are owned by this path."""

    t: float
    X: SpectralField
    Y: SpectralField
    slow: NoiseStream
    fast: NoiseStream


def _covs(coeffs: CoefficientSet, covs) -> tuple[CovarianceSpec, CovarianceSpec]:
    if covs is None:
        return coeffs.cov_slow, coeffs.cov_fast
    return covs


def _slow_fast_arrays(space, coeffs, x, y, dW1, dW2, dt, eps, nu, nonlinear):
    f1 = step_factors(space, dt, 1.0, nu)
    f2 = step_factors(space, dt, 1.0 / eps, 1.0)
    drift_x = coeffs.f(x, y)
    if nonlinear:
        # projected once together with f inside _advance
        drift_x = drift_x - space.advection(x, x)
    x_new = _advance(f1, x, drift_x, coeffs.sigma1(x), dW1, space)
    y_new = _advance(f2, y, coeffs.g(x, y), coeffs.sigma2(x, y), dW2, space)
    return x_new, y_new


def step_slow_fast(
    state: SlowFastState,
    dt: float,
    eps: float,
    coeffs: CoefficientSet,
    covs=None,
    *,
    nu: float = 1.0,
    nonlinear: bool = True,
) -> SlowFastState:
    """One exponential Euler-Maruyama step of the coupled system.

    The state's noise streams are advanced in place; a new state is returned.
    Raises ``BlowUpError`` if the step produces non-finite values.
    """
    _check_eps(eps)
    space = state.X.space
    c1, c2 = _covs(coeffs, covs)
    dW1 = sample_increments(c1, dt, [state.slow])[0]
    dW2 = sample_increments(c2, dt, [state.fast])[0]
    x, y = _slow_fast_arrays(space, coeffs, state.X.coeffs, state.Y.coeffs, dW1, dW2, dt, eps, nu, nonlinear)
    t = state.t + dt
    if not (_finite(x) and _finite(y)):
        raise BlowUpError(t, {"|X|": float(np.sqrt(space.sobolev_sq(x, 0))), "|Y|": float(np.sqrt(space.sobolev_sq(y, 0)))})
    return SlowFastState(t, SpectralField._wrap(space, x), SpectralField._wrap(space, y), state.slow, state.fast)


# -- frozen equation and averaged drift ---------------------------------------


def _frozen_arrays(space, coeffs, y, x, dW, dt):
    fac = step_factors(space, dt, 1.0, 1.0)
    return _advance(fac, y, coeffs.g(x, y), coeffs.sigma2(x, y), dW, space)


def step_frozen(
    y: SpectralField,
    x_frozen: SpectralField,
    dt: float,
    coeffs: CoefficientSet,
    cov: CovarianceSpec | None,
    stream: NoiseStream,
) -> SpectralField:
    """One step of ``dY = [AY + g(x, Y)] dt + sigma2(x, Y) dW`` at fixed ``x``."""
    if stream.role != "frozen":
        raise ValueError("the frozen equation must be driven by a 'frozen' stream")
    cov = cov or coeffs.cov_fast
    dW = sample_increments(cov, dt, [stream])[0]
    out = _frozen_arrays(y.space, coeffs, y.coeffs, x_frozen.coeffs, dW, dt)
    if not _finite(out):
        raise BlowUpError(float("nan"), {"|Y|": float("nan")})
    return SpectralField._wrap(y.space, out)


@dataclass
class FbarEstimator:
    """How the averaged drift ``fbar(x) = int f(x, y) mu^x(dy)`` is evaluated.

    ``closed_form`` uses the coefficient set's analytic average.
    ``time_average`` runs one frozen path for ``burn_in`` and averages
    ``f(x, Y)`` over the next ``t_erg`` time units.  ``warm_start`` keeps the
    last frozen state between calls, relaxes it for ``relax_steps`` steps
    at the new ``x`` and then averages over ``window_steps`` steps.
    """

    mode: str
    dt: float = 0.02
    t_erg: float = 50.0
    burn_in: float = 5.0
    relax_steps: int = 0
    window_steps: int = 1
    state: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("closed_form", "time_average", "warm_start"):
            raise ConfigError(f"unknown fbar mode {self.mode!r}")
        if not self.dt > 0:
            raise ConfigError("fbar frozen-equation step must be positive")

    @classmethod
    def closed_form(cls, coeffs: CoefficientSet) -> "FbarEstimator":
        if not coeffs.has_closed_form_average:
            raise ConfigError(f"coefficient set {coeffs.name!r} has no closed-form average")
        return cls("closed_form")

    @classmethod
    def time_average(cls, t_erg: float = 50.0, burn_in: float = 5.0, dt: float = 0.02) -> "FbarEstimator":
        return cls("time_average", dt=dt, t_erg=t_erg, burn_in=burn_in)

    @classmethod
    def warm_start(
        cls,
        relax_steps: int | None = None,
        window_steps: int = 10,
        dt: float = 0.02,
        rate: float | None = None,
        initial: np.ndarray | None = None,
    ) -> "FbarEstimator":
        """``relax_steps`` defaults to ``ceil(5 / (rate * dt))`` given an ergodic rate."""
        if relax_steps is None:
            if rate is None or not rate > 0:
                raise ConfigError("warm_start needs relax_steps or a positive ergodic rate")
            relax_steps = int(math.ceil(5.0 / (rate * dt)))
        return cls("warm_start", dt=dt, relax_steps=int(relax_steps), window_steps=int(window_steps), state=initial)

    @classmethod
    def default_for(cls, coeffs: CoefficientSet, rate: float = 1.0, dt: float = 0.02) -> "FbarEstimator":
        if coeffs.has_closed_form_average:
            return cls.closed_form(coeffs)
        return cls.warm_start(dt=dt, rate=rate)


def _require_admissible(coeffs: CoefficientSet) -> None:
    margin = verify_dissipativity(coeffs)
    if not margin > 0:
        raise AdmissibilityError(margin)


def fbar_batch(est: FbarEstimator, x: np.ndarray, coeffs: CoefficientSet, cov, streams: Sequence[NoiseStream]) -> np.ndarray:
    """Batched averaged drift at ``x`` of shape ``(M, 2, N, N)``."""
    _require_admissible(coeffs)
    space = coeffs.space
    if est.mode == "closed_form":
        if not coeffs.has_closed_form_average:
            raise ConfigError(f"coefficient set {coeffs.name!r} has no closed-form average")
        return coeffs.averaged_drift(x)
    cov = cov or coeffs.cov_fast
    if est.mode == "time_average":
        y = np.zeros_like(x) if est.state is None else np.broadcast_to(est.state, x.shape).copy()
        n_burn = int(round(est.burn_in / est.dt))
        n_avg = max(1, int(round(est.t_erg / est.dt)))
    else:
        y = np.zeros_like(x) if est.state is None else np.array(np.broadcast_to(est.state, x.shape))
        n_burn, n_avg = est.relax_steps, max(1, est.window_steps)
    acc = np.zeros_like(x)
    for i in range(n_burn + n_avg):
        dW = sample_increments(cov, est.dt, streams)
        y = _frozen_arrays(space, coeffs, y, x, dW, est.dt)
        if i >= n_burn:
            acc += coeffs.f(x, y)
    if not np.isfinite(acc).all():
        raise BlowUpError(float("nan"), {"fbar": float("nan")})
    if est.mode == "warm_start":
        est.state = y
    return acc / n_avg


def estimate_fbar(
    est: FbarEstimator,
    x: SpectralField,
    coeffs: CoefficientSet,
    cov: CovarianceSpec | None,
    stream: NoiseStream | None,
) -> SpectralField:
    """Averaged drift at a single ``x`` (the stream is unused for closed forms)."""
    if est.mode != "closed_form" and (stream is None or stream.role != "frozen"):
        raise ValueError("estimating fbar needs a 'frozen' noise stream")
    streams = [] if stream is None else [stream]
    if est.mode == "warm_start" and est.state is not None and est.state.ndim == 3:
        est.state = est.state[None]
    out = fbar_batch(est, x.coeffs[None], coeffs, cov, streams)
    return SpectralField._wrap(x.space, out[0])


def step_averaged(
    xbar: SpectralField,
    dt: float,
    est: FbarEstimator,
    coeffs: CoefficientSet,
    cov: CovarianceSpec | None,
    stream: NoiseStream,
    frozen_stream: NoiseStream | None = None,
    *,
    nu: float = 1.0,
    nonlinear: bool = True,
) -> SpectralField:
    """One step of the averaged equation driven by the slow stream ``stream``."""
    space = xbar.space
    cov = cov or coeffs.cov_slow
    x = xbar.coeffs
    drift = estimate_fbar(est, xbar, coeffs, None, frozen_stream).coeffs
    if nonlinear:
        drift = drift - space.advection(x, x)
    dW = sample_increments(cov, dt, [stream])[0]
    out = _advance(step_factors(space, dt, 1.0, nu), x, drift, coeffs.sigma1(x), dW, space)
    if not _finite(out):
        raise BlowUpError(float("nan"), {"|Xbar|": float("nan")})
    return SpectralField._wrap(space, out)


# -- batched coupled ensemble ---------------------------------------------------


class CoupledEnsemble:
    """Monte Carlo paths of ``(X, Y)`` with optional coupled companions.

    Companions share the slow (and fast) noise increments of their path:

    * ``averaged``: the averaged equation ``Xbar`` (same slow noise);
    * ``delta_steps``: the auxiliary pair ``(Xhat, Yhat)`` whose fast part
      sees ``X`` frozen at the last grid point ``k * delta``.

    Samples whose state becomes non-finite are marked dead, zeroed and
    excluded through ``alive``; their streams keep advancing so the other
    samples are unaffected.
    """

    def __init__(
        self,
        coeffs: CoefficientSet,
        *,
        eps: float,
        dt: float,
        x0,
        y0,
        samples: Sequence[int],
        root_seed: int,
        nu: float = 1.0,
        nonlinear: bool = True,
        averaged: FbarEstimator | None = None,
        delta_steps: int | None = None,
        covs=None,
    ):
        _check_eps(eps)
        self.coeffs = coeffs
        self.space = coeffs.space
        self.eps = float(eps)
        self.dt = float(dt)
        self.nu = float(nu)
        self.nonlinear = nonlinear
        self.cov_slow, self.cov_fast = _covs(coeffs, covs)
        self.samples = list(samples)
        m = len(self.samples)
        shape = (m,) + self.space.shape
        as_arr = lambda v: np.array(np.broadcast_to(v.coeffs if isinstance(v, SpectralField) else v, shape), dtype=complex)
        self.X = as_arr(x0)
        self.Y = as_arr(y0)
        self.slow = [NoiseStream(root_seed, s, "slow") for s in self.samples]
        self.fast = [NoiseStream(root_seed, s, "fast") for s in self.samples]
        self.averaged = averaged
        self.Xbar = self.X.copy() if averaged is not None else None
        self.frozen = [NoiseStream(root_seed, s, "frozen") for s in self.samples] if averaged is not None else None
        if delta_steps is not None and delta_steps < 1:
            raise ConfigError("delta must be at least one time step")
        self.delta_steps = delta_steps
        if delta_steps is not None:
            self.Xhat = self.X.copy()
            self.Yhat = self.Y.copy()
            self.anchor = self.X.copy()
        else:
            self.Xhat = self.Yhat = self.anchor = None
        self.alive = np.ones(m, dtype=bool)
        self.death_time = np.full(m, np.nan)
        self.step_index = 0
        self.t = 0.0

    def _fields(self):
        return [a for a in (self.X, self.Y, self.Xbar, self.Xhat, self.Yhat) if a is not None]

    def step(self) -> None:
        sp, co, dt = self.space, self.coeffs, self.dt
        f1 = step_factors(sp, dt, 1.0, self.nu)
        f2 = step_factors(sp, dt, 1.0 / self.eps, 1.0)
        dW1 = sample_increments(self.cov_slow, dt, self.slow)
        dW2 = sample_increments(self.cov_fast, dt, self.fast)
        if self.delta_steps is not None and self.step_index % self.delta_steps == 0:
            self.anchor = self.X.copy()

        slow_states = [self.X]
        if self.Xbar is not None:
            slow_states.append(self.Xbar)
        if self.Xhat is not None:
            slow_states.append(self.Xhat)
        if self.nonlinear:
            stacked = np.concatenate(slow_states)
            bs = np.split(sp.advection(stacked, stacked), len(slow_states))
        else:
            bs = [0.0] * len(slow_states)

        dW1 *= f1.noise
        dW2 *= f2.noise
        X, Y = self.X, self.Y
        x_new = _advance(f1, X, co.f(X, Y) - bs[0], co.sigma1(X), dW1, sp, True)
        y_new = _advance(f2, Y, co.g(X, Y), co.sigma2(X, Y), dW2, sp, True)
        i = 1
        if self.Xbar is not None:
            fb = fbar_batch(self.averaged, self.Xbar, co, self.cov_fast, self.frozen)
            self.Xbar = _advance(f1, self.Xbar, fb - bs[i], co.sigma1(self.Xbar), dW1, sp, True)
            i += 1
        if self.Xhat is not None:
            a = self.anchor
            xh = _advance(f1, self.Xhat, co.f(a, self.Yhat) - bs[i], co.sigma1(self.Xhat), dW1, sp, True)
            self.Yhat = _advance(f2, self.Yhat, co.g(a, self.Yhat), co.sigma2(a, self.Yhat), dW2, sp, True)
            self.Xhat = xh
        self.X, self.Y = x_new, y_new
        self.step_index += 1
        self.t = self.step_index * dt

        ok = np.ones_like(self.alive)
        for a in self._fields():
            ok &= _finite(a)
        newly_dead = self.alive & ~ok
        if newly_dead.any():
            self.death_time[newly_dead] = self.t
            self.alive &= ok
            for a in self._fields():
                a[~self.alive] = 0.0
            if self.averaged is not None and self.averaged.state is not None:
                self.averaged.state[~self.alive] = 0.0

    def run(self, n_steps: int, observers: Sequence[Callable[["CoupledEnsemble"], None]] = ()) -> None:
        """Advance ``n_steps``; observers are called at the start and after every step."""
        if self.step_index == 0:
            for obs in observers:
                obs(self)
        for _ in range(int(n_steps)):
            self.step()
            for obs in observers:
                obs(self)

    @property
    def attrition(self) -> int:
        return int((~self.alive).sum())


class Recorder:
    """Observer storing named per-sample scalars at every recorded step."""

    def __init__(self, **quantities: Callable[[CoupledEnsemble], np.ndarray]):
        self.quantities = quantities
        self.times: list[float] = []
        self.data: dict[str, list[np.ndarray]] = {k: [] for k in quantities}

    def __call__(self, ens: CoupledEnsemble) -> None:
        self.times.append(ens.t)
        for k, fn in self.quantities.items():
            self.data[k].append(np.asarray(fn(ens), dtype=float))

    def array(self, name: str) -> np.ndarray:
        """Recorded values, shape ``(n_records, M)``."""
        return np.array(self.data[name])


def sq_norm(attr: str, other: str | None = None, s: float = 0.0):
    """Recorder quantity ``||ens.attr - ens.other||_s^2`` per sample."""

    def fn(ens):
        a = getattr(ens, attr)
        if other is not None:
            a = a - getattr(ens, other)
        return ens.space.sobolev_sq(a, s)

    return fn


# -- Khasminskii auxiliary process ----------------------------------------------


@dataclass(frozen=True)
class AuxiliaryState:
    t: float
    X_hat: SpectralField
    Y_hat: SpectralField
    delta: float
    frozen_anchor: SpectralField
    anchor_index: int


@dataclass
class AuxiliaryRun:
    """Recorded auxiliary run: gap time series and anchor-point snapshots."""

    times: np.ndarray
    gap_y: np.ndarray
    gap_x: np.ndarray
    states: list[AuxiliaryState]
    slow_fast: list[SlowFastState]

    def integrated_gap_y(self, T: float | None = None) -> float:
        """Left Riemann sum of ``|Y - Yhat|^2`` over ``[0, T]``."""
        dt = self.times[1] - self.times[0]
        keep = self.times[:-1] < (self.times[-1] if T is None else T) - 1e-12
        return float(np.sum(self.gap_y[:-1][keep]) * dt)

    def sup_gap_x(self, T: float | None = None) -> float:
        keep = self.times <= (self.times[-1] if T is None else T) + 1e-12
        return float(np.max(self.gap_x[keep]))


def steps_per(delta: float, dt: float) -> int:
    """``delta / dt`` as an integer, or ``ConfigError`` if it is not one."""
    k = delta / dt
    r = int(round(k))
    if r < 1 or abs(k - r) > 1e-9 * max(k, 1.0):
        raise ConfigError(f"delta={delta!r} is not an integer multiple of dt={dt!r}")
    return r


def run_auxiliary(
    x: SpectralField,
    y: SpectralField,
    delta: float | None,
    eps: float,
    T: float,
    coeffs: CoefficientSet,
    covs=None,
    *,
    dt: float,
    root_seed: int,
    sample: int = 0,
    nu: float = 1.0,
    nonlinear: bool = True,
) -> AuxiliaryRun:
    """Co-evolve ``(X, Y)`` and ``(Xhat, Yhat)`` on the same noise paths.

    ``delta`` defaults to ``eps ** (1/3)`` and must be a multiple of ``dt``.
    """
    if delta is None:
        delta = eps ** (1.0 / 3.0)
    m = steps_per(delta, dt)
    n_steps = int(math.ceil(T / dt - 1e-9))
    ens = CoupledEnsemble(
        coeffs, eps=eps, dt=dt, x0=x, y0=y, samples=[sample], root_seed=root_seed,
        nu=nu, nonlinear=nonlinear, delta_steps=m, covs=covs,
    )
    rec = Recorder(gap_y=sq_norm("Y", "Yhat"), gap_x=sq_norm("X", "Xhat"))
    states: list[AuxiliaryState] = []
    path: list[SlowFastState] = []
    sp = coeffs.space

    def snapshot(e: CoupledEnsemble) -> None:
        if e.step_index % m == 0 or e.step_index == n_steps:
            k = e.step_index // m
            anchor = e.X if e.step_index % m == 0 else e.anchor
            states.append(AuxiliaryState(e.t, SpectralField._wrap(sp, e.Xhat[0]), SpectralField._wrap(sp, e.Yhat[0]),
                                         delta, SpectralField._wrap(sp, anchor[0]), k))
            path.append(SlowFastState(e.t, SpectralField._wrap(sp, e.X[0]), SpectralField._wrap(sp, e.Y[0]),
                                      e.slow[0].copy(), e.fast[0].copy()))

    ens.run(n_steps, [rec, snapshot])
    if not ens.alive[0]:
        raise BlowUpError(float(ens.death_time[0]), {"sample": sample})
    return AuxiliaryRun(np.array(rec.times), rec.array("gap_y")[:, 0], rec.array("gap_x")[:, 0], states, path)
