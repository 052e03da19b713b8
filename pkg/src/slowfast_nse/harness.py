"""Monte Carlo experiments: strong averaging error, time increments,
auxiliary-process gaps, frozen-equation ergodicity and moment bounds.

All experiments are deterministic functions of the config: sample ``s``
always uses the streams ``(seed, s, role)``, reductions run in sample order,
and repeated calls give bit-identical numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .dynamics import CoupledEnsemble, _advance, step_factors
from .errors import BlowUpError, ConfigError
from .report import ConvergenceReport, Table, fit_loglog, mc_mean
from .spectral import SpectralField
from .stochastic import NoiseStream, sample_increments

__all__ = [
    "ErgodicityResult",
    "SweepResult",
    "clear_cache",
    "measure_auxiliary_gap",
    "measure_moment_bounds",
    "measure_time_increments",
    "mode_functional",
    "clamped_norm_functional",
    "probe_ergodicity",
    "run_convergence_study",
    "simulate_sweep",
]


def _streams_label(samples: int) -> str:
    return f"slow,fast,frozen:0-{samples - 1}"


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash, "root_seed": cfg.seed, "config": cfg.data, **extra}


# -- coupled eps sweep ------------------------------------------------------------


@dataclass
class SweepResult:
    """Per-sample path statistics of one eps in a coupled run.

    ``sup_*`` are maxima over the step grid of squared H norms; ``energy[p]``
    is the left Riemann sum of ``|X|^(2p-2) ||X||_1^2``; ``mean_*`` are time
    series of sample means over surviving paths.
    """

    eps: float
    dt: float
    delta: float
    n_steps: int
    alive: np.ndarray
    death_time: np.ndarray
    sup_diff: np.ndarray
    sup_x: np.ndarray
    sup_xbar: np.ndarray
    sup_xhat: np.ndarray
    energy: dict
    energy_bar: dict
    gap_y_int: np.ndarray
    gap_x_sup: np.ndarray
    times: np.ndarray
    mean_y: dict = field(default_factory=dict)
    mean_yhat: dict = field(default_factory=dict)


class _SweepObserver:
    def __init__(self, m: int, ps, n_steps: int, dt: float):
        self.ps = tuple(ps)
        self.dt = dt
        self.n_steps = n_steps
        z = lambda: np.zeros(m)
        self.sup_diff, self.sup_x, self.sup_xbar, self.sup_xhat = z(), z(), z(), z()
        self.gap_y, self.gap_x = z(), z()
        self.energy = {p: z() for p in self.ps}
        self.energy_bar = {p: z() for p in self.ps}
        self.times: list[float] = []
        self.mean_y = {p: [] for p in self.ps}
        self.mean_yhat = {p: [] for p in self.ps}

    def __call__(self, e: CoupledEnsemble) -> None:
        sp = e.space
        x2 = sp.sobolev_sq(e.X, 0.0)
        xb2 = sp.sobolev_sq(e.Xbar, 0.0)
        xh2 = sp.sobolev_sq(e.Xhat, 0.0)
        y2 = sp.sobolev_sq(e.Y, 0.0)
        yh2 = sp.sobolev_sq(e.Yhat, 0.0)
        d2 = sp.sobolev_sq(e.X - e.Xbar, 0.0)
        np.maximum(self.sup_diff, d2, out=self.sup_diff)
        np.maximum(self.sup_x, x2, out=self.sup_x)
        np.maximum(self.sup_xbar, xb2, out=self.sup_xbar)
        np.maximum(self.sup_xhat, xh2, out=self.sup_xhat)
        np.maximum(self.gap_x, sp.sobolev_sq(e.X - e.Xhat, 0.0), out=self.gap_x)
        alive = e.alive
        self.times.append(e.t)
        for p in self.ps:
            self.mean_y[p].append(float(np.mean(y2[alive] ** p)) if alive.any() else np.nan)
            self.mean_yhat[p].append(float(np.mean(yh2[alive] ** p)) if alive.any() else np.nan)
        if e.step_index < self.n_steps:
            # left Riemann sums over [0, T)
            self.gap_y += sp.sobolev_sq(e.Y - e.Yhat, 0.0) * self.dt
            h1 = sp.sobolev_sq(e.X, 1.0)
            hb = sp.sobolev_sq(e.Xbar, 1.0)
            for p in self.ps:
                self.energy[p] += x2 ** (p - 1) * h1 * self.dt
                self.energy_bar[p] += xb2 ** (p - 1) * hb * self.dt


_SWEEP_CACHE: dict = {}


def clear_cache() -> None:
    """Forget memoised sweeps (they are keyed by config hash)."""
    _SWEEP_CACHE.clear()


def simulate_sweep(cfg: ExperimentConfig, eps: float, ps=(1, 2)) -> SweepResult:
    """Run ``M`` coupled paths of ``X^eps``, ``Y^eps``, ``Xbar``, ``Xhat``, ``Yhat``.

    ``Xbar`` shares the slow noise of ``X``; the auxiliary pair uses the
    block length ``cfg.delta_for(eps, dt)``.  Results are memoised per
    ``(config hash, eps, ps)``.
    """
    ps = tuple(sorted(set(int(p) for p in ps)))
    key = (cfg.hash, float(eps), ps)
    if key in _SWEEP_CACHE:
        return _SWEEP_CACHE[key]
    dt = cfg.dt_for(eps)
    delta = cfg.delta_for(eps, dt)
    n_steps = int(round(cfg.T / dt))
    x0, y0 = cfg.initial_state()
    cs = cfg.coefficients
    margin_rate = max(1e-3, 0.5 * (2 * cs.space.lambda1 - 2 * cs.L_g - cs.L_sigma2**2))
    ens = CoupledEnsemble(
        cs, eps=eps, dt=dt, x0=x0, y0=y0, samples=range(cfg.samples), root_seed=cfg.seed,
        nu=cfg.nu, nonlinear=cfg.nonlinear, averaged=cfg.fbar_estimator(rate=margin_rate),
        delta_steps=int(round(delta / dt)), covs=cfg.covariances,
    )
    obs = _SweepObserver(cfg.samples, ps, n_steps, dt)
    ens.run(n_steps, [obs])
    res = SweepResult(
        eps=float(eps), dt=dt, delta=delta, n_steps=n_steps, alive=ens.alive.copy(),
        death_time=ens.death_time.copy(), sup_diff=obs.sup_diff, sup_x=obs.sup_x,
        sup_xbar=obs.sup_xbar, sup_xhat=obs.sup_xhat, energy=obs.energy, energy_bar=obs.energy_bar,
        gap_y_int=obs.gap_y, gap_x_sup=obs.gap_x, times=np.array(obs.times),
        mean_y={p: np.array(v) for p, v in obs.mean_y.items()},
        mean_yhat={p: np.array(v) for p, v in obs.mean_yhat.items()},
    )
    if len(_SWEEP_CACHE) > 32:
        _SWEEP_CACHE.clear()
    _SWEEP_CACHE[key] = res
    return res


def _moment_ps(cfg: ExperimentConfig) -> tuple:
    return tuple(sorted(set(int(p) for p in cfg.diag("moments")["p"]) | {1, 2}))


def run_convergence_study(cfg: ExperimentConfig) -> ConvergenceReport:
    """Strong averaging error ``E sup_t |X^eps_t - Xbar_t|^(2p)`` for p = 1, 2.

    The sup runs over every step of the grid.  Paths that blew up are
    excluded from the means and counted as attrition.
    """
    rows = []
    for eps in cfg.eps_list:
        r = simulate_sweep(cfg, eps, _moment_ps(cfg))
        a = r.alive
        err, se = mc_mean(r.sup_diff[a])
        err2, se2 = mc_mean(r.sup_diff[a] ** 2)
        attrition = int((~a).sum())
        rows.append({
            "eps": r.eps, "delta": r.delta, "dt": r.dt, "n_steps": r.n_steps,
            "samples": cfg.samples, "M_effective": int(a.sum()), "err": err, "stderr": se,
            "err_p2": err2, "stderr_p2": se2, "attrition": attrition,
            "usable": attrition <= 0.1 * cfg.samples, "root_seed": cfg.seed,
            "streams": _streams_label(cfg.samples),
        })
    return ConvergenceReport(rows, _meta(cfg, fbar_mode=cfg.fbar_estimator().mode))


def measure_moment_bounds(cfg: ExperimentConfig, ps=None) -> Table:
    """Moments of every process across the eps sweep, one row per ``(eps, p)``.

    ``Xbar`` does not depend on eps, so its moments are taken from the first
    (largest) eps run and repeated in every row.  Boundedness holds when the
    max/min ratio across eps is at most 3 for each moment.
    """
    ps = tuple(sorted(set(int(p) for p in (ps or cfg.diag("moments")["p"]))))
    burn = float(cfg.diag("moments")["burn"])
    sweep_ps = tuple(sorted(set(ps) | set(_moment_ps(cfg))))
    sweeps = [simulate_sweep(cfg, e, sweep_ps) for e in cfg.eps_list]
    ref = sweeps[0]
    cols = ["eps", "p", "E_sup_X", "E_int_X", "sup_E_Y", "E_sup_Xbar", "E_int_Xbar",
            "E_sup_Xhat", "sup_E_Yhat", "M_effective", "root_seed"]
    rows = []
    for r in sweeps:
        a = r.alive
        # a horizon shorter than the burn-in keeps the final time only
        late = r.times >= min(burn, r.times[-1]) - 1e-12
        for p in ps:
            rows.append({
                "eps": r.eps, "p": p,
                "E_sup_X": float(np.mean(r.sup_x[a] ** p)),
                "E_int_X": float(np.mean(r.energy[p][a])),
                "sup_E_Y": float(np.max(r.mean_y[p][late])),
                "E_sup_Xbar": float(np.mean(ref.sup_xbar[ref.alive] ** p)),
                "E_int_Xbar": float(np.mean(ref.energy_bar[p][ref.alive])),
                "E_sup_Xhat": float(np.mean(r.sup_xhat[a] ** p)),
                "sup_E_Yhat": float(np.max(r.mean_yhat[p][late])),
                "M_effective": int(a.sum()), "root_seed": cfg.seed,
            })
    ratios = {}
    for p in ps:
        sub = [row for row in rows if row["p"] == p]
        for c in ("E_sup_X", "E_int_X", "sup_E_Y", "E_sup_Xhat", "sup_E_Yhat"):
            v = np.array([row[c] for row in sub])
            ratios[f"{c}_p{p}"] = float(v.max() / v.min()) if v.min() > 0 else (1.0 if v.max() == 0 else float("inf"))
    passed = all(v <= 3.0 for v in ratios.values())
    return Table("moments", cols, rows, _meta(cfg, ratios=ratios, max_ratio=3.0, bounded=passed, burn=burn))


# -- time increments ------------------------------------------------------------


def _fine_dt(cfg: ExperimentConfig, eps: float, deltas) -> float:
    dmin = min(deltas)
    return dmin / math.ceil(dmin / cfg.dt_target(eps) - 1e-9)


def _default_deltas(cfg: ExperimentConfig, which: str) -> list[float]:
    return [cfg.T * 2.0 ** (-int(j)) for j in cfg.diag(which)["exponents"]]


def measure_time_increments(cfg: ExperimentConfig, deltas=None, eps: float | None = None) -> Table:
    """``E int_0^T |X_t - X_{t(delta)}|^2 dt`` with ``t(delta) = floor(t/delta) delta``.

    All deltas are measured on one run whose step divides the smallest
    delta.  A final row with ``delta = dt`` is included as a consistency
    check (its value is exactly zero on the step grid).
    """
    eps = float(cfg.diag("increments")["eps"] if eps is None else eps)
    deltas = sorted((float(d) for d in (deltas or _default_deltas(cfg, "increments"))), reverse=True)
    dt = _fine_dt(cfg, eps, deltas)
    steps = [int(round(d / dt)) for d in deltas]
    for d, m in zip(deltas, steps):
        if abs(m * dt - d) > 1e-9 * d:
            raise ConfigError(f"delta={d} is not a multiple of dt={dt}")
    if steps[-1] != 1:
        steps.append(1)
    n_steps = int(math.ceil(cfg.T / dt - 1e-9))
    x0, y0 = cfg.initial_state()
    ens = CoupledEnsemble(cfg.coefficients, eps=eps, dt=dt, x0=x0, y0=y0, samples=range(cfg.samples),
                          root_seed=cfg.seed, nu=cfg.nu, nonlinear=cfg.nonlinear, covs=cfg.covariances)
    acc = np.zeros((len(steps), cfg.samples))
    anchors = [None] * len(steps)

    def observe(e: CoupledEnsemble) -> None:
        if e.step_index >= n_steps:
            return
        for i, m in enumerate(steps):
            if e.step_index % m == 0:
                anchors[i] = e.X.copy()
            acc[i] += e.space.sobolev_sq(e.X - anchors[i], 0.0) * dt

    ens.run(n_steps, [observe])
    a = ens.alive
    rows = []
    for i, m in enumerate(steps):
        v, se = mc_mean(acc[i][a])
        rows.append({"delta": m * dt, "steps": m, "value": v, "stderr": se, "M_effective": int(a.sum()),
                     "eps": eps, "dt": dt, "root_seed": cfg.seed})
    main = [r for r in rows if r["steps"] > 1]
    slope, _, res = fit_loglog([r["delta"] for r in main], [r["value"] for r in main])
    monotone = all(b["value"] <= a_["value"] + 2.0 * np.hypot(a_["stderr"], b["stderr"]) for a_, b in zip(main, main[1:]))
    cols = ["delta", "steps", "value", "stderr", "M_effective", "eps", "dt", "root_seed"]
    meta = _meta(cfg, slope=slope, slope_residual=res, monotone=monotone, slope_at_least_0_4=bool(slope >= 0.4),
                 attrition=int((~a).sum()))
    return Table("increments", cols, rows, meta)


# -- auxiliary gaps ------------------------------------------------------------


def measure_auxiliary_gap(cfg: ExperimentConfig, deltas=None, eps: float | None = None) -> Table:
    """``E int_0^T |Y - Yhat|^2 dt`` and ``E sup_t |X - Xhat|^2`` per delta.

    Every delta uses the same step (dividing the smallest delta) and the
    same noise paths; a last row with ``delta = dt`` is appended.
    """
    eps = float(cfg.diag("auxgap")["eps"] if eps is None else eps)
    deltas = sorted((float(d) for d in (deltas or _default_deltas(cfg, "auxgap"))), reverse=True)
    dt = _fine_dt(cfg, eps, deltas)
    steps = [int(round(d / dt)) for d in deltas]
    if steps[-1] != 1:
        steps.append(1)
    n_steps = int(math.ceil(cfg.T / dt - 1e-9))
    x0, y0 = cfg.initial_state()
    rows = []
    for m in steps:
        ens = CoupledEnsemble(cfg.coefficients, eps=eps, dt=dt, x0=x0, y0=y0, samples=range(cfg.samples),
                              root_seed=cfg.seed, nu=cfg.nu, nonlinear=cfg.nonlinear, delta_steps=m,
                              covs=cfg.covariances)
        gy = np.zeros(cfg.samples)
        gx = np.zeros(cfg.samples)

        def observe(e: CoupledEnsemble) -> None:
            np.maximum(gx, e.space.sobolev_sq(e.X - e.Xhat, 0.0), out=gx)
            if e.step_index < n_steps:
                gy[:] += e.space.sobolev_sq(e.Y - e.Yhat, 0.0) * dt

        ens.run(n_steps, [observe])
        a = ens.alive
        vy, sy = mc_mean(gy[a])
        vx, sx = mc_mean(gx[a])
        rows.append({"delta": m * dt, "steps": m, "gap_y": vy, "stderr_y": sy, "gap_x": vx, "stderr_x": sx,
                     "M_effective": int(a.sum()), "eps": eps, "dt": dt, "root_seed": cfg.seed})
    main = [r for r in rows if r["steps"] > 1]

    def mono(c, s):
        return all(b[c] <= a_[c] + 2.0 * np.hypot(a_[s], b[s]) for a_, b in zip(main, main[1:]))

    dl = [r["delta"] for r in main]
    sy_, _, _ = fit_loglog(dl, [r["gap_y"] for r in main])
    sx_, _, _ = fit_loglog(dl, [r["gap_x"] for r in main])
    cols = ["delta", "steps", "gap_y", "stderr_y", "gap_x", "stderr_x", "M_effective", "eps", "dt", "root_seed"]
    meta = _meta(cfg, slope_y=sy_, slope_x=sx_, monotone_y=mono("gap_y", "stderr_y"),
                 monotone_x=mono("gap_x", "stderr_x"), gap_y_at_dt=rows[-1]["gap_y"])
    return Table("auxgap", cols, rows, meta)


# -- ergodicity of the frozen equation -----------------------------------------------


def mode_functional(space, k=(1, 0)):
    """``phi(y) = <y, e_k>`` for the unit divergence-free mode ``e_k`` (Lipschitz 1)."""
    e = space.mode(tuple(k)).coeffs
    return lambda y: space.inner(y, e)


def clamped_norm_functional(space, radius: float = 1.0):
    """``phi(y) = min(|y|, radius)`` (Lipschitz 1)."""
    return lambda y: np.minimum(np.sqrt(space.sobolev_sq(y, 0.0)), radius)


def make_functional(space, spec: dict):
    kind = spec.get("kind", "mode")
    if kind == "mode":
        return mode_functional(space, tuple(spec.get("k", (1, 0))))
    if kind == "clamped_norm":
        return clamped_norm_functional(space, float(spec.get("radius", 1.0)))
    raise ConfigError(f"unknown functional kind {kind!r}", key="phi")


@dataclass
class ErgodicityResult:
    """Fitted ``E|phi(Y^{x,y1}_t) - phi(Y^{x,y2}_t)| ~ prefactor * exp(-rate t)``."""

    rate: float
    prefactor: float
    residual: float
    times: np.ndarray
    gap: np.ndarray
    stderr: np.ndarray

    def table(self, cfg: ExperimentConfig | None = None) -> Table:
        rows = [{"t": float(t), "gap": float(g), "stderr": float(s)} for t, g, s in zip(self.times, self.gap, self.stderr)]
        meta = {"rate": self.rate, "prefactor": self.prefactor, "fit_residual": self.residual,
                "rate_positive": bool(self.rate > 0)}
        if cfg is not None:
            meta = _meta(cfg, **meta)
        return Table("ergodicity", ["t", "gap", "stderr"], rows, meta)


def probe_ergodicity(x, phi, y1, y2, cfg: ExperimentConfig) -> ErgodicityResult:
    """Couple two frozen paths from ``y1`` and ``y2`` through identical noise.

    ``phi`` is a callable on coefficient arrays or a functional spec dict.
    The rate is an OLS fit of ``log E|phi diff|`` against ``t`` for
    ``t >= fit_from``, so ``rate`` is the exponent of the observed decay.
    """
    diag = cfg.diag("ergodicity")
    sp = cfg.space
    cs = cfg.coefficients
    if isinstance(phi, dict):
        phi = make_functional(sp, phi)
    arr = lambda v: v.coeffs if isinstance(v, SpectralField) else np.asarray(v, dtype=complex)
    m = cfg.samples
    xb = np.broadcast_to(arr(x), (2 * m,) + sp.shape)
    y = np.concatenate([np.broadcast_to(arr(y1), (m,) + sp.shape), np.broadcast_to(arr(y2), (m,) + sp.shape)])
    dt = float(diag["dt"])
    n_steps = int(math.ceil(float(diag["t_max"]) / dt - 1e-9))
    # both copies of a sample read the same frozen stream
    streams = [NoiseStream(cfg.seed, s, "frozen", replica=1) for s in range(m)]
    twins = [NoiseStream(cfg.seed, s, "frozen", replica=1) for s in range(m)]
    fac = step_factors(sp, dt)
    cov = cfg.covariances[1]
    times, gaps, errs = [], [], []
    for n in range(n_steps + 1):
        d = np.abs(phi(y[:m]) - phi(y[m:]))
        g, se = mc_mean(d)
        times.append(n * dt)
        gaps.append(g)
        errs.append(se)
        if n == n_steps:
            break
        dW = sample_increments(cov, dt, streams + twins)
        y = _advance(fac, y, cs.g(xb, y), cs.sigma2(xb, y), dW, sp)
        if not np.isfinite(y).all():
            raise BlowUpError(n * dt, {"frozen": float("nan")})
    times, gaps, errs = np.array(times), np.array(gaps), np.array(errs)
    fit_from = float(diag.get("fit_from", 0.0))
    ok = (times >= fit_from) & (gaps > 0) & np.isfinite(gaps)
    if gaps[0] > 0:
        ok &= gaps > 1e-12 * gaps[0]
    if ok.sum() >= 2:
        slope, b = np.polyfit(times[ok], np.log(gaps[ok]), 1)
        res = float(np.sqrt(np.mean((np.log(gaps[ok]) - slope * times[ok] - b) ** 2)))
        rate, pref = float(-slope), float(np.exp(b))
    else:
        rate, pref, res = float("nan"), 0.0, float("nan")
    return ErgodicityResult(rate, pref, res, times, gaps, errs)
