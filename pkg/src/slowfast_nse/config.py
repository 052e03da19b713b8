"""Experiment configuration: JSON schema, defaults, validation and overrides.

A config is one JSON object.  Every key is optional; missing keys take the
values in :data:`DEFAULTS`.  Unknown keys are errors.  Schema::

    N            int, even >= 6            modes per axis
    T            float > 0                 horizon
    nu           float > 0                 viscosity
    eps          list of floats in (0, 1)  scale separations
    dt           {cfl, dt_max}             dt = min(cfl * eps, dt_max), then T/ceil(T/dt)
    delta        {rule: "eps^(1/3)" | "explicit", value}
    samples      int >= 2                  Monte Carlo paths M
    seed         int >= 0                  root seed
    nonlinear    bool                      include B
    coefficients {name, params}
    noise        {slow: {alpha, amplitude}, fast: {alpha, amplitude}}
    initial      {kind: random | taylor_green | shear | zero, norm}
    fbar         {mode: auto | closed_form | time_average | warm_start,
                  dt, t_erg, burn_in, relax_steps, window_steps}
    diagnostics  {increments, auxgap, ergodicity, inequalities, moments}
    output       {dir, prefix}
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Any

import numpy as np

from .coefficients import CoefficientSet, builtin, verify_dissipativity
from .dynamics import FbarEstimator
from .errors import AdmissibilityError, ConfigError
from .spectral import SpectralSpace, random_fields
from .stochastic import CovarianceSpec, NoiseStream

__all__ = ["DEFAULTS", "ExperimentConfig", "apply_override", "load_config"]

DEFAULTS: dict[str, Any] = {
    "N": 16,
    "T": 0.5,
    "nu": 1.0,
    "eps": [0.1, 0.01, 0.001],
    "dt": {"cfl": 0.1, "dt_max": 1e-3},
    "delta": {"rule": "eps^(1/3)", "value": None},
    "samples": 64,
    "seed": 20240611,
    "nonlinear": True,
    "coefficients": {"name": "linear_ou", "params": {}},
    "noise": {
        "slow": {"alpha": 1.5, "amplitude": 1.0},
        "fast": {"alpha": 1.5, "amplitude": 1.0},
    },
    "initial": {"kind": "random", "norm": 1.0},
    "fbar": {
        "mode": "auto",
        "dt": 0.02,
        "t_erg": 50.0,
        "burn_in": 5.0,
        "relax_steps": None,
        "window_steps": 10,
    },
    "diagnostics": {
        "increments": {"eps": 0.01, "exponents": [4, 5, 6, 7, 8]},
        "auxgap": {"eps": 0.01, "exponents": [3, 4, 5, 6, 7]},
        "ergodicity": {"t_max": 4.0, "dt": 0.01, "phi": {"kind": "mode", "k": [1, 0]}, "fit_from": 0.0},
        "inequalities": {"n_samples": 1000, "eps": 0.1, "check_n": 32},
        "moments": {"p": [1], "burn": 0.1},
    },
    "output": {"dir": "out", "prefix": "run"},
}

# keys whose values are free-form mappings (validated elsewhere)
_OPEN = {("coefficients", "params"), ("diagnostics", "ergodicity", "phi")}


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(p)!r}", key=".".join(p))
        if isinstance(base[k], dict) and p not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(p)!r} must be an object", key=".".join(p))
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as JSON, else kept as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.strip().split(".")
    out = copy.deepcopy(raw)
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object", key=key)
    node[parts[-1]] = value
    return out


def _num(cfg, path, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
    node = cfg
    for p in path:
        node = node[p]
    name = ".".join(path)
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{name} must be a number, got {node!r}", key=name)
    if kind is int and (not float(node).is_integer()):
        raise ConfigError(f"{name} must be an integer, got {node!r}", key=name)
    v = kind(node)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name}={v} is out of range", key=name)
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name}={v} is out of range", key=name)
    return v


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A validated experiment description.

    Build with :meth:`from_dict` or :func:`load_config`; ``data`` holds the
    fully resolved JSON object and ``hash`` its SHA-256 (output settings
    excluded so results do not depend on where they are written).
    """

    data: dict

    @classmethod
    def from_dict(cls, raw: dict | None = None, overrides=()) -> "ExperimentConfig":
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        for o in overrides:
            raw = apply_override(raw, o)
        data = _merge(DEFAULTS, raw)
        cfg = cls(data)
        cfg._validate()
        return cfg

    # -- validation ----------------------------------------------------------

    def _validate(self) -> None:
        d = self.data
        n = _num(d, ("N",), int, 6)
        if n % 2:
            raise ConfigError(f"N must be even, got {n}", key="N")
        _num(d, ("T",), float, 0.0, lo_open=True)
        _num(d, ("nu",), float, 0.0, lo_open=True)
        if not isinstance(d["eps"], list) or not d["eps"]:
            raise ConfigError("eps must be a non-empty list", key="eps")
        for i, e in enumerate(d["eps"]):
            if isinstance(e, bool) or not isinstance(e, (int, float)) or not 0.0 < e < 1.0:
                raise ConfigError(f"eps[{i}]={e!r} must lie in (0, 1)", key="eps")
        if len(set(d["eps"])) != len(d["eps"]):
            raise ConfigError("eps values must be distinct", key="eps")
        _num(d, ("dt", "cfl"), float, 0.0, lo_open=True)
        _num(d, ("dt", "dt_max"), float, 0.0, lo_open=True)
        rule = d["delta"]["rule"]
        if rule not in ("eps^(1/3)", "explicit"):
            raise ConfigError(f"delta.rule must be 'eps^(1/3)' or 'explicit', got {rule!r}", key="rule")
        if rule == "explicit":
            _num(d, ("delta", "value"), float, 0.0, lo_open=True)
        _num(d, ("samples",), int, 2)
        _num(d, ("seed",), int, 0, 2**64 - 1)
        if not isinstance(d["nonlinear"], bool):
            raise ConfigError("nonlinear must be true or false", key="nonlinear")
        for role in ("slow", "fast"):
            _num(d, ("noise", role, "alpha"), float, 1.0, lo_open=True)
            _num(d, ("noise", role, "amplitude"), float, 0.0)
        kind = d["initial"]["kind"]
        if kind not in ("random", "taylor_green", "shear", "zero"):
            raise ConfigError(f"initial.kind {kind!r} is not one of random, taylor_green, shear, zero", key="kind")
        _num(d, ("initial", "norm"), float, 0.0)
        mode = d["fbar"]["mode"]
        if mode not in ("auto", "closed_form", "time_average", "warm_start"):
            raise ConfigError(f"unknown fbar.mode {mode!r}", key="mode")
        _num(d, ("fbar", "dt"), float, 0.0, lo_open=True)
        if not isinstance(d["output"]["dir"], str) or not isinstance(d["output"]["prefix"], str):
            raise ConfigError("output.dir and output.prefix must be strings", key="output")
        if not isinstance(d["coefficients"]["params"], dict):
            raise ConfigError("coefficients.params must be an object", key="params")
        # building the set checks names and parameters; then enforce the dissipativity margin
        cs = self.coefficients
        margin = verify_dissipativity(cs)
        if not margin > 0:
            raise AdmissibilityError(margin)
        if mode == "closed_form" and not cs.has_closed_form_average:
            raise ConfigError(f"fbar.mode closed_form is unavailable for {cs.name!r}", key="mode")

    # -- derived objects -----------------------------------------------------

    def __getitem__(self, key):
        return self.data[key]

    @cached_property
    def hash(self) -> str:
        body = {k: v for k, v in self.data.items() if k != "output"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def n(self) -> int:
        return int(self.data["N"])

    @property
    def T(self) -> float:
        return float(self.data["T"])

    @property
    def nu(self) -> float:
        return float(self.data["nu"])

    @property
    def eps_list(self) -> list[float]:
        """Scale separations sorted descending."""
        return sorted((float(e) for e in self.data["eps"]), reverse=True)

    @property
    def samples(self) -> int:
        return int(self.data["samples"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def nonlinear(self) -> bool:
        return bool(self.data["nonlinear"])

    @cached_property
    def space(self) -> SpectralSpace:
        return SpectralSpace(self.n)

    @cached_property
    def covariances(self) -> tuple[CovarianceSpec, CovarianceSpec]:
        nz = self.data["noise"]
        return tuple(CovarianceSpec(self.space, float(nz[r]["alpha"]), float(nz[r]["amplitude"])) for r in ("slow", "fast"))

    @cached_property
    def coefficients(self) -> CoefficientSet:
        c = self.data["coefficients"]
        c1, c2 = self.covariances
        return builtin(c["name"], self.space, c1, c2, **c["params"])

    def dt_for(self, eps: float) -> float:
        """Largest step below the dt rule that divides ``T`` evenly."""
        target = min(float(self.data["dt"]["cfl"]) * eps, float(self.data["dt"]["dt_max"]))
        return self.T / math.ceil(self.T / target - 1e-9)

    def dt_target(self, eps: float) -> float:
        return min(float(self.data["dt"]["cfl"]) * eps, float(self.data["dt"]["dt_max"]))

    def delta_for(self, eps: float, dt: float) -> float:
        """Khasminskii block length rounded to a whole number of steps."""
        d = self.data["delta"]
        raw = eps ** (1.0 / 3.0) if d["rule"] == "eps^(1/3)" else float(d["value"])
        return max(1, round(raw / dt)) * dt

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` drawn from the sample-0 ``init`` stream (draws 0 and 1)."""
        sp = self.space
        ini = self.data["initial"]
        norm = float(ini["norm"])
        stream = NoiseStream(self.seed, 0, "init")
        x = random_fields(sp, stream.generator(), norm=norm)
        y = random_fields(sp, stream.generator(), norm=norm)
        kind = ini["kind"]
        if kind == "zero":
            return sp.zeros().coeffs.copy(), sp.zeros().coeffs.copy()
        if kind in ("taylor_green", "shear"):
            u = getattr(sp, kind)().coeffs
            x = u * (norm / np.sqrt(sp.sobolev_sq(u, 0.0)))
        return x, y

    def fbar_estimator(self, rate: float = 1.0) -> FbarEstimator:
        fb = self.data["fbar"]
        cs = self.coefficients
        mode = fb["mode"]
        if mode == "auto":
            mode = "closed_form" if cs.has_closed_form_average else "warm_start"
        if mode == "closed_form":
            return FbarEstimator.closed_form(cs)
        if mode == "time_average":
            return FbarEstimator.time_average(float(fb["t_erg"]), float(fb["burn_in"]), float(fb["dt"]))
        return FbarEstimator.warm_start(fb["relax_steps"], int(fb["window_steps"]), float(fb["dt"]), rate=rate)

    def diag(self, name: str) -> dict:
        return self.data["diagnostics"][name]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)


def _locate(text: str, key: str | None) -> int | None:
    if not key:
        return None
    leaf = key.split(".")[-1]
    m = re.search(r'"%s"\s*:' % re.escape(leaf), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path, overrides=()) -> tuple[ExperimentConfig, bytes]:
    """Read and validate a config file; errors carry the offending line."""
    with open(path, "rb") as fh:
        blob = fh.read()
    text = blob.decode("utf-8", errors="replace")
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}", line=exc.lineno) from None
    try:
        return ExperimentConfig.from_dict(raw, overrides), blob
    except AdmissibilityError:
        raise
    except ConfigError as exc:
        line = exc.line or _locate(text, exc.key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}", key=exc.key, line=line) from None
