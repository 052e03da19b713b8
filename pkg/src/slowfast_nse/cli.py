"""Command line entry point ``slowfast-nse``.

Exit codes: 0 success, 2 config error, 3 inadmissible coefficients,
4 resume mismatch, 5 diagnostic violation (1 for anything unexpected).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics
from .config import ExperimentConfig, load_config
from .dynamics import CoupledEnsemble, estimate_fbar
from .errors import AdmissibilityError, BlowUpError, ConfigError, DiagnosticError
from .harness import (
    make_functional,
    measure_auxiliary_gap,
    measure_moment_bounds,
    measure_time_increments,
    probe_ergodicity,
    run_convergence_study,
)
from .snapshot import read_nsef, read_sidecar, write_nsef, write_sidecar
from .spectral import SpectralField, random_fields
from .stochastic import NoiseStream

EXIT_OK, EXIT_CONFIG, EXIT_ADMISSIBILITY, EXIT_RESUME, EXIT_DIAGNOSTIC = 0, 2, 3, 4, 5


class ResumeMismatch(RuntimeError):
    pass


class Run:
    """Bookkeeping for one command: outputs and the manifest."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs: list[str] = []
        self.cfg: ExperimentConfig | None = None
        self.blob = b""

    def load(self) -> ExperimentConfig:
        a = self.args
        overrides = list(a.set or [])
        if a.eps is not None:
            overrides.append("eps=" + json.dumps([float(e) for e in a.eps.split(",")]))
        if a.samples is not None:
            overrides.append(f"samples={a.samples}")
        if a.seed is not None:
            overrides.append(f"seed={a.seed}")
        if a.out is not None:
            overrides.append("output.dir=" + json.dumps(a.out))
        if a.prefix is not None:
            overrides.append("output.prefix=" + json.dumps(a.prefix))
        if a.config:
            self.cfg, self.blob = load_config(a.config, overrides)
        else:
            self.cfg = ExperimentConfig.from_dict({}, overrides)
        return self.cfg

    def path(self, suffix: str) -> Path:
        out = self.cfg["output"]
        return Path(out["dir"]) / f"{out['prefix']}.{self.command}{suffix}"

    def add(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def manifest(self, status: int, note: str | None = None) -> None:
        if self.cfg is None:
            return
        body = {
            "command": self.command,
            "argv": sys.argv[1:] if self.args.argv is None else self.args.argv,
            "config_path": self.args.config,
            "config_sha256": hashlib.sha256(self.blob).hexdigest(),
            "config_hash": self.cfg.hash,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": self.outputs,
            "exit_status": status,
            "version": __version__,
        }
        if note:
            body["note"] = note
        write_sidecar(self.path(".manifest.json"), body)


def _write_table(run: Run, table) -> None:
    run.add(*table.write(run.path(".csv"), run.path(".json")))


# -- subcommands ----------------------------------------------------------------


def cmd_converge(run: Run) -> int:
    cfg = run.load()
    _write_table(run, run_convergence_study(cfg))
    return EXIT_OK


def _simulation_eps(cfg: ExperimentConfig) -> float:
    return cfg.eps_list[0]


def _checkpoint(run: Run, ens: CoupledEnsemble, csv_bytes: int, eps: float) -> None:
    snap = run.path(".checkpoint.nsef")
    write_nsef(snap, np.concatenate([ens.X, ens.Y]))
    write_sidecar(run.path(".checkpoint.json"), {
        "t": ens.t, "step": ens.step_index, "N": ens.space.n, "eps": eps, "dt": ens.dt,
        "config_hash": run.cfg.hash, "samples": len(ens.samples),
        "counters": {"slow": [s.counter for s in ens.slow], "fast": [s.counter for s in ens.fast]},
        "alive": ens.alive.tolist(), "death_time": ens.death_time.tolist(),
        "csv_bytes": csv_bytes, "snapshot": str(snap),
    })


def _restore(run: Run, ens: CoupledEnsemble, path: str) -> int:
    meta = read_sidecar(path)
    if int(meta["N"]) != ens.space.n:
        raise ResumeMismatch(f"checkpoint has N={meta['N']}, config has N={ens.space.n}")
    if meta["config_hash"] != run.cfg.hash:
        raise ResumeMismatch("checkpoint was written with a different config (hash mismatch)")
    fields = read_nsef(meta["snapshot"])
    m = len(ens.samples)
    if fields.shape[0] != 2 * m:
        raise ResumeMismatch("checkpoint sample count does not match")
    ens.X, ens.Y = fields[:m].copy(), fields[m:].copy()
    for s, c in zip(ens.slow, meta["counters"]["slow"]):
        s.counter = int(c)
    for s, c in zip(ens.fast, meta["counters"]["fast"]):
        s.counter = int(c)
    ens.alive = np.array(meta["alive"], dtype=bool)
    ens.death_time = np.array([np.nan if v is None else v for v in meta["death_time"]], dtype=float)
    ens.step_index = int(meta["step"])
    ens.t = ens.step_index * ens.dt
    return int(meta["csv_bytes"])


def cmd_simulate(run: Run) -> int:
    """Run the coupled system, streaming per-path norms to CSV."""
    cfg = run.load()
    a = run.args
    eps = _simulation_eps(cfg)
    dt = cfg.dt_for(eps)
    total = int(a.steps) if a.steps is not None else int(round(cfg.T / dt))
    x0, y0 = cfg.initial_state()
    ens = CoupledEnsemble(cfg.coefficients, eps=eps, dt=dt, x0=x0, y0=y0, samples=range(cfg.samples),
                          root_seed=cfg.seed, nu=cfg.nu, nonlinear=cfg.nonlinear, covs=cfg.covariances)
    final_csv = run.path(".csv")
    partial = final_csv.with_name(final_csv.name + ".partial")
    partial.parent.mkdir(parents=True, exist_ok=True)
    if a.resume:
        offset = _restore(run, ens, a.resume)
        if not partial.exists() or partial.stat().st_size < offset:
            raise ResumeMismatch(f"partial output {partial} is missing or shorter than the checkpoint")
        fh = open(partial, "r+b")
        fh.truncate(offset)
        fh.seek(offset)
    else:
        fh = open(partial, "wb")
        fh.write(b"step,t,sample,abs_X,h1_X,abs_Y,root_seed\n")
    sp = ens.space
    record_every = max(1, int(a.record_every))

    def record(e: CoupledEnsemble) -> None:
        if e.step_index % record_every and e.step_index != total:
            return
        ax = np.sqrt(sp.sobolev_sq(e.X, 0.0))
        hx = np.sqrt(sp.sobolev_sq(e.X, 1.0))
        ay = np.sqrt(sp.sobolev_sq(e.Y, 0.0))
        lines = [f"{e.step_index},{e.t!r},{s},{float(ax[i])!r},{float(hx[i])!r},{float(ay[i])!r},{cfg.seed}\n"
                 for i, s in enumerate(e.samples)]
        fh.write("".join(lines).encode())

    stop = {"sig": None}
    every = a.checkpoint_every

    def handler(signum, frame):
        stop["sig"] = signum

    old = {}
    if every:
        for sgn in (signal.SIGTERM, signal.SIGINT):
            old[sgn] = signal.signal(sgn, handler)
    try:
        if ens.step_index == 0:
            record(ens)
        while ens.step_index < total:
            ens.step()
            record(ens)
            if every and (ens.step_index % every == 0 or stop["sig"] is not None) and ens.step_index < total:
                fh.flush()
                _checkpoint(run, ens, fh.tell(), eps)
                if stop["sig"] is not None:
                    run.add(run.path(".checkpoint.nsef"), run.path(".checkpoint.json"))
                    fh.close()
                    run.manifest(128 + stop["sig"], note=f"interrupted at step {ens.step_index}; resume with --resume")
                    return 128 + stop["sig"]
    finally:
        for sgn, h in old.items():
            signal.signal(sgn, h)
        if not fh.closed:
            fh.close()
    os.replace(partial, final_csv)
    for leftover in (run.path(".checkpoint.nsef"), run.path(".checkpoint.json")):
        leftover.unlink(missing_ok=True)
    run.add(final_csv)
    run.add(write_nsef(run.path(".nsef"), np.concatenate([ens.X, ens.Y])))
    summary = {"eps": eps, "dt": dt, "steps": total, "t": ens.t, "samples": cfg.samples,
               "attrition": ens.attrition, "config_hash": cfg.hash, "root_seed": cfg.seed,
               "snapshot_layout": "X for each sample, then Y for each sample", "version": __version__}
    run.add(write_sidecar(run.path(".json"), summary))
    return EXIT_OK


def cmd_fbar(run: Run) -> int:
    """Averaged drift at the configured initial ``x``; snapshot holds ``[x, fbar(x)]``."""
    cfg = run.load()
    x0, _ = cfg.initial_state()
    x = SpectralField(cfg.space, x0)
    est = cfg.fbar_estimator()
    stream = NoiseStream(cfg.seed, 0, "frozen")
    fb = estimate_fbar(est, x, cfg.coefficients, cfg.covariances[1], stream)
    run.add(write_nsef(run.path(".nsef"), np.stack([x.coeffs, fb.coeffs])))
    meta = {"mode": est.mode, "norm_x": x.norm(), "norm_fbar": fb.norm(), "config_hash": cfg.hash,
            "root_seed": cfg.seed, "snapshot_layout": "x, fbar(x)", "version": __version__}
    run.add(write_sidecar(run.path(".json"), meta))
    return EXIT_OK


def cmd_ergodicity(run: Run) -> int:
    cfg = run.load()
    x0, y1 = cfg.initial_state()
    # the second initial condition is the third draw of the init stream
    stream = NoiseStream(cfg.seed, 0, "init", counter=2)
    y2 = random_fields(cfg.space, stream.generator(), norm=float(cfg["initial"]["norm"]))
    phi = make_functional(cfg.space, cfg.diag("ergodicity")["phi"])
    res = probe_ergodicity(x0, phi, y1, y2, cfg)
    _write_table(run, res.table(cfg))
    if not res.rate > 0:
        raise DiagnosticError(f"non-positive fitted ergodic rate {res.rate}")
    return EXIT_OK


def cmd_diag(run: Run) -> int:
    cfg = run.load()
    which = run.args.which
    if which == "increments":
        _write_table(run, measure_time_increments(cfg))
    elif which == "auxgap":
        _write_table(run, measure_auxiliary_gap(cfg))
    elif which == "moments":
        t = measure_moment_bounds(cfg)
        _write_table(run, t)
        if not t.meta["bounded"]:
            raise DiagnosticError(f"moment ratios exceed 3 across eps: {t.meta['ratios']}")
    else:
        d = cfg.diag("inequalities")
        rep = diagnostics.verify_coercivity_monotonicity(
            int(d["n_samples"]), cfg.coefficients, eps=float(d["eps"]), nu=cfg.nu,
            check_n=int(d["check_n"]) if d["check_n"] else None, seed=cfg.seed,
        )
        rep.meta.update(config_hash=cfg.hash, root_seed=cfg.seed)
        _write_table(run, rep)
        if not rep.passed:
            raise DiagnosticError(f"{rep.violations} inequality violation(s); stability {rep.meta['stability_ratios']}")
    return EXIT_OK


COMMANDS = {"converge": cmd_converge, "simulate": cmd_simulate, "fbar": cmd_fbar,
            "ergodicity": cmd_ergodicity, "diag": cmd_diag}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slowfast-nse", description="Slow-fast stochastic Navier-Stokes simulation and averaging diagnostics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="JSON config file (defaults used if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
        sp.add_argument("--eps", help="comma-separated eps list")
        sp.add_argument("--samples", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--prefix", help="output file prefix")
        return sp

    common(sub.add_parser("converge", help="strong averaging error across eps"))
    s = common(sub.add_parser("simulate", help="simulate the coupled system"))
    s.add_argument("--steps", type=int, help="total number of steps (default T/dt)")
    s.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    s.add_argument("--resume", metavar="CHECKPOINT_JSON")
    s.add_argument("--record-every", type=int, default=1, metavar="R")
    common(sub.add_parser("fbar", help="averaged drift at the initial x"))
    common(sub.add_parser("ergodicity", help="frozen-equation decay rate"))
    d = sub.add_parser("diag", help="diagnostics")
    d.add_argument("which", choices=["increments", "auxgap", "moments", "inequalities"])
    common(d)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else list(argv)
    command = args.command if args.command != "diag" else f"diag-{args.which}"
    run = Run(args, command)
    status, note = EXIT_OK, None
    try:
        status = COMMANDS[args.command](run)
        if status >= 128:
            return status  # the interrupted command wrote its own manifest
    except AdmissibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, note = EXIT_ADMISSIBILITY, str(exc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeMismatch as exc:
        print(f"error: cannot resume: {exc}", file=sys.stderr)
        status, note = EXIT_RESUME, str(exc)
    except DiagnosticError as exc:
        print(f"diagnostic violation: {exc}", file=sys.stderr)
        status, note = EXIT_DIAGNOSTIC, str(exc)
    except BlowUpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, note = 1, str(exc)
    try:
        run.manifest(status, note)
    except OSError as exc:
        print(f"warning: manifest not written: {exc}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
