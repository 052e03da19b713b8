"""Result tables, log-log slope fits and their CSV/JSON serialisation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .snapshot import atomic_write, dumps_json

__all__ = ["ConvergenceReport", "Table", "fit_loglog", "mc_mean"]


def mc_mean(values) -> tuple[float, float]:
    """Sample mean and its standard error (``nan`` error for one value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(np.mean(v)), se


def fit_loglog(x, y) -> tuple[float, float, float]:
    """OLS fit ``log y = slope * log x + b``; returns ``(slope, b, rms residual)``.

    Non-positive or non-finite points are dropped; fewer than two points
    give ``nan`` throughout.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan"), float("nan"), float("nan")
    lx, ly = np.log(x[ok]), np.log(y[ok])
    slope, b = np.polyfit(lx, ly, 1)
    res = ly - (slope * lx + b)
    return float(slope), float(b), float(np.sqrt(np.mean(res**2)))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Table:
    """Rows of a sweep plus metadata; written as CSV with a JSON sidecar."""

    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in self.columns])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"table": self.name, "columns": self.columns, "version": __version__, **self.meta}

    def write(self, csv_path, json_path=None) -> list[Path]:
        out = [atomic_write(csv_path, self.to_csv().encode())]
        if json_path is not None:
            out.append(atomic_write(json_path, dumps_json(self.sidecar()).encode()))
        return out


CONVERGENCE_COLUMNS = [
    "eps", "delta", "dt", "n_steps", "samples", "M_effective", "err", "stderr",
    "err_p2", "stderr_p2", "attrition", "usable", "root_seed", "streams",
]


class ConvergenceReport(Table):
    """Per-eps strong errors ``E sup_t |X^eps - Xbar|^(2p)`` with slope fits.

    Rows are sorted by ``eps`` descending.  Slopes use only rows with zero
    attrition; a row with more than 10% attrition is marked unusable.
    """

    def __init__(self, rows: list[dict], meta: dict):
        rows = sorted(rows, key=lambda r: -r["eps"])
        super().__init__("convergence", list(CONVERGENCE_COLUMNS), rows, dict(meta))
        clean = [r for r in rows if r["attrition"] == 0]
        eps = [r["eps"] for r in clean]
        self.slope, self.intercept, self.residual = fit_loglog(eps, [r["err"] for r in clean])
        self.slope_p2, _, self.residual_p2 = fit_loglog(eps, [r["err_p2"] for r in clean])
        self.meta.update(
            slope=self.slope,
            slope_residual=self.residual,
            slope_p2=self.slope_p2,
            slope_p2_residual=self.residual_p2,
            strictly_decreasing=self.strictly_decreasing(),
            strictly_decreasing_p2=self.strictly_decreasing("p2"),
            slope_positive=bool(self.slope > 0),
        )

    def strictly_decreasing(self, which: str = "") -> bool:
        """Each err drops below its predecessor by more than 2 combined stderr."""
        e, s = ("err_p2", "stderr_p2") if which == "p2" else ("err", "stderr")
        rows = self.rows
        if len(rows) < 2:
            return False
        for a, b in zip(rows, rows[1:]):
            gap = 2.0 * np.hypot(a[s], b[s])
            if not (np.isfinite(gap) and b[e] < a[e] - gap):
                return False
        return True
