"""Trace records, CSV persistence, plot series and complexity predictions."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TRACE_COLUMNS = ("t", "err_node", "err_token", "comm_total", "comm_per_token",
                 "grads_per_node", "time")
X_AXES = {"comm": "comm_total", "comp": "grads_per_node", "time": "time", "iter": "t"}


@dataclass(frozen=True)
class TraceRecord:
    """One checkpoint of a run.

    ``comm_per_token`` is the mean number of communications per token and
    ``grads_per_node`` the mean number of single-sample gradients per node.
    ``err_token`` is NaN for methods without tokens.
    """

    t: int
    err_node: float
    err_token: float
    comm_total: int
    comm_per_token: float
    grads_per_node: float
    time: float

    def __post_init__(self):
        if self.err_node < 0 or (self.err_token == self.err_token and self.err_token < 0):
            raise ValueError("errors must be nonnegative")


@dataclass
class Trace:
    label: str
    records: list[TraceRecord] = field(default_factory=list)
    reached: bool = False
    truncated: bool = False
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def append(self, rec: TraceRecord) -> None:
        if self.records:
            prev = self.records[-1]
            if (rec.comm_total < prev.comm_total or rec.grads_per_node < prev.grads_per_node
                    or rec.t < prev.t):
                raise ValueError("trace counters must be nondecreasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def last(self) -> TraceRecord:
        return self.records[-1]

    def first_reaching(self, eps: float, metric: str = "both") -> TraceRecord | None:
        for r in self.records:
            if stop_error(r.err_node, r.err_token, metric) <= eps:
                return r
        return None


def stop_error(err_node: float, err_token: float, metric: str = "both") -> float:
    """Error used by stopping rules: node, token, or the max of both."""
    if metric == "node" or err_token != err_token:
        return err_node
    if metric == "token":
        return err_token
    return max(err_node, err_token)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_to_csv_text(trace: Trace) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    lines += [",".join(_fmt(v) for v in astuple(r)) for r in trace.records]
    return "\n".join(lines) + "\n"


def emit_csv(trace: Trace, path: str | Path) -> Path:
    """Write the trace with columns ``t,err_node,...,time``; floats round-trip exactly."""
    path = Path(path)
    _atomic_write(path, trace_to_csv_text(trace))
    return path


def read_csv(path: str | Path, label: str | None = None) -> Trace:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        types = [f.type for f in fields(TraceRecord)]
        trace = Trace(label or path.stem)
        for row in reader:
            vals = [int(v) if tp in ("int", int) else float(v) for v, tp in zip(row, types)]
            trace.records.append(TraceRecord(*vals))
    return trace


def emit_plot_data(traces: Mapping[str, Trace], x_axis: str, directory: str | Path) -> list[Path]:
    """One CSV per algorithm with columns ``x,err_node,err_token``.

    ``x_axis`` is ``comm``, ``comp``, ``time`` or ``iter``.
    """
    if x_axis not in X_AXES:
        raise ValueError(f"x_axis must be one of {sorted(X_AXES)}")
    directory = Path(directory)
    out = []
    for label, trace in traces.items():
        col = X_AXES[x_axis]
        lines = [f"{x_axis},err_node,err_token"]
        for r in trace.records:
            lines.append(f"{_fmt(getattr(r, col))},{_fmt(r.err_node)},{_fmt(r.err_token)}")
        path = directory / f"{_safe(label)}_{x_axis}.csv"
        _atomic_write(path, "\n".join(lines) + "\n")
        out.append(path)
    return out


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


# ---------------------------------------------------------------------------
# complexity predictions (log factors dropped)


@dataclass(frozen=True)
class Prediction:
    comm_per_token: float
    grads_per_node: float


def predict(algorithm: str, n: int, m: int, K: int, kappa: float, kappa_s: float) -> Prediction:
    """Leading-order per-token communication and per-node gradient counts.

    ``tgd``: ``n kappa / K`` and ``m kappa``; ``tvr``: ``n kappa_s / K`` and
    ``m + kappa_s``; ``tavr``: ``n sqrt(kappa_s) / K`` and
    ``m + sqrt(m kappa_s)``.  Counts are per unit of ``log(1/eps)``.
    """
    algorithm = algorithm.lower()
    if algorithm == "tgd":
        return Prediction(n * kappa / K, m * kappa)
    if algorithm == "tvr":
        return Prediction(n * kappa_s / K, m + kappa_s)
    if algorithm == "tavr":
        return Prediction(n * math.sqrt(kappa_s) / K, m + math.sqrt(m * kappa_s))
    raise ValueError(f"no prediction for {algorithm!r}")


def comparison_table(rows: Sequence[Mapping[str, object]]) -> str:
    """Render dict rows as CSV text with a stable column order."""
    if not rows:
        return ""
    cols: list[str] = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_cell(r.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    _atomic_write(path, text)
    return path


def fit_log_slope(t: Iterable[float], err: Iterable[float]) -> float:
    """Least-squares slope of ``log(err)`` against ``t``."""
    t = np.asarray(list(t), dtype=float)
    e = np.asarray(list(err), dtype=float)
    keep = e > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(t[keep], np.log(e[keep]), 1)[0])
