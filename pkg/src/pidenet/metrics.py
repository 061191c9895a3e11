"""Error measurement against exact solutions and experiment report files."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .jumpsim import PathBatch
from .problems import ProblemSpec

log = logging.getLogger(__name__)

REL_ERR_FLOOR = 1e-8  # denominator floor so zero crossings of u stay finite


class MissingExactSolutionError(ValueError):
    """Requested an error metric for a problem without an exact solution."""


@dataclass
class MetricsReport:
    """One evaluation row: losses and errors of the current parameters."""

    iteration: int
    loss: float
    mean_rel_err: float
    rel_err_t0: float
    node_errors: np.ndarray  # length N+1
    max_sq_err: float
    lr: float
    wall_clock: float = 0.0

    def csv_row(self) -> str:
        cols = (self.iteration, self.loss, self.mean_rel_err,
                self.rel_err_t0, self.max_sq_err, self.lr)
        return ",".join(_fmt(c) for c in cols)


METRICS_CSV_HEADER = "iteration,loss,mean_rel_err,rel_err_t0,max_sq_err,lr"


@dataclass
class ConvergenceRow:
    steps: int
    dt: float
    max_sq_err: float
    order: Optional[float]  # empty for the first row


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def _require_exact(problem: ProblemSpec):
    if problem.exact is None:
        raise MissingExactSolutionError(f"problem {problem.name} has no exact solution")


def _network_and_exact(params: nn.MlpParams, batch: PathBatch, problem: ProblemSpec):
    """Values of the network and of u at every (node, path), shape (B, N+1)."""
    times = batch.grid.times
    n_nodes = batch.grid.steps + 1
    approx = np.empty((batch.batch_size, n_nodes))
    exact = np.empty_like(approx)
    for n in range(n_nodes):
        x = batch.states[:, n, :]
        approx[:, n] = nn.evaluate(params, times[n], x)[:, 0]
        exact[:, n] = problem.exact(times[n], x)[:, 0]
    return approx, exact


def _relative_errors(params, batch, problem) -> np.ndarray:
    _require_exact(problem)
    approx, exact = _network_and_exact(params, batch, problem)
    return np.abs(approx - exact) / np.maximum(REL_ERR_FLOOR, np.abs(exact))


def mean_relative_error(params: nn.MlpParams, batch: PathBatch, problem: ProblemSpec) -> float:
    """Mean over paths and time nodes of |net - u| / max(floor, |u|)."""
    return float(_relative_errors(params, batch, problem).mean())


def error_by_time(params: nn.MlpParams, batch: PathBatch, problem: ProblemSpec) -> np.ndarray:
    """Per-node mean relative error, length N+1."""
    return _relative_errors(params, batch, problem).mean(axis=0)


def max_square_error(params: nn.MlpParams, batch: PathBatch, problem: ProblemSpec) -> float:
    """Max over nodes of the batch-mean squared gap to the exact solution."""
    _require_exact(problem)
    approx, exact = _network_and_exact(params, batch, problem)
    return float(np.max(np.mean((approx - exact) ** 2, axis=0)))


def error_grid(
    params: nn.MlpParams, batch: PathBatch, problem: ProblemSpec, bins: int = 40
) -> list[tuple[float, float, float]]:
    """(t, x-bin center, mean absolute error) triples for scalar problems.

    Feeds heat-map style postprocessing; only defined for dim 1.
    """
    _require_exact(problem)
    if problem.dim != 1:
        raise ValueError("error_grid is only defined for one-dimensional problems")
    approx, exact = _network_and_exact(params, batch, problem)
    abs_err = np.abs(approx - exact)
    xs = batch.states[:, :, 0]
    edges = np.linspace(xs.min(), xs.max() + 1e-12, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    times = batch.grid.times
    for n in range(batch.grid.steps + 1):
        which = np.clip(np.digitize(xs[:, n], edges) - 1, 0, bins - 1)
        for b in range(bins):
            mask = which == b
            if mask.any():
                rows.append((float(times[n]), float(centers[b]), float(abs_err[mask, n].mean())))
    return rows


def convergence_table(
    errors_by_steps: dict[int, Sequence[float]],
    total_time: float,
    keep: int,
) -> list[ConvergenceRow]:
    """Aggregate per-run max-square-errors into a step-size study table.

    For each step count the ``keep`` smallest finite errors are averaged;
    non-finite entries are dropped with a warning.  The order column
    compares consecutive rows on the log-log scale.
    """
    if keep < 1:
        raise ValueError("keep must be >= 1")
    rows: list[ConvergenceRow] = []
    prev: Optional[ConvergenceRow] = None
    for steps in sorted(errors_by_steps):
        errors = np.asarray(list(errors_by_steps[steps]), dtype=np.float64)
        finite = errors[np.isfinite(errors)]
        if finite.size < errors.size:
            log.warning(
                "excluding %d non-finite run(s) at N=%d", errors.size - finite.size, steps
            )
        if finite.size == 0:
            log.warning("no usable runs at N=%d; skipping row", steps)
            continue
        kept = np.sort(finite)[: min(keep, finite.size)]
        err = float(kept.mean())
        dt = total_time / steps
        order = None
        if prev is not None:
            if err == prev.max_sq_err:
                order = 0.0
            else:
                order = float(np.log(prev.max_sq_err / err) / np.log(prev.dt / dt))
        row = ConvergenceRow(steps=steps, dt=dt, max_sq_err=err, order=order)
        rows.append(row)
        prev = row
    return rows


# ----------------------------------------------------------------------
# report files

def write_metrics_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        for rep in reports:
            fh.write(rep.csv_row() + "\n")


def write_error_by_time_csv(path, grid_times: np.ndarray, node_errors: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("node,t,rel_err\n")
        for n, (t, e) in enumerate(zip(grid_times, node_errors)):
            fh.write(f"{n},{_fmt(float(t))},{_fmt(float(e))}\n")


def write_convergence_csv(path, rows: Sequence[ConvergenceRow]) -> None:
    with open(path, "w") as fh:
        fh.write("N,dt,max_sq_err,order\n")
        for row in rows:
            order = "" if row.order is None else _fmt(row.order)
            fh.write(f"{row.steps},{_fmt(row.dt)},{_fmt(row.max_sq_err)},{order}\n")


def write_error_grid_csv(path, rows: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("t,x_bin,mean_abs_err\n")
        for t, x, e in rows:
            fh.write(f"{_fmt(t)},{_fmt(x)},{_fmt(e)}\n")
