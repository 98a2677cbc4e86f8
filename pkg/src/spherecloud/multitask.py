"""Loss-combination strategies for joint completion + classification.

PCGrad projects a task gradient off every conflicting task gradient,
visiting the other tasks in a random order and always projecting against
the *original* (not running-adjusted) vectors.  Uncertainty weighting uses
the learnable log-variance form sum_i exp(-s_i) L_i + s_i.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import TapeNode

log = logging.getLogger(__name__)


@dataclass
class TaskGradients:
    """One flattened gradient vector over the shared parameters per task."""

    task_ids: tuple
    vectors: list

    def __post_init__(self):
        self.task_ids = tuple(self.task_ids)
        self.vectors = [np.asarray(v, dtype=np.float64).ravel() for v in self.vectors]
        if len(self.task_ids) != len(self.vectors):
            raise ValueError("one vector per task id required")
        lengths = {v.shape[0] for v in self.vectors}
        if len(lengths) > 1:
            raise ValueError(f"task gradient lengths differ: {sorted(lengths)}")


@dataclass
class UncertaintyState:
    """Trainable per-task log-variance scalars, initialized at zero."""

    log_vars: list = field(default_factory=list)

    def __post_init__(self):
        self.log_vars = [float(s) for s in self.log_vars]
        if not all(np.isfinite(self.log_vars)):
            raise ValueError("log-variances must be finite")


def _check_weights(n_losses: int, weights) -> list:
    weights = [float(w) for w in weights]
    if len(weights) != n_losses:
        raise ValueError(f"{n_losses} losses but {len(weights)} weights")
    if any(w < 0.0 for w in weights):
        raise ValueError("weights must be non-negative")
    if all(w == 0.0 for w in weights):
        raise ValueError("weights must not all be zero")
    return weights


def combine_weighted(losses, weights):
    """sum_i w_i * L_i over floats or tape nodes."""
    losses = list(losses)
    weights = _check_weights(len(losses), weights)
    if losses and isinstance(losses[0], TapeNode):
        total = gc.scale(losses[0], weights[0])
        for l, w in zip(losses[1:], weights[1:]):
            total = gc.add(total, gc.scale(l, w))
        return total
    return float(sum(w * float(l) for l, w in zip(losses, weights)))


def uncertainty_combine(losses, state: UncertaintyState) -> float:
    """sum_i exp(-s_i) * L_i + s_i (all s_i = 0 reduces to equal weights)."""
    losses = [float(l) for l in losses]
    if len(losses) != len(state.log_vars):
        raise ValueError(f"{len(losses)} losses but {len(state.log_vars)} log-variances")
    return float(sum(np.exp(-s) * l + s for l, s in zip(losses, state.log_vars)))


def uncertainty_combine_nodes(loss_nodes, s_nodes) -> TapeNode:
    """In-graph form of uncertainty_combine; s_nodes are scalar parameter
    leaves so they receive gradients like any other parameter."""
    if len(loss_nodes) != len(s_nodes):
        raise ValueError("one log-variance node per loss required")
    total = None
    for l, s in zip(loss_nodes, s_nodes):
        term = gc.add(gc.mul(gc.exp(gc.neg(s)), l), s)
        total = term if total is None else gc.add(total, term)
    return total


def pcgrad(grads: TaskGradients, rng: np.random.Generator) -> TaskGradients:
    """Gradient surgery: for each task i, walk the other tasks in random
    order and project g_i off any original g_j it conflicts with
    (<g_i, g_j> < 0).  The caller sums the adjusted vectors."""
    k = len(grads.vectors)
    if k < 2:
        raise ValueError("pcgrad needs at least two tasks")
    originals = [v.copy() for v in grads.vectors]
    adjusted = []
    for i in range(k):
        g = originals[i].copy()
        others = [j for j in range(k) if j != i]
        order = rng.permutation(len(others))
        for oi in order:
            j = others[int(oi)]
            d = float(g @ originals[j])
            if d < 0.0:
                n2 = float(originals[j] @ originals[j])
                if n2 == 0.0:
                    log.warning("pcgrad: skipping zero-norm gradient of task %s", grads.task_ids[j])
                    continue
                g = g - (d / n2) * originals[j]
        adjusted.append(g)
    return TaskGradients(task_ids=grads.task_ids, vectors=adjusted)


# ---------------------------------------------------------------------------
# fixed-weight grid search

DEFAULT_WEIGHT_GRID = (
    (1.0, 0.0), (1.0, 0.01), (1.0, 0.1), (1.0, 0.5), (1.0, 1.0), (1.0, 2.0),
)


@dataclass
class WeightSearchResult:
    best_weights: tuple
    rows: list  # one dict per grid point: weights, chamfer, accuracy, seed, status/error


def weight_search(grid, train_eval_fn) -> WeightSearchResult:
    """Train one run per weight vector (train_eval_fn handles seeding) and
    return the vector minimizing held-out completion chamfer.  Failures are
    recorded per grid point and the search continues."""
    grid = [tuple(float(w) for w in ws) for ws in grid]
    if not grid:
        raise ValueError("weight grid must be non-empty")
    rows = []
    for ws in grid:
        row = {"weights": ws, "chamfer": None, "accuracy": None, "seed": None,
               "status": "ok", "error": ""}
        try:
            metrics = train_eval_fn(ws)
            row["chamfer"] = float(metrics["chamfer"])
            row["accuracy"] = None if metrics.get("accuracy") is None else float(metrics["accuracy"])
            row["seed"] = metrics.get("seed")
        except Exception as e:  # recorded, search continues
            row["status"] = "failed"
            row["error"] = f"{type(e).__name__}: {e}"
            log.warning("weight_search: grid point %s failed: %s", ws, e)
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise RuntimeError("every weight-search grid point failed")
    best = min(ok, key=lambda r: r["chamfer"])
    return WeightSearchResult(best_weights=best["weights"], rows=rows)


def write_weight_search_csv(path, result: WeightSearchResult):
    k = len(result.rows[0]["weights"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"w{i}" for i in range(k)] + ["accuracy", "chamfer", "seed", "status"])
        for r in result.rows:
            writer.writerow(
                [repr(w) for w in r["weights"]]
                + ["" if r["accuracy"] is None else repr(r["accuracy"]),
                   "" if r["chamfer"] is None else repr(r["chamfer"]),
                   "" if r["seed"] is None else r["seed"],
                   r["status"]]
            )
