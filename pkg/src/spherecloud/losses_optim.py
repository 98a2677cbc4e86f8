"""Chamfer distance, cross-entropy, and the three optimizers.

Chamfer convention (fixed): squared euclidean distances, mean over each
direction, directions summed.  Nearest neighbors are exact brute force;
ties break to the lowest index.  No weight decay and no gradient clipping
anywhere, so norm-growth behaviour stays unconfounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import TapeNode, Tensor


def _cloud(x) -> np.ndarray:
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise gc.ShapeError(f"point cloud must be [n,3], got {arr.shape}")
    if arr.shape[0] < 1:
        raise gc.DomainError("empty point set")
    return arr


def _chamfer_forward(a: np.ndarray, b: np.ndarray):
    diff = a[:, None, :] - b[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    nn_ab = np.argmin(d2, axis=1)  # ties -> lowest index
    nn_ba = np.argmin(d2, axis=0)
    value = d2[np.arange(a.shape[0]), nn_ab].mean() + d2[nn_ba, np.arange(b.shape[0])].mean()
    return float(value), nn_ab, nn_ba


def chamfer(a, b) -> float:
    """CD(A,B) = mean_a min_b ||a-b||^2 + mean_b min_a ||b-a||^2."""
    va, vb = _cloud(a), _cloud(b)
    value, _, _ = _chamfer_forward(va, vb)
    return value


def chamfer_node(a: TapeNode, b: TapeNode) -> TapeNode:
    """Tape primitive; gradients flow through the nearest-neighbor pairs,
    with the pairing treated as constant at the evaluation point."""
    va, vb = _cloud(a.value), _cloud(b.value)
    value, nn_ab, nn_ba = _chamfer_forward(va, vb)
    n, m = va.shape[0], vb.shape[0]

    def rule(up):
        u = float(up)
        da = np.zeros_like(va)
        db = np.zeros_like(vb)
        diff1 = (va - vb[nn_ab]) * (2.0 * u / n)
        da += diff1
        np.add.at(db, nn_ab, -diff1)
        diff2 = (vb - va[nn_ba]) * (2.0 * u / m)
        db += diff2
        np.add.at(da, nn_ba, -diff2)
        return da, db

    return a.tape.record("chamfer", (a, b), np.float64(value), rule)


def _ce_forward(logits: np.ndarray, label: int):
    z = logits - logits.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    return float(np.log(ez.sum()) - z[label]), p


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], max-shifted for stability."""
    arr = logits.array if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1:
        raise gc.ShapeError(f"logits must be rank 1, got {arr.shape}")
    if not (0 <= label < arr.shape[0]):
        raise gc.DomainError(f"label {label} out of range for {arr.shape[0]} classes")
    value, _ = _ce_forward(arr, int(label))
    return value


def softmax_cross_entropy_node(logits: TapeNode, label: int) -> TapeNode:
    arr = logits.value
    if arr.ndim != 1:
        raise gc.ShapeError(f"logits must be rank 1, got {arr.shape}")
    if not (0 <= label < arr.shape[0]):
        raise gc.DomainError(f"label {label} out of range for {arr.shape[0]} classes")
    value, p = _ce_forward(arr, int(label))

    def rule(up):
        d = p.copy()
        d[label] -= 1.0
        return (d * float(up),)

    return logits.tape.record("softmax_xent", (logits,), np.float64(value), rule)


# ---------------------------------------------------------------------------
# optimizers

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8


@dataclass
class OptimizerState:
    """Mutable optimizer state; one owner per training run.

    ``slots`` lazily holds the first/second moment arrays per parameter
    name, mirroring the parameter shapes.  step_count increments by exactly
    one per optimizer_step call.
    """

    kind: str
    lr: float
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0.0:
            raise ValueError("learning rate must be non-negative")


def make_optimizer(kind: str, lr: float) -> OptimizerState:
    return OptimizerState(kind=kind, lr=float(lr))


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> dict:
    """One update over a name->Tensor parameter map.

    ``grads`` must cover exactly the same names as ``params``; anything else
    is a contract error.  Returns the updated parameter map.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise gc.ContractError(
            f"gradients must cover exactly the parameter set; missing={missing}, extra={extra}"
        )
    state.step_count += 1
    t = state.step_count
    lr = state.lr
    out = {}
    for name in params:
        theta = params[name].array if isinstance(params[name], Tensor) else np.asarray(params[name])
        g = grads[name].array if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if theta.shape != g.shape:
            raise gc.ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        if state.kind == "sgd":
            new = theta - lr * g
        elif state.kind == "adam":
            slot = state.slots.setdefault(
                name, {"m": np.zeros_like(theta), "v": np.zeros_like(theta)}
            )
            slot["m"] = ADAM_BETA1 * slot["m"] + (1.0 - ADAM_BETA1) * g
            slot["v"] = ADAM_BETA2 * slot["v"] + (1.0 - ADAM_BETA2) * g * g
            m_hat = slot["m"] / (1.0 - ADAM_BETA1 ** t)
            v_hat = slot["v"] / (1.0 - ADAM_BETA2 ** t)
            new = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:  # rmsprop
            slot = state.slots.setdefault(name, {"v": np.zeros_like(theta)})
            slot["v"] = RMSPROP_RHO * slot["v"] + (1.0 - RMSPROP_RHO) * g * g
            new = theta - lr * g / (np.sqrt(slot["v"]) + RMSPROP_EPS)
        out[name] = Tensor._wrap(new)
    return out
