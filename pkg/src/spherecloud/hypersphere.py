"""Unit-hypersphere embedding module: MLP transform + p-norm row normalization.

The l2 case installs the analytic backward rule

    dL/df = (g - f_hat * <g, f_hat>) / ||f||_2        with  g = dL/df_hat,

which is tangential to f.  Three consequences carried by this module and
checked by the test suite: the gradient is orthogonal to the pre-norm
embedding, vanilla SGD monotonically grows the pre-norm magnitude, and the
gradient magnitude shrinks as 1/||f||_2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tape, TapeNode, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch


class DegenerateEmbeddingError(ValueError):
    """A row's p-norm fell at or below the guard; training must abort
    rather than emit NaN.  Carries the offending row index."""

    def __init__(self, row_index: int, norm: float, eps_guard: float):
        self.row_index = int(row_index)
        self.norm = float(norm)
        super().__init__(
            f"embedding row {row_index} has norm {norm:.3e} <= guard {eps_guard:.1e}"
        )


@dataclass(frozen=True)
class HypersphereConfig:
    """Shape of the module: how many linear layers before normalization,
    whether each is followed by ReLU + batch norm, and which p-norm."""

    input_dim: int
    output_dim: int
    mlp_layers: int = 1
    use_relu_bn: bool = False
    norm_p: int = 2
    eps_guard: float = 1e-12

    def __post_init__(self):
        if self.norm_p not in (1, 2, 3):
            raise ValueError(f"norm_p must be 1, 2 or 3, got {self.norm_p}")
        if self.mlp_layers not in (0, 1, 2):
            raise ValueError(f"mlp_layers must be 0, 1 or 2, got {self.mlp_layers}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("dims must be >= 1")
        if self.eps_guard <= 0.0:
            raise ValueError("eps_guard must be positive")
        if self.mlp_layers == 0 and self.input_dim != self.output_dim:
            raise ValueError("mlp_layers=0 requires input_dim == output_dim")


@dataclass
class EmbeddingBatch:
    """Per-batch record of the normalization: f values before (pre_norm),
    after (post_norm), and the row p-norms."""

    pre_norm: Tensor
    post_norm: Tensor
    norms: Tensor


def _rows(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise gc.ShapeError(f"expected [d] or [b,d], got {arr.shape}")


def _pnorms(rows: np.ndarray, p: int) -> np.ndarray:
    if p == 2:
        return np.sqrt((rows * rows).sum(axis=1))
    if p == 1:
        return np.abs(rows).sum(axis=1)
    return (np.abs(rows) ** 3).sum(axis=1) ** (1.0 / 3.0)


def _guard_norms(norms: np.ndarray, eps_guard: float):
    bad = np.nonzero(norms <= eps_guard)[0]
    if bad.size:
        i = int(bad[0])
        raise DegenerateEmbeddingError(i, float(norms[i]), eps_guard)


def normalize(f, p: int = 2, eps_guard: float = 1e-12) -> Tensor:
    """Row-normalize onto the unit p-sphere: row_i -> row_i / ||row_i||_p."""
    if p not in (1, 2, 3):
        raise ValueError(f"p must be 1, 2 or 3, got {p}")
    arr = f.array if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    rows = _rows(arr)
    norms = _pnorms(rows, p)
    _guard_norms(norms, eps_guard)
    out = rows / norms[:, None]
    return Tensor._wrap(out.reshape(arr.shape))


def _l2_backward(rows: np.ndarray, g: np.ndarray, norms: np.ndarray) -> np.ndarray:
    unit = rows / norms[:, None]
    inner = (g * unit).sum(axis=1)
    return (g - unit * inner[:, None]) / norms[:, None]


def _generic_backward(rows, g, norms, p):
    # d||f||_p/df = sign(f)|f|^(p-1) / ||f||_p^(p-1); subgradient 0 at 0
    norm_grad = np.sign(rows) * np.abs(rows) ** (p - 1) / (norms ** (p - 1))[:, None]
    inner = (g * rows).sum(axis=1)
    return g / norms[:, None] - norm_grad * (inner / (norms * norms))[:, None]


def normalize_backward_l2(f, upstream, eps_guard: float = 1e-12) -> Tensor:
    """The analytic l2 rule: (g - f_hat <g, f_hat>) / ||f||_2 per row."""
    fa = f.array if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    ga = upstream.array if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=np.float64)
    if fa.shape != ga.shape:
        raise gc.ShapeError(f"shapes disagree: {fa.shape} vs {ga.shape}")
    rows = _rows(fa)
    norms = _pnorms(rows, 2)
    _guard_norms(norms, eps_guard)
    out = _l2_backward(rows, _rows(ga), norms)
    return Tensor._wrap(out.reshape(fa.shape))


def normalize_rows(x: TapeNode, p: int = 2, eps_guard: float = 1e-12) -> TapeNode:
    """Tape primitive for row normalization.  p=2 installs the analytic
    backward rule; p in {1, 3} uses the generic quotient-rule gradient."""
    if p not in (1, 2, 3):
        raise ValueError(f"p must be 1, 2 or 3, got {p}")
    arr = x.value
    rows = _rows(arr)
    norms = _pnorms(rows, p)
    _guard_norms(norms, eps_guard)
    out = (rows / norms[:, None]).reshape(arr.shape)

    def rule(up):
        g = _rows(up)
        if p == 2:
            d = _l2_backward(rows, g, norms)
        else:
            d = _generic_backward(rows, g, norms, p)
        return (d.reshape(arr.shape),)

    return x.tape.record("normalize_rows", (x,), out, rule)


def normalize_rows_generic(x: TapeNode) -> TapeNode:
    """l2 row normalization composed from generic tape primitives; exists as
    the independent differentiation path the analytic rule is checked against."""
    arr = x.value
    squeeze = arr.ndim == 1
    if squeeze:
        x = gc.reshape(x, (1, arr.size))
    norms = gc.sqrt(gc.row_sum(gc.mul(x, x)))
    out = gc.scale_rows(x, gc.recip(norms))
    return gc.reshape(out, arr.shape) if squeeze else out


def row_pnorms(f, p: int = 2) -> Tensor:
    """Row p-norms of [b,d] (or a single [d] row) as a rank-1 tensor."""
    arr = f.array if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    return Tensor._wrap(_pnorms(_rows(arr), p))


# ---------------------------------------------------------------------------
# batch norm (the ReLU&BN ablation variant)


def batchnorm_train(x: TapeNode, gamma: TapeNode, beta: TapeNode):
    """Training-mode batch norm over the batch dimension of [b, d].

    Returns (node, batch_mean, batch_var); the caller folds the batch
    statistics into its running estimates.
    """
    vx, vg = x.value, gamma.value
    if vx.ndim != 2 or vg.ndim != 1 or vx.shape[1] != vg.shape[0]:
        raise gc.ShapeError(f"batchnorm needs [b,d] and [d], got {vx.shape} and {vg.shape}")
    b = vx.shape[0]
    mean = vx.mean(axis=0)
    var = vx.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (vx - mean) * inv_std
    out = xhat * vg + beta.value

    def rule(up):
        dxhat = up * vg
        dx = (inv_std / b) * (
            b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx, (up * xhat).sum(axis=0), up.sum(axis=0)

    node = x.tape.record("batchnorm", (x, gamma, beta), out, rule)
    return node, mean, var


def batchnorm_eval(x: TapeNode, gamma, beta, running_mean, running_var) -> TapeNode:
    """Evaluation-mode batch norm: affine map using running statistics."""
    tape = x.tape
    k = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(running_var) + BN_EPS)
    shift = np.asarray(beta, dtype=np.float64) - np.asarray(running_mean) * k
    return gc.add_rowvec(gc.mul_rowvec(x, tape.constant(k)), tape.constant(shift))


# ---------------------------------------------------------------------------
# module forward


def _param(params, name):
    try:
        return params[name]
    except KeyError:
        raise gc.ContractError(f"missing parameter {name!r}") from None


def build_hyper(tape: Tape, emb: TapeNode, param_nodes: dict, cfg: HypersphereConfig,
                training: bool = False, param_values: dict | None = None):
    """Graph builder: MLP layers (+ optional ReLU/BN), then normalization.

    ``emb`` is [b, input_dim].  Returns (pre_norm, post_norm, norms ndarray,
    bn_updates) where bn_updates maps running-stat parameter names to their
    new values (empty unless training with use_relu_bn).
    """
    h = emb
    bn_updates: dict[str, np.ndarray] = {}
    for li in range(1, cfg.mlp_layers + 1):
        w = _param(param_nodes, f"hyper.l{li}.weight")
        bias = _param(param_nodes, f"hyper.l{li}.bias")
        h = gc.add_rowvec(gc.matmul(h, w), bias)
        if cfg.use_relu_bn:
            h = gc.relu(h)
            gamma = _param(param_nodes, f"hyper.l{li}.bn_gamma")
            beta = _param(param_nodes, f"hyper.l{li}.bn_beta")
            if training:
                h, bmean, bvar = batchnorm_train(h, gamma, beta)
                vals = param_values if param_values is not None else {}
                rmean = np.asarray(vals[f"hyper.l{li}.bn_rmean"], dtype=np.float64)
                rvar = np.asarray(vals[f"hyper.l{li}.bn_rvar"], dtype=np.float64)
                bn_updates[f"hyper.l{li}.bn_rmean"] = (
                    BN_MOMENTUM * rmean + (1.0 - BN_MOMENTUM) * bmean
                )
                bn_updates[f"hyper.l{li}.bn_rvar"] = (
                    BN_MOMENTUM * rvar + (1.0 - BN_MOMENTUM) * bvar
                )
            else:
                vals = param_values if param_values is not None else {}
                h = batchnorm_eval(
                    h, gamma.value, beta.value,
                    vals[f"hyper.l{li}.bn_rmean"], vals[f"hyper.l{li}.bn_rvar"],
                )
    pre = h
    post = normalize_rows(pre, cfg.norm_p, cfg.eps_guard)
    norms = _pnorms(_rows(pre.value), cfg.norm_p)
    return pre, post, norms, bn_updates


def hyper_forward(embedding, params: dict, cfg: HypersphereConfig) -> EmbeddingBatch:
    """Evaluation-mode forward of the module over a [b, input_dim] batch
    (a single [input_dim] row is accepted and kept 1-D)."""
    arr = embedding.array if isinstance(embedding, Tensor) else np.asarray(embedding, dtype=np.float64)
    squeeze = arr.ndim == 1
    rows = _rows(arr)
    if rows.shape[1] != cfg.input_dim:
        raise gc.ShapeError(f"embedding dim {rows.shape[1]} != input_dim {cfg.input_dim}")
    tape = Tape()
    emb = tape.constant(rows)
    values = {k: (v.array if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    param_nodes = {k: tape.constant(v) for k, v in values.items() if not k.endswith(("bn_rmean", "bn_rvar"))}
    pre, post, norms, _ = build_hyper(tape, emb, param_nodes, cfg, training=False, param_values=values)
    pre_v, post_v = pre.value, post.value
    if squeeze:
        pre_v, post_v = pre_v.reshape(-1), post_v.reshape(-1)
    return EmbeddingBatch(
        pre_norm=Tensor._wrap(pre_v.copy()),
        post_norm=Tensor._wrap(post_v.copy()),
        norms=Tensor._wrap(norms.copy()),
    )


# ---------------------------------------------------------------------------
# norm-growth trace


def sgd_norm_trace(f0, grad_fn, lr: float, steps: int) -> list:
    """Iterate f <- f - lr * grad_fn(f) and return [||f_0||_2, ..., ||f_steps||_2].

    When grad_fn routes through normalize_backward_l2 the sequence is
    monotone non-decreasing: the update is orthogonal to f, so
    ||f_next||^2 = ||f||^2 + lr^2 ||grad||^2.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    f = np.array(f0.array if isinstance(f0, Tensor) else f0, dtype=np.float64)
    trace = [float(np.sqrt((f * f).sum()))]
    for _ in range(steps):
        g = grad_fn(Tensor._wrap(f.copy()))
        g = g.array if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        f = f - lr * g
        trace.append(float(np.sqrt((f * f).sum())))
    return trace
