"""Dense float64 tensors and a define-by-run tape for reverse-mode gradients.

The primitive set is closed and fixed: matmul, same-shape arithmetic, a few
elementwise maps, row/column structural ops, column-max reductions, and the
loss / normalization primitives that ``losses_optim`` and ``hypersphere``
register through ``Tape.record``.  There is no general broadcasting; every
op states its exact shape contract and raises ``ShapeError`` otherwise.

The tape is rebuilt on every forward pass.  Tensors are immutable and safe
to share across threads; a tape belongs to a single thread.
"""

from __future__ import annotations

import struct
from typing import Callable

import numpy as np

HTEN_MAGIC = b"HTEN"


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation's contract."""


class DomainError(ValueError):
    """Input outside an operation's domain (empty point set, bad label)."""


class ContractError(ValueError):
    """Caller-side contract violated (non-scalar loss, cross-tape operands)."""


class FormatError(ValueError):
    """Malformed binary artifact: bad magic, bad version, or truncation."""


class Tensor:
    """Immutable dense float64 array with an explicit shape.

    Entries must be finite: construction rejects NaN/Inf so bad values
    surface where they are produced instead of propagating silently.
    A scalar is a rank-0 tensor.
    """

    __slots__ = ("_arr",)

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            try:
                arr = arr.reshape(tuple(shape))
            except ValueError:
                raise ShapeError(
                    f"cannot shape {arr.size} values into {tuple(shape)}"
                ) from None
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite (no NaN/Inf)")
        arr.flags.writeable = False
        self._arr = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array we own without copying; still validates finiteness."""
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite (no NaN/Inf)")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        t = cls.__new__(cls)
        t._arr = arr
        return t

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._arr

    @property
    def shape(self) -> tuple:
        return self._arr.shape

    @property
    def size(self) -> int:
        return self._arr.size

    @property
    def ndim(self) -> int:
        return self._arr.ndim

    def item(self) -> float:
        if self._arr.size != 1:
            raise ShapeError(f"item() needs a single value, shape is {self.shape}")
        return float(self._arr.reshape(()))

    def tolist(self):
        return self._arr.tolist()

    def ravel(self) -> np.ndarray:
        return self._arr.ravel()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._arr.tolist()!r})"


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


class TapeNode:
    """One recorded primitive application.

    Whatever the backward rule needs (saved tensors, index maps) is captured
    inside the ``backward_rule`` closure at record time, so backward never
    re-runs the forward computation.  ``backward_rule(upstream)`` returns one
    gradient array per parent, in parent order.
    """

    __slots__ = ("tape", "node_id", "op_kind", "parent_ids", "value", "backward_rule")

    def __init__(self, tape, node_id, op_kind, parent_ids, value, backward_rule):
        self.tape = tape
        self.node_id = node_id
        self.op_kind = op_kind
        self.parent_ids = parent_ids
        self.value = value
        self.backward_rule = backward_rule

    @property
    def output_shape(self) -> tuple:
        return self.value.shape

    def tensor(self) -> Tensor:
        return Tensor._wrap(self.value.copy())

    def __repr__(self):
        return f"TapeNode(#{self.node_id} {self.op_kind} {self.value.shape})"


class Tape:
    """Append-only record of one forward computation (define-by-run)."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, op_kind: str, parents: tuple, value, backward_rule) -> TapeNode:
        """Append a node; the extension point through which the fixed
        primitive set is registered (see module docstring).  Node values are
        owned by the tape and must never be mutated after recording."""
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands were recorded on different tapes")
        node = TapeNode(
            self, len(self.nodes), op_kind,
            tuple(p.node_id for p in parents),
            np.asarray(value, dtype=np.float64), backward_rule,
        )
        self.nodes.append(node)
        return node

    def constant(self, value) -> TapeNode:
        """Record a leaf; gradients may later be read at any leaf."""
        return self.record("leaf", (), _as_array(value), None)

    def __len__(self):
        return len(self.nodes)


class GradientMap:
    """Accumulated gradients keyed by tape node id.

    Every stored array has exactly the shape of its node's output.
    """

    def __init__(self, tape: Tape, grads: dict):
        self._tape = tape
        self._grads = grads

    @staticmethod
    def _nid(node) -> int:
        return node.node_id if isinstance(node, TapeNode) else int(node)

    def get(self, node, default=None):
        g = self._grads.get(self._nid(node))
        return default if g is None else Tensor._wrap(g.copy())

    def array(self, node) -> np.ndarray:
        """Raw gradient array (zero-copy); missing gradient raises KeyError."""
        return self._grads[self._nid(node)]

    def __contains__(self, node):
        return self._nid(node) in self._grads

    def __getitem__(self, node) -> Tensor:
        return Tensor._wrap(self._grads[self._nid(node)].copy())


def backward(tape: Tape, loss) -> GradientMap:
    """Reverse accumulation from a scalar loss node.

    Seeds 1.0 at the loss, walks nodes in reverse topological (= id) order,
    and sums contributions when a node feeds several consumers.
    """
    node = loss if isinstance(loss, TapeNode) else tape.nodes[int(loss)]
    if node.tape is not tape:
        raise ContractError("loss node does not belong to this tape")
    if node.value.shape != ():
        raise ContractError(f"loss must be scalar, got shape {node.value.shape}")
    grads: dict[int, np.ndarray] = {node.node_id: np.ones((), dtype=np.float64)}
    for nid in range(node.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        n = tape.nodes[nid]
        if n.backward_rule is None:
            continue
        parent_grads = n.backward_rule(g)
        for pid, pg in zip(n.parent_ids, parent_grads):
            if pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = np.asarray(pg, dtype=np.float64) if acc is None else acc + pg
    return GradientMap(tape, grads)


# ---------------------------------------------------------------------------
# primitives


def _same_shape(op: str, a: TapeNode, b: TapeNode):
    if a.value.shape != b.value.shape:
        raise ShapeError(
            f"{op} needs matching shapes, got {a.value.shape} and {b.value.shape}"
        )


def matmul(a: TapeNode, b: TapeNode) -> TapeNode:
    """Matrix/vector product for rank 1 or 2 operands (numpy matmul rules,
    no batching).  Backward: dA = dC·Bᵀ, dB = Aᵀ·dC."""
    va, vb = a.value, b.value
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2):
        raise ShapeError(f"matmul needs rank 1 or 2, got {va.shape} and {vb.shape}")
    if va.shape[-1] != vb.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {va.shape} x {vb.shape}")
    out = va @ vb

    def rule(up):
        a2 = va.reshape(1, -1) if va.ndim == 1 else va
        b2 = vb.reshape(-1, 1) if vb.ndim == 1 else vb
        u2 = up.reshape(a2.shape[0], b2.shape[1])
        return (u2 @ b2.T).reshape(va.shape), (a2.T @ u2).reshape(vb.shape)

    return a.tape.record("matmul", (a, b), out, rule)


def add(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("add", a, b)
    return a.tape.record("add", (a, b), a.value + b.value, lambda up: (up, up))


def sub(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("sub", a, b)
    return a.tape.record("sub", (a, b), a.value - b.value, lambda up: (up, -up))


def mul(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("mul", a, b)
    va, vb = a.value, b.value
    return a.tape.record("mul", (a, b), va * vb, lambda up: (up * vb, up * va))


def neg(a: TapeNode) -> TapeNode:
    return a.tape.record("neg", (a,), -a.value, lambda up: (-up,))


def scale(a: TapeNode, c: float) -> TapeNode:
    c = float(c)
    return a.tape.record("scale", (a,), a.value * c, lambda up: (up * c,))


def exp(a: TapeNode) -> TapeNode:
    out = np.exp(a.value)
    return a.tape.record("exp", (a,), out, lambda up: (up * out,))


def sqrt(a: TapeNode) -> TapeNode:
    if np.any(a.value < 0.0):
        raise DomainError("sqrt of a negative entry")
    out = np.sqrt(a.value)

    def rule(up):
        return (up * 0.5 / out,)

    return a.tape.record("sqrt", (a,), out, rule)


def recip(a: TapeNode) -> TapeNode:
    if np.any(a.value == 0.0):
        raise DomainError("reciprocal of a zero entry")
    out = 1.0 / a.value
    return a.tape.record("recip", (a,), out, lambda up: (-up * out * out,))


def relu(a: TapeNode) -> TapeNode:
    """max(0, x); subgradient at 0 is 0."""
    va = a.value
    return a.tape.record(
        "relu", (a,), np.maximum(va, 0.0), lambda up: (up * (va > 0.0),)
    )


def add_rowvec(x: TapeNode, v: TapeNode) -> TapeNode:
    """Add a length-d vector to every row of an [n, d] matrix (bias add)."""
    vx, vv = x.value, v.value
    if vx.ndim != 2 or vv.ndim != 1 or vx.shape[1] != vv.shape[0]:
        raise ShapeError(f"add_rowvec needs [n,d] and [d], got {vx.shape} and {vv.shape}")
    return x.tape.record(
        "add_rowvec", (x, v), vx + vv, lambda up: (up, up.sum(axis=0))
    )


def mul_rowvec(x: TapeNode, v: TapeNode) -> TapeNode:
    """Scale column j of an [n, d] matrix by v[j]."""
    vx, vv = x.value, v.value
    if vx.ndim != 2 or vv.ndim != 1 or vx.shape[1] != vv.shape[0]:
        raise ShapeError(f"mul_rowvec needs [n,d] and [d], got {vx.shape} and {vv.shape}")
    return x.tape.record(
        "mul_rowvec", (x, v), vx * vv,
        lambda up: (up * vv, (up * vx).sum(axis=0)),
    )


def scale_rows(x: TapeNode, s: TapeNode) -> TapeNode:
    """Scale row i of an [n, d] matrix by s[i]."""
    vx, vs = x.value, s.value
    if vx.ndim != 2 or vs.ndim != 1 or vx.shape[0] != vs.shape[0]:
        raise ShapeError(f"scale_rows needs [n,d] and [n], got {vx.shape} and {vs.shape}")
    return x.tape.record(
        "scale_rows", (x, s), vx * vs[:, None],
        lambda up: (up * vs[:, None], (up * vx).sum(axis=1)),
    )


def row_sum(x: TapeNode) -> TapeNode:
    """Sum each row of an [n, d] matrix down to [n]."""
    vx = x.value
    if vx.ndim != 2:
        raise ShapeError(f"row_sum needs a rank-2 input, got {vx.shape}")
    return x.tape.record(
        "row_sum", (x,), vx.sum(axis=1),
        lambda up: (np.repeat(up[:, None], vx.shape[1], axis=1),),
    )


def sum_all(a: TapeNode) -> TapeNode:
    """Sum every entry down to a scalar."""
    va = a.value
    return a.tape.record(
        "sum_all", (a,), va.sum(),
        lambda up: (np.full(va.shape, float(up)),),
    )


def max_over_points(x: TapeNode) -> TapeNode:
    """Columnwise max of an [n, d] matrix -> [d]; the permutation-invariant
    pooling.  Backward routes each column's gradient to its argmax row,
    first index on ties."""
    vx = x.value
    if vx.ndim != 2:
        raise ShapeError(f"max_over_points needs [n,d], got {vx.shape}")
    if vx.shape[0] < 1:
        raise DomainError("max_over_points over an empty point set")
    am = np.argmax(vx, axis=0)
    cols = np.arange(vx.shape[1])
    out = vx[am, cols]

    def rule(up):
        z = np.zeros_like(vx)
        z[am, cols] = up
        return (z,)

    return x.tape.record("max_over_points", (x,), out, rule)


def blockwise_max(x: TapeNode, block: int) -> TapeNode:
    """Columnwise max over each consecutive block of ``block`` rows:
    [b*block, d] -> [b, d].  Same tie rule as max_over_points."""
    vx = x.value
    if vx.ndim != 2 or block < 1 or vx.shape[0] % block != 0:
        raise ShapeError(f"blockwise_max needs [b*{block},d], got {vx.shape}")
    b = vx.shape[0] // block
    v3 = vx.reshape(b, block, vx.shape[1])
    am = np.argmax(v3, axis=1)
    out = np.take_along_axis(v3, am[:, None, :], axis=1)[:, 0, :]

    def rule(up):
        z = np.zeros_like(v3)
        np.put_along_axis(z, am[:, None, :], up[:, None, :], axis=1)
        return (z.reshape(vx.shape),)

    return x.tape.record("blockwise_max", (x,), out, rule)


def repeat_rows(x: TapeNode, times: int) -> TapeNode:
    """Repeat each row of an [n, d] matrix ``times`` consecutive times."""
    vx = x.value
    if vx.ndim != 2 or times < 1:
        raise ShapeError(f"repeat_rows needs [n,d] and times >= 1, got {vx.shape}")
    out = np.repeat(vx, times, axis=0)

    def rule(up):
        return (up.reshape(vx.shape[0], times, vx.shape[1]).sum(axis=1),)

    return x.tape.record("repeat_rows", (x,), out, rule)


def concat_cols(a: TapeNode, b: TapeNode) -> TapeNode:
    """[n, p] ++ [n, q] -> [n, p+q]."""
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[0] != vb.shape[0]:
        raise ShapeError(f"concat_cols needs equal row counts, got {va.shape} and {vb.shape}")
    p = va.shape[1]
    return a.tape.record(
        "concat_cols", (a, b), np.concatenate([va, vb], axis=1),
        lambda up: (up[:, :p], up[:, p:]),
    )


def rows_slice(x: TapeNode, start: int, stop: int) -> TapeNode:
    """Contiguous row slice [start, stop) of an [n, d] matrix."""
    vx = x.value
    if vx.ndim != 2 or not (0 <= start < stop <= vx.shape[0]):
        raise ShapeError(f"rows_slice [{start}:{stop}] invalid for {vx.shape}")
    out = vx[start:stop].copy()

    def rule(up):
        z = np.zeros_like(vx)
        z[start:stop] = up
        return (z,)

    return x.tape.record("rows_slice", (x,), out, rule)


def reshape(x: TapeNode, shape) -> TapeNode:
    shape = tuple(shape)
    vx = x.value
    if int(np.prod(shape, dtype=np.int64)) != vx.size:
        raise ShapeError(f"cannot reshape {vx.shape} to {shape}")
    return x.tape.record(
        "reshape", (x,), vx.reshape(shape), lambda up: (up.reshape(vx.shape),)
    )


# ---------------------------------------------------------------------------
# gradient verification oracle


def finite_diff_check(graph_fn: Callable, x, eps: float = 1e-6) -> float:
    """Max relative error between the tape gradient and central differences.

    ``graph_fn(tape, x_node) -> loss_node`` must be pure and scalar-valued.
    Per coordinate i the numeric derivative is
    (f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps) and the returned figure is
    max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    tape = Tape()
    xn = tape.constant(xt)
    loss = graph_fn(tape, xn)
    if loss.value.shape != ():
        raise ContractError(f"graph_fn must return a scalar, got {loss.value.shape}")
    g = backward(tape, loss).get(xn)
    analytic = (np.zeros(xt.shape) if g is None else g.array).ravel()

    base = xt.array.ravel()

    def value_at(flat: np.ndarray) -> float:
        t = Tape()
        return float(graph_fn(t, t.constant(flat.reshape(xt.shape))).value)

    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric = (value_at(plus) - value_at(minus)) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# HTEN binary serialization


def tensor_bytes(t: Tensor) -> bytes:
    """Little-endian record: magic "HTEN", u32 rank, u32 dims..., f64 payload."""
    arr = t.array
    head = struct.pack("<4sI", HTEN_MAGIC, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple:
    """Decode one HTEN record; returns (Tensor, bytes consumed)."""
    if len(buf) - offset < 8:
        raise FormatError("truncated tensor header")
    magic, rank = struct.unpack_from("<4sI", buf, offset)
    if magic != HTEN_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated tensor dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - pos < nbytes:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
    return Tensor._wrap(arr.astype(np.float64)), pos + nbytes - offset


def write_tensor(path, t: Tensor):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise FormatError(f"{len(buf) - used} trailing bytes after tensor record")
    return t
