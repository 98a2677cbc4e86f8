"""Encoder-decoder blocks and their composition.

Encoder: shared per-point MLP 3 -> 64 -> 128 -> d with ReLU between layers,
then a columnwise max pool (the permutation-symmetric reduction).  Decoders:
a one-stage folding decoder that lifts a fixed 2D lattice through a shared
MLP (d+2) -> 128 -> 64 -> 3, and a two-layer classification head
d -> 64 -> c.  All blocks read their widths from the parameter shapes, so
toy-sized parameter maps work too; ``init_params`` builds the defaults.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tape, TapeNode, Tensor
from .hypersphere import EmbeddingBatch, HypersphereConfig, build_hyper

ENCODER_HIDDEN = (64, 128)
FOLD_HIDDEN = (128, 64)
CLS_HIDDEN = 64
COORD_BOUND = 1.5
CKPT_MAGIC = b"HCKP"


@dataclass
class PointCloud:
    """n x 3 coordinates in normalized object space, optional class id."""

    points: Tensor
    label: int | None = None

    def __post_init__(self):
        arr = self.points.array
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
            raise gc.ShapeError(f"point cloud must be [n>=1, 3], got {arr.shape}")
        if np.abs(arr).max() > COORD_BOUND:
            raise ValueError(
                f"coordinates exceed +/-{COORD_BOUND} after normalization"
            )

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ArchConfig:
    """Which blocks are active and their sizes."""

    embedding_dim: int = 128
    num_classes: int = 4
    grid_side: int = 16
    hyper: HypersphereConfig | None = None
    completion: bool = True
    classification: bool = False

    def __post_init__(self):
        if not (self.completion or self.classification):
            raise ValueError("at least one decoder must be enabled")
        if self.hyper is not None and self.hyper.input_dim != self.embedding_dim:
            raise ValueError("hyper.input_dim must equal embedding_dim")

    @property
    def decoder_dim(self) -> int:
        """Width of the embedding the decoders consume."""
        return self.hyper.output_dim if self.hyper is not None else self.embedding_dim


@dataclass
class PipelineOutput:
    embedding_batch: EmbeddingBatch
    completion: Tensor | None = None
    logits: Tensor | None = None


# ---------------------------------------------------------------------------
# parameters


def _kaiming_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear_params(rng, name, fan_in, fan_out, out):
    out[f"{name}.weight"] = Tensor._wrap(_kaiming_uniform(rng, fan_in, fan_out))
    out[f"{name}.bias"] = Tensor._wrap(np.zeros(fan_out))


def init_params(cfg: ArchConfig, rng: np.random.Generator) -> dict:
    """Seeded Kaiming-uniform weights, zero biases; BN scale 1 / shift 0
    with running mean 0 / var 1."""
    params: dict[str, Tensor] = {}
    d = cfg.embedding_dim
    widths = (3,) + ENCODER_HIDDEN + (d,)
    for i in range(3):
        _linear_params(rng, f"encoder.l{i + 1}", widths[i], widths[i + 1], params)
    h = cfg.hyper
    if h is not None:
        hw = (h.input_dim,) + (h.output_dim,) * h.mlp_layers
        for i in range(h.mlp_layers):
            _linear_params(rng, f"hyper.l{i + 1}", hw[i], hw[i + 1], params)
            if h.use_relu_bn:
                params[f"hyper.l{i + 1}.bn_gamma"] = Tensor._wrap(np.ones(hw[i + 1]))
                params[f"hyper.l{i + 1}.bn_beta"] = Tensor._wrap(np.zeros(hw[i + 1]))
                params[f"hyper.l{i + 1}.bn_rmean"] = Tensor._wrap(np.zeros(hw[i + 1]))
                params[f"hyper.l{i + 1}.bn_rvar"] = Tensor._wrap(np.ones(hw[i + 1]))
    dd = cfg.decoder_dim
    if cfg.completion:
        fw = (dd + 2,) + FOLD_HIDDEN + (3,)
        for i in range(3):
            _linear_params(rng, f"fold.l{i + 1}", fw[i], fw[i + 1], params)
    if cfg.classification:
        _linear_params(rng, "cls.l1", dd, CLS_HIDDEN, params)
        _linear_params(rng, "cls.l2", CLS_HIDDEN, cfg.num_classes, params)
    return params


def param_count(cfg: ArchConfig) -> int:
    """Trainable parameter count, in closed form.

    encoder: (3+1)*64 + (64+1)*128 + (128+1)*d
    hyper (L layers, widths all output_dim=h): sum of (fan_in+1)*h, plus 2h
        per layer when use_relu_bn (gamma, beta; running stats not trained)
    fold: (d'+2+1)*128 + (128+1)*64 + (64+1)*3
    cls:  (d'+1)*64 + (64+1)*c
    """
    d = cfg.embedding_dim
    total = 4 * ENCODER_HIDDEN[0]
    total += (ENCODER_HIDDEN[0] + 1) * ENCODER_HIDDEN[1]
    total += (ENCODER_HIDDEN[1] + 1) * d
    h = cfg.hyper
    if h is not None:
        hw = (h.input_dim,) + (h.output_dim,) * h.mlp_layers
        for i in range(h.mlp_layers):
            total += (hw[i] + 1) * hw[i + 1]
            if h.use_relu_bn:
                total += 2 * hw[i + 1]
    dd = cfg.decoder_dim
    if cfg.completion:
        total += (dd + 2 + 1) * FOLD_HIDDEN[0]
        total += (FOLD_HIDDEN[0] + 1) * FOLD_HIDDEN[1]
        total += (FOLD_HIDDEN[1] + 1) * 3
    if cfg.classification:
        total += (dd + 1) * CLS_HIDDEN
        total += (CLS_HIDDEN + 1) * cfg.num_classes
    return total


def trainable_names(params: dict) -> list:
    """All parameter names except BN running statistics, sorted."""
    return sorted(n for n in params if not n.endswith(("bn_rmean", "bn_rvar")))


# ---------------------------------------------------------------------------
# graph builders (batched: clouds of equal size stacked along rows)


def _linear(x: TapeNode, w: TapeNode, b: TapeNode) -> TapeNode:
    y = gc.matmul(x, w)
    if y.value.ndim == 1:
        return gc.add(y, b)
    return gc.add_rowvec(y, b)


def _pnode(param_nodes, name):
    try:
        return param_nodes[name]
    except KeyError:
        raise gc.ContractError(f"missing parameter {name!r}") from None


def build_encoder(tape: Tape, stacked_points: TapeNode, points_per_cloud: int,
                  param_nodes: dict) -> TapeNode:
    """[b*n, 3] -> [b, d]: shared MLP then per-cloud columnwise max."""
    h = _linear(stacked_points, _pnode(param_nodes, "encoder.l1.weight"),
                _pnode(param_nodes, "encoder.l1.bias"))
    h = gc.relu(h)
    h = _linear(h, _pnode(param_nodes, "encoder.l2.weight"),
                _pnode(param_nodes, "encoder.l2.bias"))
    h = gc.relu(h)
    h = _linear(h, _pnode(param_nodes, "encoder.l3.weight"),
                _pnode(param_nodes, "encoder.l3.bias"))
    return gc.blockwise_max(h, points_per_cloud)


def fold_grid(grid_side: int) -> np.ndarray:
    """Fixed uniform lattice of grid_side^2 points covering [-0.5, 0.5]^2."""
    if grid_side < 1:
        raise ValueError("grid_side must be >= 1")
    axis = np.linspace(-0.5, 0.5, grid_side) if grid_side > 1 else np.zeros(1)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def build_fold(tape: Tape, emb_rows: TapeNode, param_nodes: dict,
               grid_side: int) -> TapeNode:
    """[b, d] -> [b*m, 3] with m = grid_side^2; each embedding row is
    repeated per grid point and concatenated with the 2D grid coordinate."""
    b = emb_rows.value.shape[0]
    grid = fold_grid(grid_side)
    m = grid.shape[0]
    tiled_grid = tape.constant(np.tile(grid, (b, 1)))
    h = gc.concat_cols(tiled_grid, gc.repeat_rows(emb_rows, m))
    h = gc.relu(_linear(h, _pnode(param_nodes, "fold.l1.weight"),
                        _pnode(param_nodes, "fold.l1.bias")))
    h = gc.relu(_linear(h, _pnode(param_nodes, "fold.l2.weight"),
                        _pnode(param_nodes, "fold.l2.bias")))
    return _linear(h, _pnode(param_nodes, "fold.l3.weight"),
                   _pnode(param_nodes, "fold.l3.bias"))


def build_classifier(tape: Tape, emb_rows: TapeNode, param_nodes: dict) -> TapeNode:
    """[b, d] -> [b, c] raw logits."""
    h = gc.relu(_linear(emb_rows, _pnode(param_nodes, "cls.l1.weight"),
                        _pnode(param_nodes, "cls.l1.bias")))
    return _linear(h, _pnode(param_nodes, "cls.l2.weight"),
                   _pnode(param_nodes, "cls.l2.bias"))


# ---------------------------------------------------------------------------
# single-sample surfaces


def _param_nodes(tape: Tape, params: dict) -> dict:
    return {
        name: tape.constant(t)
        for name, t in params.items()
        if not name.endswith(("bn_rmean", "bn_rvar"))
    }


def _param_values(params: dict) -> dict:
    return {n: (t.array if isinstance(t, Tensor) else np.asarray(t)) for n, t in params.items()}


def encode(points, params: dict) -> Tensor:
    """One cloud [n, 3] -> unconstrained embedding [d]."""
    arr = points.array if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise gc.ShapeError(f"points must be [n,3], got {arr.shape}")
    if arr.shape[0] < 1:
        raise gc.DomainError("cannot encode an empty point cloud")
    tape = Tape()
    emb = build_encoder(tape, tape.constant(arr), arr.shape[0], _param_nodes(tape, params))
    return Tensor._wrap(emb.value.reshape(-1).copy())


def fold_decode(embedding, params: dict, grid_side: int = 16) -> Tensor:
    """[d] -> completed cloud [grid_side^2, 3]."""
    arr = embedding.array if isinstance(embedding, Tensor) else np.asarray(embedding, dtype=np.float64)
    if arr.ndim != 1:
        raise gc.ShapeError(f"embedding must be rank 1, got {arr.shape}")
    tape = Tape()
    rows = tape.constant(arr.reshape(1, -1))
    out = build_fold(tape, rows, _param_nodes(tape, params), grid_side)
    return Tensor._wrap(out.value.copy())


def classify(embedding, params: dict, num_classes: int) -> Tensor:
    """[d] -> raw logits [num_classes]."""
    arr = embedding.array if isinstance(embedding, Tensor) else np.asarray(embedding, dtype=np.float64)
    if arr.ndim != 1:
        raise gc.ShapeError(f"embedding must be rank 1, got {arr.shape}")
    tape = Tape()
    rows = tape.constant(arr.reshape(1, -1))
    out = build_classifier(tape, rows, _param_nodes(tape, params))
    logits = out.value.reshape(-1)
    if logits.shape[0] != num_classes:
        raise gc.ShapeError(
            f"classifier emits {logits.shape[0]} logits, expected {num_classes}"
        )
    return Tensor._wrap(logits.copy())


def pipeline_forward(points, params: dict, cfg: ArchConfig) -> PipelineOutput:
    """encode -> optional hypersphere module -> every enabled decoder, all
    consuming the same final embedding.  Evaluation-mode (BN running stats)."""
    arr = points.array if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise gc.ShapeError(f"points must be [n>=1,3], got {arr.shape}")
    tape = Tape()
    pnodes = _param_nodes(tape, params)
    emb_rows = build_encoder(tape, tape.constant(arr), arr.shape[0], pnodes)
    if cfg.hyper is not None:
        pre, post, norms, _ = build_hyper(
            tape, emb_rows, pnodes, cfg.hyper,
            training=False, param_values=_param_values(params),
        )
        batch = EmbeddingBatch(
            pre_norm=Tensor._wrap(pre.value.reshape(-1).copy()),
            post_norm=Tensor._wrap(post.value.reshape(-1).copy()),
            norms=Tensor._wrap(norms.copy()),
        )
        final = post
    else:
        raw = emb_rows.value.reshape(-1)
        batch = EmbeddingBatch(
            pre_norm=Tensor._wrap(raw.copy()),
            post_norm=Tensor._wrap(raw.copy()),
            norms=Tensor._wrap(np.sqrt((raw * raw).sum()).reshape(1)),
        )
        final = emb_rows
    completion = logits = None
    if cfg.completion:
        completion = Tensor._wrap(build_fold(tape, final, pnodes, cfg.grid_side).value.copy())
    if cfg.classification:
        logits = Tensor._wrap(build_classifier(tape, final, pnodes).value.reshape(-1).copy())
    return PipelineOutput(embedding_batch=batch, completion=completion, logits=logits)


# ---------------------------------------------------------------------------
# checkpoint i/o: one file = magic + u64 manifest length + JSON manifest
# + concatenated HTEN records (offsets relative to payload start)


def save_checkpoint(path, params: dict, meta: dict | None = None):
    payload = bytearray()
    tensors = {}
    for name in sorted(params):
        rec = gc.tensor_bytes(params[name])
        tensors[name] = {"offset": len(payload), "shape": list(params[name].shape)}
        payload.extend(rec)
    manifest = json.dumps(
        {"tensors": tensors, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (params dict, meta dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise gc.FormatError("not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<Q", buf, 4)
    if len(buf) < 12 + mlen:
        raise gc.FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise gc.FormatError(f"unreadable checkpoint manifest: {e}") from None
    base = 12 + mlen
    params = {}
    for name, entry in manifest["tensors"].items():
        t, _ = gc.tensor_from_bytes(buf, base + int(entry["offset"]))
        if list(t.shape) != list(entry["shape"]):
            raise gc.FormatError(
                f"checkpoint tensor {name!r} shape {t.shape} != manifest {entry['shape']}"
            )
        params[name] = t
    return params, manifest.get("meta", {})
