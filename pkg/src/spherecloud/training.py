"""Seeded end-to-end training and evaluation loops.

One optimization step builds one tape over the whole minibatch: clouds are
stacked along rows, the encoder pools per cloud, the optional hypersphere
module normalizes the stacked embeddings, and each enabled decoder consumes
the shared embedding rows.  Per-task gradients are always computed
separately (the gradient-conflict diagnostic needs them); strategies then
combine them into one update.

Determinism: given (config, seed) every array op runs in a fixed order, so
repeated runs produce byte-identical metrics files.  Wall-clock timings go
to a separate sidecar file for exactly that reason.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datasynth, gradcore as gc, losses_optim as lo, multitask as mt
from .config import ExperimentConfig, config_to_text
from .diagnostics import pairwise_cosine_stats
from .gradcore import Tape, Tensor, backward
from .hypersphere import build_hyper
from .netblocks import (ArchConfig, build_classifier, build_encoder, build_fold,
                        save_checkpoint, trainable_names)

log = logging.getLogger(__name__)

SHARED_PREFIXES = ("encoder.", "hyper.")


class TrainDivergedError(RuntimeError):
    """A loss became non-finite; carries the aborting epoch and step."""

    def __init__(self, epoch: int, step: int, message: str):
        self.epoch = epoch
        self.step = step
        super().__init__(f"epoch {epoch}, step {step}: {message}")


@dataclass
class MetricsRecord:
    """One logging event (one per epoch).  wall_ms is written to the timing
    sidecar, never to the metrics stream, keeping metrics byte-reproducible."""

    run_id: str
    epoch: int
    step: int
    train_losses: dict
    eval_chamfer: float | None
    eval_accuracy: float | None
    mean_embedding_norm: float
    cosine_mean: float
    cosine_std: float
    grad_cosine: float | None
    grad_mag_completion: float | None
    grad_mag_classification: float | None
    wall_ms: float

    def to_json_dict(self) -> dict:
        d = {
            "run_id": self.run_id,
            "epoch": self.epoch,
            "step": self.step,
            "train_losses": self.train_losses,
            "eval_chamfer": self.eval_chamfer,
            "eval_chamfer_x1e4": None if self.eval_chamfer is None else self.eval_chamfer * 1e4,
            "eval_accuracy": self.eval_accuracy,
            "mean_embedding_norm": self.mean_embedding_norm,
            "cosine_mean": self.cosine_mean,
            "cosine_std": self.cosine_std,
            "grad_cosine": self.grad_cosine,
            "grad_mag_completion": self.grad_mag_completion,
            "grad_mag_classification": self.grad_mag_classification,
        }
        return d


@dataclass
class EvalResult:
    chamfer: float | None
    accuracy: float | None
    mean_pre_norm: float
    cosine_mean: float
    cosine_std: float
    pre_norm_rows: np.ndarray
    final_rows: np.ndarray
    labels: np.ndarray


@dataclass
class TrainResult:
    params: dict
    records: list
    final_eval: EvalResult
    checkpoint_path: str
    metrics_path: str
    grad_cosine_steps: list  # per-step shared-gradient cosine (multi-task)


def _rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def _param_leaf_nodes(tape: Tape, params: dict) -> dict:
    return {
        name: tape.constant(params[name])
        for name in params
        if not name.endswith(("bn_rmean", "bn_rvar"))
    }


def _forward_embedding(tape, stacked, n_points, pnodes, values, arch: ArchConfig, training):
    """Encoder + optional hypersphere module over one stacked batch."""
    enc = build_encoder(tape, stacked, n_points, pnodes)
    if arch.hyper is None:
        return enc, enc.value, {}
    pre, post, _, bn_updates = build_hyper(
        tape, enc, pnodes, arch.hyper, training=training, param_values=values,
    )
    return post, pre.value, bn_updates


def _task_loss_nodes(tape, final, samples, pnodes, arch: ArchConfig):
    losses = {}
    b = len(samples)
    if arch.completion:
        folded = build_fold(tape, final, pnodes, arch.grid_side)
        m = arch.grid_side ** 2
        total = None
        for i, s in enumerate(samples):
            pred = gc.rows_slice(folded, i * m, (i + 1) * m)
            li = lo.chamfer_node(pred, tape.constant(s.complete))
            total = li if total is None else gc.add(total, li)
        losses["completion"] = gc.scale(total, 1.0 / b)
    if arch.classification:
        logits = build_classifier(tape, final, pnodes)
        c = logits.value.shape[1]
        total = None
        for i, s in enumerate(samples):
            row = gc.reshape(gc.rows_slice(logits, i, i + 1), (c,))
            li = lo.softmax_cross_entropy_node(row, s.label)
            total = li if total is None else gc.add(total, li)
        losses["classification"] = gc.scale(total, 1.0 / b)
    return losses


def _grads_by_name(tape, loss_node, pnodes, trainables) -> dict:
    gm = backward(tape, loss_node)
    out = {}
    for name in trainables:
        node = pnodes.get(name)
        if node is not None and node in gm:
            out[name] = gm.array(node)
        else:
            shape = pnodes[name].value.shape if node is not None else ()
            out[name] = np.zeros(shape)
    return out


def _flatten_shared(grads: dict, shared_names) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in shared_names]) if shared_names else np.zeros(0)


def _unflatten_into(vec: np.ndarray, grads: dict, shared_names):
    pos = 0
    for n in shared_names:
        size = grads[n].size
        grads[n] = vec[pos:pos + size].reshape(grads[n].shape)
        pos += size


def _combine_task_grads(cfg: ExperimentConfig, task_grads: dict, loss_values: dict,
                        params: dict, trainables, shared_names, pcgrad_rng):
    """Merge per-task gradient maps into one update according to the strategy.
    Returns (combined grads, extra grads for strategy parameters)."""
    tasks = list(task_grads)
    if len(tasks) == 1:
        return dict(task_grads[tasks[0]]), {}

    if cfg.strategy == "pcgrad":
        tg = mt.TaskGradients(
            task_ids=tuple(tasks),
            vectors=[_flatten_shared(task_grads[t], shared_names) for t in tasks],
        )
        adjusted = mt.pcgrad(tg, pcgrad_rng)
        merged = {}
        for i, t in enumerate(tasks):
            g = dict(task_grads[t])
            _unflatten_into(adjusted.vectors[i], g, shared_names)
            for n in trainables:
                merged[n] = g[n] if n not in merged else merged[n] + g[n]
        return merged, {}

    if cfg.strategy == "uncertainty":
        merged = {}
        extra = {}
        for t in tasks:
            s = float(params[f"uncert.s_{t}"].item())
            w = float(np.exp(-s))
            for n in trainables:
                g = task_grads[t][n] * w
                merged[n] = g if n not in merged else merged[n] + g
            # d/ds [exp(-s) L + s] = 1 - exp(-s) L
            extra[f"uncert.s_{t}"] = np.float64(1.0 - w * loss_values[t])
        return merged, extra

    if cfg.strategy == "fixed":
        weights = cfg.strategy_weights
        if len(weights) != len(tasks):
            raise gc.ContractError(
                f"strategy.weights has {len(weights)} entries for {len(tasks)} tasks"
            )
    else:  # equal
        weights = (1.0,) * len(tasks)
    merged = {}
    for t, w in zip(tasks, weights):
        for n in trainables:
            g = task_grads[t][n] * w
            merged[n] = g if n not in merged else merged[n] + g
    return merged, {}


def init_model(cfg: ExperimentConfig) -> dict:
    from .netblocks import init_params

    params = init_params(cfg.arch(), _rng_stream(cfg.seed, 1))
    if cfg.strategy == "uncertainty" and cfg.tasks == "both":
        for t in cfg.task_names:
            params[f"uncert.s_{t}"] = Tensor(0.0)
    return params


def evaluate(params: dict, arch: ArchConfig, samples, batch_size: int = 32) -> EvalResult:
    """Evaluation pass: per-sample completion chamfer and classification
    accuracy, plus the embedding statistics the diagnostics read."""
    pre_rows = []
    final_rows = []
    labels = []
    chamfers = []
    correct = 0
    m = arch.grid_side ** 2
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        tape = Tape()
        stacked = tape.constant(np.concatenate([s.partial for s in batch], axis=0))
        pnodes = _param_leaf_nodes(tape, params)
        values = {n: t.array for n, t in params.items()}
        final, pre_val, _ = _forward_embedding(
            tape, stacked, batch[0].partial.shape[0], pnodes, values, arch, training=False,
        )
        pre_rows.append(pre_val)
        final_rows.append(final.value)
        labels.extend(s.label for s in batch)
        if arch.completion:
            folded = build_fold(tape, final, pnodes, arch.grid_side).value
            for i, s in enumerate(batch):
                value, _, _ = lo._chamfer_forward(folded[i * m:(i + 1) * m], s.complete)
                chamfers.append(value)
        if arch.classification:
            logits = build_classifier(tape, final, pnodes).value
            correct += int((np.argmax(logits, axis=1) == np.array([s.label for s in batch])).sum())
    pre = np.concatenate(pre_rows, axis=0)
    final = np.concatenate(final_rows, axis=0)
    norms = np.sqrt((pre * pre).sum(axis=1))
    if final.shape[0] >= 2:
        overall = pairwise_cosine_stats(final).overall.summary
        cos_mean, cos_std = overall["mean"], overall["std"]
    else:
        cos_mean = cos_std = 0.0
    return EvalResult(
        chamfer=float(np.mean(chamfers)) if chamfers else None,
        accuracy=(correct / len(samples)) if arch.classification else None,
        mean_pre_norm=float(norms.mean()),
        cosine_mean=cos_mean,
        cosine_std=cos_std,
        pre_norm_rows=pre,
        final_rows=final,
        labels=np.array(labels, dtype=np.int64),
    )


def _json_line(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n"


def train(cfg: ExperimentConfig, run_id: str | None = None) -> TrainResult:
    """The seeded loop: forward, per-task losses, strategy combine, optimizer
    step; one MetricsRecord per epoch; checkpoint at the end.

    Raises TrainDivergedError the moment any task loss is non-finite.
    """
    cfg.validate()
    arch = cfg.arch()
    run_id = run_id or f"train-s{cfg.seed}"
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_samples = datasynth.read_dataset(cfg.dataset_train)
    test_samples = datasynth.read_dataset(cfg.dataset_test)
    if not train_samples or not test_samples:
        raise gc.ContractError("train and test datasets must be non-empty")

    params = init_model(cfg)
    trainables = trainable_names(params)
    shared_names = [n for n in trainables if n.startswith(SHARED_PREFIXES)]
    opt = lo.make_optimizer(cfg.optim_kind, cfg.lr)
    shuffle_rng = _rng_stream(cfg.seed, 2)
    pcgrad_rng = _rng_stream(cfg.seed, 3)

    metrics_path = out_dir / "metrics.jsonl"
    timing_path = out_dir / "timing.jsonl"
    (out_dir / "config.txt").write_text(config_to_text(cfg))

    records = []
    grad_cosine_steps = []
    step = 0
    multi = len(cfg.task_names) > 1
    with open(metrics_path, "w") as mfh, open(timing_path, "w") as tfh:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(train_samples))
            loss_sums = {t: 0.0 for t in cfg.task_names}
            epoch_cosines = []
            epoch_mags = {t: [] for t in cfg.task_names}
            n_batches = 0
            for bstart in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[bstart:bstart + cfg.batch_size]]
                tape = Tape()
                stacked = tape.constant(np.concatenate([s.partial for s in batch], axis=0))
                pnodes = _param_leaf_nodes(tape, params)
                values = {n: t.array for n, t in params.items()}
                final, _, bn_updates = _forward_embedding(
                    tape, stacked, batch[0].partial.shape[0], pnodes, values, arch, training=True,
                )
                loss_nodes = _task_loss_nodes(tape, final, batch, pnodes, arch)
                loss_values = {t: float(n.value) for t, n in loss_nodes.items()}
                for t, v in loss_values.items():
                    if not np.isfinite(v):
                        raise TrainDivergedError(epoch, step, f"{t} loss is {v}")
                    loss_sums[t] += v

                task_grads = {
                    t: _grads_by_name(tape, node, pnodes, trainables)
                    for t, node in loss_nodes.items()
                }
                if multi:
                    g1 = _flatten_shared(task_grads["completion"], shared_names)
                    g2 = _flatten_shared(task_grads["classification"], shared_names)
                    m1 = float(np.sqrt(g1 @ g1))
                    m2 = float(np.sqrt(g2 @ g2))
                    if m1 > 0.0 and m2 > 0.0:
                        epoch_cosines.append(float(g1 @ g2) / (m1 * m2))
                    epoch_mags["completion"].append(m1)
                    epoch_mags["classification"].append(m2)

                merged, extra = _combine_task_grads(
                    cfg, task_grads, loss_values, params, trainables, shared_names, pcgrad_rng,
                )
                merged.update(extra)
                trainable_params = {n: params[n] for n in trainables}
                grads = {n: Tensor._wrap(merged[n]) for n in trainables}
                updated = lo.optimizer_step(opt, trainable_params, grads)
                params.update(updated)
                for name, arr in bn_updates.items():
                    params[name] = Tensor._wrap(arr)
                step += 1
                n_batches += 1

            ev = evaluate(params, arch, test_samples, batch_size=max(cfg.batch_size, 32))
            if multi:
                grad_cosine_steps.extend(epoch_cosines)
            rec = MetricsRecord(
                run_id=run_id,
                epoch=epoch,
                step=step,
                train_losses={t: loss_sums[t] / max(n_batches, 1) for t in cfg.task_names},
                eval_chamfer=ev.chamfer,
                eval_accuracy=ev.accuracy,
                mean_embedding_norm=ev.mean_pre_norm,
                cosine_mean=ev.cosine_mean,
                cosine_std=ev.cosine_std,
                grad_cosine=(float(np.mean(epoch_cosines)) if multi and epoch_cosines else None),
                grad_mag_completion=(float(np.mean(epoch_mags["completion"])) if multi else None),
                grad_mag_classification=(float(np.mean(epoch_mags["classification"])) if multi else None),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            records.append(rec)
            mfh.write(_json_line(rec.to_json_dict()))
            mfh.flush()
            tfh.write(_json_line({"epoch": epoch, "wall_ms": rec.wall_ms}))
            tfh.flush()
            log.info("%s epoch %d: losses=%s eval_chamfer=%s", run_id, epoch,
                     rec.train_losses, rec.eval_chamfer)

    final_eval = evaluate(params, arch, test_samples, batch_size=max(cfg.batch_size, 32))
    ckpt = out_dir / "checkpoint.hckp"
    save_checkpoint(ckpt, params, meta={"config": config_to_text(cfg), "run_id": run_id})
    return TrainResult(
        params=params,
        records=records,
        final_eval=final_eval,
        checkpoint_path=str(ckpt),
        metrics_path=str(metrics_path),
        grad_cosine_steps=grad_cosine_steps,
    )
