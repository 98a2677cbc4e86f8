"""Experiment drivers over the training loop: learning-rate sweeps, the
module ablation, the multi-task strategy comparison, and the diagnostic
bundle for a trained checkpoint.

Every driver runs each cell with a fixed seed, records per-cell failures as
sentinel rows instead of aborting the table, and assembles output rows in
declared order so the CSVs are reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import datasynth, multitask as mt
from .config import ExperimentConfig, config_to_text, parse_config_text, with_updates
from .diagnostics import (interpolate_embeddings, norm_histogram,
                          pairwise_cosine_stats, weight_svd)
from .gradcore import Tape, Tensor
from .hypersphere import DegenerateEmbeddingError
from .netblocks import build_fold, load_checkpoint
from .training import TrainDivergedError, evaluate, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("base", "mlp1", "mlp2", "relu_bn", "l1", "l2", "l3")
MULTITASK_GROUPS = ("single_completion", "single_classification",
                    "equal", "pcgrad", "uncertainty", "weight_search")
DEFAULT_SWEEP_LRS = (1e-3, 1e-2, 1e-1, 1.0)


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _run_cell(cfg: ExperimentConfig, run_id: str):
    """Train one table cell; divergence and degenerate embeddings become
    sentinel entries rather than aborting the table."""
    try:
        result = train(cfg, run_id=run_id)
        return {
            "status": "ok",
            "chamfer": result.final_eval.chamfer,
            "accuracy": result.final_eval.accuracy,
            "result": result,
            "error": "",
        }
    except (TrainDivergedError, DegenerateEmbeddingError) as e:
        log.warning("run %s diverged: %s", run_id, e)
        return {"status": "diverged", "chamfer": None, "accuracy": None,
                "result": None, "error": f"{type(e).__name__}: {e}"}


def ablation_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """The seven ablation rows.  `base` disables the module; mlp1/mlp2 use
    l2 with one/two MLP layers; relu_bn adds ReLU + batch norm to mlp1; the
    l1/l2/l3 rows isolate the normalization type with no MLP layer."""
    if variant == "base":
        return with_updates(cfg, hyper_enabled=False)
    updates = {"hyper_enabled": True, "hyper_use_relu_bn": False, "hyper_output_dim": 0}
    if variant == "mlp1":
        updates.update(hyper_mlp_layers=1, hyper_norm_p=2)
    elif variant == "mlp2":
        updates.update(hyper_mlp_layers=2, hyper_norm_p=2)
    elif variant == "relu_bn":
        updates.update(hyper_mlp_layers=1, hyper_norm_p=2, hyper_use_relu_bn=True)
    elif variant in ("l1", "l2", "l3"):
        updates.update(hyper_mlp_layers=0, hyper_norm_p=int(variant[1]))
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return with_updates(cfg, **updates)


def sweep_lr(cfg: ExperimentConfig, lrs=DEFAULT_SWEEP_LRS) -> list:
    """Train every (lr, hyper on/off) pair with the config's seed; divergent
    runs become sentinel rows.  Writes sweep.csv under the config out dir."""
    seen = []
    for lr in lrs:
        lr = float(lr)
        if lr <= 0.0:
            raise ValueError(f"learning rates must be positive, got {lr}")
        if lr in seen:
            log.warning("sweep_lr: dropping duplicated learning rate %r", lr)
            continue
        seen.append(lr)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for lr in seen:
        for variant, enabled in (("hyper_on", True), ("hyper_off", False)):
            run_dir = out_root / "sweep" / f"lr{lr:g}-{variant}"
            run_cfg = with_updates(cfg, lr=lr, hyper_enabled=enabled, out_dir=str(run_dir))
            cell = _run_cell(run_cfg, run_id=f"sweep-lr{lr:g}-{variant}-s{cfg.seed}")
            rows.append({
                "lr": lr, "variant": variant, "status": cell["status"],
                "chamfer": cell["chamfer"], "accuracy": cell["accuracy"],
                "error": cell["error"],
            })
    _write_csv(
        out_root / "sweep.csv",
        ["lr", "variant", "status", "chamfer", "chamfer_x1e4", "accuracy", "error"],
        [[_fmt(r["lr"]), r["variant"], r["status"], _fmt(r["chamfer"]),
          _fmt(None if r["chamfer"] is None else r["chamfer"] * 1e4),
          _fmt(r["accuracy"]), r["error"]] for r in rows],
    )
    return rows


def ablate(cfg: ExperimentConfig) -> list:
    """Seven variants, one seed, declared order; writes ablation.csv."""
    if cfg.tasks not in ("completion", "both"):
        raise ValueError("ablation requires the completion task")
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in ABLATION_VARIANTS:
        run_cfg = ablation_config(
            with_updates(cfg, out_dir=str(out_root / "ablate" / variant)), variant,
        )
        cell = _run_cell(run_cfg, run_id=f"ablate-{variant}-s{cfg.seed}")
        rows.append({
            "variant": variant, "status": cell["status"],
            "chamfer": cell["chamfer"], "error": cell["error"],
        })
    _write_csv(
        out_root / "ablation.csv",
        ["variant", "status", "chamfer", "chamfer_x1e4", "error"],
        [[r["variant"], r["status"], _fmt(r["chamfer"]),
          _fmt(None if r["chamfer"] is None else r["chamfer"] * 1e4), r["error"]]
         for r in rows],
    )
    return rows


def s_vs_m_percent(cd_single: float, cd_multi_best: float) -> float:
    """100 * (CD_single - CD_multi_best) / CD_single: positive means the
    best multi-task run improved on single-task completion."""
    return 100.0 * (cd_single - cd_multi_best) / cd_single


def compare_multitask(cfg: ExperimentConfig) -> list:
    """For hyper off/on: single-task completion, single-task classification,
    and joint training under equal / pcgrad / uncertainty / weight-search.
    Writes compare.csv plus one weight_search CSV per variant."""
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant, enabled in (("hyper_off", False), ("hyper_on", True)):
        base = with_updates(cfg, hyper_enabled=enabled)
        cells = {}

        single_comp = with_updates(
            base, tasks="completion", strategy="equal",
            out_dir=str(out_root / "compare" / variant / "single_completion"),
        )
        cells["single_completion"] = _run_cell(single_comp, f"cmp-{variant}-single-comp-s{cfg.seed}")

        single_cls = with_updates(
            base, tasks="classification", strategy="equal",
            out_dir=str(out_root / "compare" / variant / "single_classification"),
        )
        cells["single_classification"] = _run_cell(single_cls, f"cmp-{variant}-single-cls-s{cfg.seed}")

        for strategy in ("equal", "pcgrad", "uncertainty"):
            run_cfg = with_updates(
                base, tasks="both", strategy=strategy,
                out_dir=str(out_root / "compare" / variant / strategy),
            )
            cells[strategy] = _run_cell(run_cfg, f"cmp-{variant}-{strategy}-s{cfg.seed}")

        def _train_eval(weights, _variant=variant, _base=base):
            tag = "w" + "-".join(f"{w:g}" for w in weights)
            run_cfg = with_updates(
                _base, tasks="both", strategy="fixed", strategy_weights=tuple(weights),
                out_dir=str(out_root / "compare" / _variant / "wsearch" / tag),
            )
            result = train(run_cfg, run_id=f"cmp-{_variant}-{tag}-s{cfg.seed}")
            return {"chamfer": result.final_eval.chamfer,
                    "accuracy": result.final_eval.accuracy, "seed": cfg.seed}

        try:
            search = mt.weight_search(mt.DEFAULT_WEIGHT_GRID, _train_eval)
            mt.write_weight_search_csv(out_root / f"weight_search_{variant}.csv", search)
            best = min((r for r in search.rows if r["status"] == "ok"),
                       key=lambda r: r["chamfer"])
            cells["weight_search"] = {"status": "ok", "chamfer": best["chamfer"],
                                      "accuracy": best["accuracy"],
                                      "error": f"weights={best['weights']}"}
        except RuntimeError as e:
            cells["weight_search"] = {"status": "diverged", "chamfer": None,
                                      "accuracy": None, "error": str(e)}

        multi_groups = ("equal", "pcgrad", "uncertainty", "weight_search")
        ok_multi = [g for g in multi_groups if cells[g]["status"] == "ok"]
        best_group = min(ok_multi, key=lambda g: cells[g]["chamfer"]) if ok_multi else None
        single_cd = cells["single_completion"]["chamfer"]
        for group in MULTITASK_GROUPS:
            cell = cells[group]
            svm = None
            if group == best_group and single_cd is not None:
                svm = s_vs_m_percent(single_cd, cell["chamfer"])
            rows.append({
                "variant": variant, "group": group, "status": cell["status"],
                "accuracy": cell["accuracy"], "chamfer": cell["chamfer"],
                "s_vs_m_pct": svm, "note": cell.get("error", ""),
            })
    _write_csv(
        out_root / "compare.csv",
        ["variant", "group", "status", "accuracy", "chamfer", "chamfer_x1e4",
         "s_vs_m_pct", "note"],
        [[r["variant"], r["group"], r["status"], _fmt(r["accuracy"]),
          _fmt(r["chamfer"]), _fmt(None if r["chamfer"] is None else r["chamfer"] * 1e4),
          _fmt(r["s_vs_m_pct"]), r["note"]] for r in rows],
    )
    return rows


# ---------------------------------------------------------------------------
# diagnostics over a checkpoint


def _arch_from_meta(meta: dict):
    cfg = parse_config_text(meta["config"])
    return cfg, cfg.arch()


def decode_embedding(params: dict, embedding, grid_side: int) -> np.ndarray:
    tape = Tape()
    rows = tape.constant(np.asarray(
        embedding.array if isinstance(embedding, Tensor) else embedding
    ).reshape(1, -1))
    pnodes = {n: tape.constant(t) for n, t in params.items()
              if not n.endswith(("bn_rmean", "bn_rvar"))}
    return build_fold(tape, rows, pnodes, grid_side).value.copy()


def diagnose(checkpoint_path, dataset_path, out_dir, bins: int = 20,
             interpolate_pair=None, interpolate_steps: int = 5,
             interpolate_mode: str | None = None) -> dict:
    """Compute the full diagnostic bundle for a trained model: pre-norm norm
    histogram, pairwise cosine stats (overall and per class), the singular
    spectrum of the encoder's final linear weight, and optionally a decoded
    interpolation sequence.  One JSON file per artifact."""
    params, meta = load_checkpoint(checkpoint_path)
    cfg, arch = _arch_from_meta(meta)
    samples = datasynth.read_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ev = evaluate(params, arch, samples)
    bundle = {}

    hist = norm_histogram(ev.pre_norm_rows, bins=bins)
    bundle["norm_histogram"] = hist.to_json_dict()

    stats = pairwise_cosine_stats(ev.final_rows, class_ids=ev.labels, bins=bins)
    bundle["cosine_stats"] = {
        "overall": stats.overall.to_json_dict(),
        "per_class": {str(k): h.to_json_dict() for k, h in (stats.per_class or {}).items()},
    }

    spectrum = weight_svd(params["encoder.l3.weight"])
    bundle["svd_spectrum"] = spectrum.to_json_dict()

    final_norms = np.sqrt((ev.final_rows * ev.final_rows).sum(axis=1))
    bundle["metadata"] = {
        "hyper_enabled": arch.hyper is not None,
        "samples": len(samples),
        "eval_chamfer": ev.chamfer,
        "eval_accuracy": ev.accuracy,
        "mean_pre_norm": ev.mean_pre_norm,
        "post_norm_max_unit_deviation": (
            float(np.abs(final_norms - 1.0).max()) if arch.hyper is not None else None
        ),
    }

    if interpolate_pair is not None:
        i, j = interpolate_pair
        mode = interpolate_mode or ("spherical" if arch.hyper is not None else "linear")
        seq = interpolate_embeddings(
            ev.final_rows[i], ev.final_rows[j], interpolate_steps, mode=mode,
        )
        clouds = [decode_embedding(params, e, arch.grid_side).tolist() for e in seq]
        bundle["interpolation"] = {
            "src_index": int(i), "dst_index": int(j), "mode": mode,
            "steps": interpolate_steps, "clouds": clouds,
        }

    for name, doc in bundle.items():
        with open(out / f"{name}.json", "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
    return bundle


def eval_checkpoint(checkpoint_path, dataset_path) -> dict:
    params, meta = load_checkpoint(checkpoint_path)
    cfg, arch = _arch_from_meta(meta)
    samples = datasynth.read_dataset(dataset_path)
    ev = evaluate(params, arch, samples)
    return {
        "chamfer": ev.chamfer,
        "chamfer_x1e4": None if ev.chamfer is None else ev.chamfer * 1e4,
        "accuracy": ev.accuracy,
        "mean_pre_norm": ev.mean_pre_norm,
        "cosine_mean": ev.cosine_mean,
        "cosine_std": ev.cosine_std,
    }
