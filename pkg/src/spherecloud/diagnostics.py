"""Embedding-geometry and training-dynamics measurements.

Everything here is a pure function over snapshots of model state: norm and
pairwise-cosine histograms, the singular spectrum of a weight matrix (with
its condition number), per-task gradient conflict, the orthogonality
residual between an embedding and its gradient, and embedding interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

SV_RETAIN_FACTOR = 1e-10  # singular values below this * max are rank noise


class NumericError(RuntimeError):
    """An iterative numeric procedure failed to converge."""


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    summary: dict

    def to_json_dict(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "summary": {k: (int(v) if k == "count" else float(v)) for k, v in self.summary.items()},
        }


@dataclass
class CosineStats:
    overall: Histogram
    per_class: dict | None = None


@dataclass
class SvdSpectrum:
    singular_values: np.ndarray  # non-increasing, all >= 0
    mean_sv: float
    max_sv: float
    condition_number: float
    reconstruction_residual: float

    def to_json_dict(self) -> dict:
        return {
            "singular_values": [float(s) for s in self.singular_values],
            "mean_sv": self.mean_sv,
            "max_sv": self.max_sv,
            "condition_number": self.condition_number,
            "reconstruction_residual": self.reconstruction_residual,
        }


def _as2d(x) -> np.ndarray:
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise gc.ShapeError(f"expected a rank-2 array, got {arr.shape}")
    return arr


def _vec(x) -> np.ndarray:
    arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr.ravel()


def _histogram(values: np.ndarray, bins: int) -> Histogram:
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(
        bin_edges=edges,
        counts=counts,
        summary={
            "mean": float(values.mean()),
            "std": float(values.std()),
            "min": float(values.min()),
            "max": float(values.max()),
            "count": int(values.size),
        },
    )


def norm_histogram(embeddings, bins: int = 20) -> Histogram:
    """Histogram of row l2 norms (embeddings taken before normalization)."""
    rows = _as2d(embeddings)
    if rows.shape[0] < 1:
        raise gc.DomainError("need at least one embedding")
    norms = np.sqrt((rows * rows).sum(axis=1))
    return _histogram(norms, bins)


def _pairwise_cosines(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt((rows * rows).sum(axis=1))
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise gc.DomainError(f"zero-norm embedding row {int(zero[0])}")
    unit = rows / norms[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(rows.shape[0], k=1)
    return sim[iu]


def pairwise_cosine_stats(embeddings, class_ids=None, bins: int = 20) -> CosineStats:
    """All b(b-1)/2 pairwise cosine similarities, plus per-class histograms
    (pairs within one class) when class ids are given."""
    rows = _as2d(embeddings)
    if rows.shape[0] < 2:
        raise gc.DomainError("need at least two embeddings for pairwise stats")
    overall = _histogram(_pairwise_cosines(rows), bins)
    per_class = None
    if class_ids is not None:
        ids = np.asarray(class_ids)
        if ids.shape[0] != rows.shape[0]:
            raise gc.ShapeError("one class id per embedding row required")
        per_class = {}
        for cid in sorted(set(int(i) for i in ids)):
            members = rows[ids == cid]
            if members.shape[0] >= 2:
                per_class[cid] = _histogram(_pairwise_cosines(members), bins)
    return CosineStats(overall=overall, per_class=per_class)


# ---------------------------------------------------------------------------
# SVD by one-sided Jacobi rotations


def jacobi_svd(a: np.ndarray, max_sweeps: int = 60, tol: float = 1e-14):
    """Full SVD of a small dense matrix, returning (U, s, Vt) with s
    non-increasing.  Rotations act on whichever side has fewer columns."""
    a = np.asarray(a, dtype=np.float64)
    transposed = a.shape[0] < a.shape[1]
    m = a.T.copy() if transposed else a.copy()
    cols = m.shape[1]
    v = np.eye(cols)
    converged = cols < 2
    for _ in range(max_sweeps):
        if converged:
            break
        worst = 0.0
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                ci = m[:, i]
                cj = m[:, j]
                aa = float(ci @ ci)
                bb = float(cj @ cj)
                ab = float(ci @ cj)
                if aa == 0.0 or bb == 0.0:
                    continue
                rel = abs(ab) / math.sqrt(aa * bb)
                if rel <= tol:
                    continue
                worst = max(worst, rel)
                # Jacobi rotation zeroing the (i, j) Gram entry
                tau = (bb - aa) / (2.0 * ab)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                mi = c * ci - s * cj
                mj = s * ci + c * cj
                m[:, i] = mi
                m[:, j] = mj
                vi = c * v[:, i] - s * v[:, j]
                vj = s * v[:, i] + c * v[:, j]
                v[:, i] = vi
                v[:, j] = vj
        converged = worst <= tol
    if not converged:
        raise NumericError(
            f"jacobi_svd did not converge within {max_sweeps} sweeps"
        )
    sv = np.sqrt((m * m).sum(axis=0))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    m = m[:, order]
    v = v[:, order]
    u = np.zeros_like(m)
    nonzero = sv > 0.0
    u[:, nonzero] = m[:, nonzero] / sv[nonzero]
    if transposed:
        return v, sv, u.T
    return u, sv, v.T


def weight_svd(w) -> SvdSpectrum:
    """Singular spectrum of a weight matrix with reconstruction check.

    The condition number ignores singular values below 1e-10 * max (rank
    deficiency is documented instead of reported as infinity); an all-zero
    matrix gets condition number 1.
    """
    arr = _as2d(w)
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise gc.ShapeError("weight matrix must be at least 1x1")
    u, sv, vt = jacobi_svd(arr)
    recon = (u * sv) @ vt
    denom = float(np.linalg.norm(arr))
    residual = 0.0 if denom == 0.0 else float(np.linalg.norm(recon - arr)) / denom
    if residual >= 1e-8:
        raise NumericError(f"svd reconstruction residual {residual:.3e} too large")
    max_sv = float(sv[0]) if sv.size else 0.0
    retained = sv[sv > SV_RETAIN_FACTOR * max_sv] if max_sv > 0.0 else sv[:0]
    condition = float(max_sv / retained[-1]) if retained.size else 1.0
    return SvdSpectrum(
        singular_values=sv,
        mean_sv=float(sv.mean()) if sv.size else 0.0,
        max_sv=max_sv,
        condition_number=condition,
        reconstruction_residual=residual,
    )


# ---------------------------------------------------------------------------
# gradient geometry


def gradient_conflict(g_task1, g_task2) -> dict:
    """{"cosine": <g1,g2>/(|g1||g2|), "mag1": |g1|, "mag2": |g2|}."""
    g1 = _vec(g_task1)
    g2 = _vec(g_task2)
    if g1.shape != g2.shape:
        raise gc.ShapeError(f"gradient lengths differ: {g1.shape} vs {g2.shape}")
    m1 = float(np.sqrt(g1 @ g1))
    m2 = float(np.sqrt(g2 @ g2))
    if m1 == 0.0 or m2 == 0.0:
        raise gc.DomainError("cosine undefined for a zero gradient vector")
    cosine = float(g1 @ g2) / (m1 * m2)
    return {"cosine": max(-1.0, min(1.0, cosine)), "mag1": m1, "mag2": m2}


def orthogonality_residual(f, grad) -> float:
    """|<f, grad>| / (|f| |grad|); ~0 when grad comes from the analytic
    l2 normalization backward, 1 when parallel."""
    fv = _vec(f)
    gv = _vec(grad)
    if fv.shape != gv.shape:
        raise gc.ShapeError(f"lengths differ: {fv.shape} vs {gv.shape}")
    nf = float(np.sqrt(fv @ fv))
    ng = float(np.sqrt(gv @ gv))
    if nf == 0.0 or ng == 0.0:
        raise gc.DomainError("orthogonality residual undefined for zero vectors")
    return abs(float(fv @ gv)) / (nf * ng)


# ---------------------------------------------------------------------------
# embedding interpolation


def interpolate_embeddings(src, dst, steps: int, mode: str = "linear") -> list:
    """steps points from src to dst, t uniform on [0, 1] inclusive.

    linear:    (1-t) src + t dst
    spherical: sin((1-t) W)/sin(W) src + sin(t W)/sin(W) dst, W = angle(src, dst);
               requires unit inputs (within 1e-6) and non-antipodal endpoints.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if mode not in ("linear", "spherical"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    a = _vec(src).copy()
    b = _vec(dst).copy()
    if a.shape != b.shape:
        raise gc.ShapeError(f"endpoint lengths differ: {a.shape} vs {b.shape}")
    ts = np.linspace(0.0, 1.0, steps)
    if mode == "spherical":
        na = float(np.sqrt(a @ a))
        nb = float(np.sqrt(b @ b))
        if abs(na - 1.0) > 1e-6 or abs(nb - 1.0) > 1e-6:
            raise gc.DomainError(
                f"spherical interpolation needs unit endpoints, norms {na:.6f}, {nb:.6f}"
            )
        dot = max(-1.0, min(1.0, float(a @ b)))
        omega = math.acos(dot)
        if math.pi - omega < 1e-6:
            raise gc.DomainError("spherical interpolation undefined for antipodal endpoints")
    out = []
    for t in ts:
        if t == 0.0:
            out.append(Tensor._wrap(a.copy()))
        elif t == 1.0:
            out.append(Tensor._wrap(b.copy()))
        elif mode == "linear":
            out.append(Tensor._wrap((1.0 - t) * a + t * b))
        else:
            if omega < 1e-12:  # coincident endpoints: the arc degenerates
                out.append(Tensor._wrap(a.copy()))
            else:
                so = math.sin(omega)
                out.append(Tensor._wrap(
                    (math.sin((1.0 - t) * omega) / so) * a + (math.sin(t * omega) / so) * b
                ))
    return out
