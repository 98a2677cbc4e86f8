"""Deterministic synthetic point-cloud dataset.

Complete shapes are sampled uniformly by surface area from four parametric
families, rotated, and rescaled so the farthest point sits on the unit
sphere.  Partial views are the camera-facing half-space of the complete
cloud, resampled to a fixed size.  Randomness comes from a counter-based
Philox generator keyed by (global seed, sample index), so generation order
never matters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .netblocks import PointCloud

KINDS = ("sphere", "box", "cylinder", "cone")
HPCD_MAGIC = b"HPCD"
HPCD_VERSION = 1


@dataclass(frozen=True)
class ShapeSpec:
    """One parametric shape.  ``scale`` is (sx, sy, sz): ellipsoid semi-axes
    for sphere, half-extents for box; cylinder and cone are circular and
    read radius from sx and half-height from sz (sy is ignored)."""

    kind: str
    scale: tuple = (1.0, 1.0, 1.0)
    rotation_axis: tuple = (0.0, 0.0, 1.0)
    rotation_angle: float = 0.0
    n_complete: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if len(self.scale) != 3 or any(s <= 0.0 for s in self.scale):
            raise ValueError(f"scales must be three positive reals, got {self.scale}")
        if self.n_complete < 64:
            raise ValueError("n_complete must be >= 64")

    @property
    def class_id(self) -> int:
        return KINDS.index(self.kind)


@dataclass
class Sample:
    partial: np.ndarray  # [n_partial, 3]
    complete: np.ndarray  # [n_complete, 3]
    label: int


def _rng(seed) -> np.random.Generator:
    # Philox takes a 2-word key: (global seed, stream index)
    parts = [int(seed), 0] if np.isscalar(seed) else [int(s) for s in seed]
    if len(parts) == 1:
        parts.append(0)
    if len(parts) != 2:
        raise ValueError(f"seed must be an int or a pair, got {seed!r}")
    return np.random.Generator(np.random.Philox(key=parts))


def _rotation_matrix(axis, angle: float) -> np.ndarray:
    # Rodrigues formula
    ax = np.asarray(axis, dtype=np.float64)
    n = np.sqrt((ax * ax).sum())
    if n == 0.0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = ax / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _sample_ellipsoid(rng, n, sx, sy, sz):
    # area-uniform via rejection: weight = |grad| of the implicit map
    wmax = max(sy * sz, sx * sz, sx * sy)
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = max(n - filled, 32)
        u = rng.normal(size=(m, 3))
        u /= np.sqrt((u * u).sum(axis=1))[:, None]
        w = np.sqrt(
            (u[:, 0] * sy * sz) ** 2 + (u[:, 1] * sx * sz) ** 2 + (u[:, 2] * sx * sy) ** 2
        )
        keep = rng.uniform(0.0, wmax, size=m) < w
        pts = u[keep] * np.array([sx, sy, sz])
        take = min(n - filled, pts.shape[0])
        out[filled:filled + take] = pts[:take]
        filled += take
    return out


def _sample_box(rng, n, sx, sy, sz):
    # six faces weighted by their (scaled) areas
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    axis = face // 2
    for i in range(n):
        a = axis[i]
        rest = [j for j in range(3) if j != a]
        pts[i, a] = sign[i]
        pts[i, rest[0]] = uv[i, 0]
        pts[i, rest[1]] = uv[i, 1]
    return pts * np.array([sx, sy, sz])


def _sample_cylinder(rng, n, radius, half_h):
    side = 2.0 * np.pi * radius * (2.0 * half_h)
    cap = np.pi * radius * radius
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if which[i] == 0:
            pts[i] = [radius * np.cos(theta[i]), radius * np.sin(theta[i]),
                      rng.uniform(-half_h, half_h)]
        else:
            r = radius * np.sqrt(rng.uniform())
            z = half_h if which[i] == 1 else -half_h
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), z]
    return pts


def _sample_cone(rng, n, radius, half_h):
    # apex at +z, base disk at -z
    slant = np.sqrt(radius * radius + (2.0 * half_h) ** 2)
    lateral = np.pi * radius * slant
    base = np.pi * radius * radius
    which = rng.choice(2, size=n, p=np.array([lateral, base]) / (lateral + base))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if which[i] == 0:
            frac = np.sqrt(rng.uniform())  # area element grows linearly from apex
            r = radius * frac
            z = half_h - 2.0 * half_h * frac
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), z]
        else:
            r = radius * np.sqrt(rng.uniform())
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), -half_h]
    return pts


def generate_complete(spec: ShapeSpec, seed) -> PointCloud:
    """Area-uniform surface sample of the spec'd shape, rotated, then scaled
    so max ||p||_2 = 1.  Deterministic in (spec, seed); seed may be an int
    or a (global seed, index, ...) tuple for splittable streams."""
    rng = _rng(seed)
    sx, sy, sz = spec.scale
    if spec.kind == "sphere":
        pts = _sample_ellipsoid(rng, spec.n_complete, sx, sy, sz)
    elif spec.kind == "box":
        pts = _sample_box(rng, spec.n_complete, sx, sy, sz)
    elif spec.kind == "cylinder":
        pts = _sample_cylinder(rng, spec.n_complete, sx, sz)
    else:
        pts = _sample_cone(rng, spec.n_complete, sx, sz)
    pts = pts @ _rotation_matrix(spec.rotation_axis, spec.rotation_angle).T
    max_norm = float(np.sqrt((pts * pts).sum(axis=1)).max())
    pts = pts / max_norm
    return PointCloud(points=Tensor._wrap(pts), label=spec.class_id)


def crop_partial(complete: PointCloud, view_dir, keep_fraction: float,
                 n_partial: int, seed) -> PointCloud:
    """Keep the camera-facing fraction (largest <p, view_dir>), then resample
    with replacement to exactly n_partial points."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if n_partial < 1:
        raise ValueError("n_partial must be >= 1")
    v = np.asarray(view_dir, dtype=np.float64)
    norm = float(np.sqrt((v * v).sum()))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"view_dir must be unit length, got norm {norm:.8f}")
    pts = complete.points.array
    n = pts.shape[0]
    k = max(1, int(round(keep_fraction * n)))
    scores = pts @ v
    order = np.argsort(-scores, kind="stable")  # ties resolved by row index
    kept = pts[order[:k]]
    rng = _rng(seed)
    pick = rng.integers(0, k, size=n_partial)
    return PointCloud(points=Tensor._wrap(kept[pick].copy()), label=complete.label)


# ---------------------------------------------------------------------------
# default generator

DEFAULT_TRAIN_COUNT = 512
DEFAULT_TEST_COUNT = 128
DEFAULT_N_COMPLETE = 256
DEFAULT_N_PARTIAL = 128
DEFAULT_KEEP_FRACTION = 0.5
_TEST_INDEX_BASE = 1 << 32  # keeps test sample streams disjoint from train


def _random_spec(rng, kind: str, n_complete: int) -> ShapeSpec:
    scale = tuple(rng.uniform(0.6, 1.0, size=3))
    axis = rng.normal(size=3)
    axis /= np.sqrt((axis * axis).sum())
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    return ShapeSpec(kind=kind, scale=scale, rotation_axis=tuple(axis),
                     rotation_angle=angle, n_complete=n_complete)


def make_sample(seed: int, index: int, n_complete: int = DEFAULT_N_COMPLETE,
                n_partial: int = DEFAULT_N_PARTIAL,
                keep_fraction: float = DEFAULT_KEEP_FRACTION) -> Sample:
    """Sample ``index`` of the default dataset: shape kind cycles through
    the four families, everything else drawn from per-index streams."""
    kind = KINDS[index % len(KINDS)]
    spec_rng = _rng((seed, index * 4 + 2))
    spec = _random_spec(spec_rng, kind, n_complete)
    complete = generate_complete(spec, (seed, index * 4))
    vd_rng = _rng((seed, index * 4 + 3))
    view = vd_rng.normal(size=3)
    view /= np.sqrt((view * view).sum())
    partial = crop_partial(complete, view, keep_fraction, n_partial, (seed, index * 4 + 1))
    return Sample(
        partial=partial.points.array.copy(),
        complete=complete.points.array.copy(),
        label=spec.class_id,
    )


def generate_dataset(count: int, seed: int, index_offset: int = 0,
                     n_complete: int = DEFAULT_N_COMPLETE,
                     n_partial: int = DEFAULT_N_PARTIAL,
                     keep_fraction: float = DEFAULT_KEEP_FRACTION) -> list:
    if count % len(KINDS) != 0:
        raise ValueError(f"count must be a multiple of {len(KINDS)} for exact class balance")
    return [
        make_sample(seed, index_offset + i, n_complete, n_partial, keep_fraction)
        for i in range(count)
    ]


def generate_default_datasets(seed: int, train_count: int = DEFAULT_TRAIN_COUNT,
                              test_count: int = DEFAULT_TEST_COUNT,
                              n_complete: int = DEFAULT_N_COMPLETE,
                              n_partial: int = DEFAULT_N_PARTIAL):
    """(train samples, test samples) with disjoint per-sample streams."""
    train = generate_dataset(train_count, seed, 0, n_complete, n_partial)
    test = generate_dataset(test_count, seed, _TEST_INDEX_BASE, n_complete, n_partial)
    return train, test


# ---------------------------------------------------------------------------
# HPCD binary format


def write_dataset(path, samples, n_complete: int | None = None,
                  n_partial: int | None = None):
    """Header + per-sample records (class u32, partial f32 triplets,
    complete f32 triplets), little-endian."""
    samples = list(samples)
    if samples:
        n_partial = samples[0].partial.shape[0]
        n_complete = samples[0].complete.shape[0]
        for i, s in enumerate(samples):
            if s.partial.shape != (n_partial, 3) or s.complete.shape != (n_complete, 3):
                raise gc.ContractError(f"sample {i} has inconsistent point counts")
        class_count = max(s.label for s in samples) + 1
    else:
        n_partial = n_partial or 0
        n_complete = n_complete or 0
        class_count = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack(
            "<4sIIIII", HPCD_MAGIC, HPCD_VERSION,
            len(samples), n_complete, n_partial, class_count,
        ))
        for s in samples:
            fh.write(struct.pack("<I", s.label))
            fh.write(s.partial.astype("<f4").tobytes(order="C"))
            fh.write(s.complete.astype("<f4").tobytes(order="C"))


def read_dataset(path) -> list:
    """Exact inverse of write_dataset at f32 precision."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 24:
        raise gc.FormatError("truncated dataset header")
    magic, version, count, n_complete, n_partial, _ = struct.unpack_from("<4sIIIII", buf, 0)
    if magic != HPCD_MAGIC:
        raise gc.FormatError(f"bad dataset magic {magic!r}")
    if version != HPCD_VERSION:
        raise gc.FormatError(f"unsupported dataset version {version}")
    rec = 4 + 12 * n_partial + 12 * n_complete
    if len(buf) != 24 + count * rec:
        raise gc.FormatError(
            f"truncated dataset payload: {len(buf)} bytes, expected {24 + count * rec}"
        )
    samples = []
    pos = 24
    for _ in range(count):
        (label,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        partial = np.frombuffer(buf, dtype="<f4", count=3 * n_partial, offset=pos)
        pos += 12 * n_partial
        complete = np.frombuffer(buf, dtype="<f4", count=3 * n_complete, offset=pos)
        pos += 12 * n_complete
        samples.append(Sample(
            partial=partial.astype(np.float64).reshape(n_partial, 3),
            complete=complete.astype(np.float64).reshape(n_complete, 3),
            label=int(label),
        ))
    return samples


def dataset_stats(samples) -> dict:
    per_class: dict[int, int] = {}
    for s in samples:
        per_class[s.label] = per_class.get(s.label, 0) + 1
    return {
        "count": len(samples),
        "points_per_partial": samples[0].partial.shape[0] if samples else 0,
        "points_per_complete": samples[0].complete.shape[0] if samples else 0,
        "per_class": {str(k): per_class[k] for k in sorted(per_class)},
    }
