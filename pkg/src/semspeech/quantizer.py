"""Acoustic unit discovery: k-means over frames, frame labeling, and
consecutive-duplicate merging into hidden-unit sequences."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, FeatureSequence
from .errors import FileFormatError, ValidationError
from .random_utils import derive_rng

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"SEMK"
CODEBOOK_VERSION = 1

DEFAULT_CLUSTER_SIZES = (50, 100, 200)


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, d) float
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        arr = np.asarray(self.centroids, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError("centroids must be a (k, d) matrix", field="centroids")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("centroids must be finite", field="centroids")
        self.centroids = arr
        for prev, cur in zip(self.inertia_history, self.inertia_history[1:]):
            if cur > prev + 1e-9 * max(abs(prev), 1.0):
                raise ValidationError(
                    "inertia_history must be non-increasing", field="inertia_history"
                )

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class UnitSequence:
    units: list[int]
    source_id: str

    def __post_init__(self):
        if len(self.units) < 1:
            raise ValidationError("unit sequence must be non-empty", field="units")
        for a, b in zip(self.units, self.units[1:]):
            if a == b:
                raise ValidationError(
                    f"unit sequence {self.source_id!r} has consecutive equal ids",
                    field="units",
                )


def _pairwise_sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |x-c|^2 = |x|^2 - 2 x.c + |c|^2; clamp tiny negatives from cancellation
    d2 = (
        np.einsum("ij,ij->i", frames, frames)[:, None]
        - 2.0 * frames @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = frames[first]
    closest = _pairwise_sq_dists(frames, centroids[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass at existing centroids; pick any unused point
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[c] = frames[idx]
        d_new = _pairwise_sq_dists(frames, centroids[c : c + 1]).ravel()
        closest = np.minimum(closest, d_new)
    return centroids


def train_kmeans(
    frames: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    max_training_frames: int | None = None,
) -> Codebook:
    """Lloyd's algorithm with k-means++ initialization, deterministic per seed.

    Stops at max_iters or when relative inertia improvement drops below tol.
    Empty clusters are reseeded to the point farthest from its centroid.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValidationError("frames must be a (n, d) matrix", field="frames")
    if k < 1:
        raise ValidationError("k must be >= 1", field="k")
    if tol < 0:
        raise ValidationError("tol must be >= 0", field="tol")
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1", field="max_iters")

    rng = derive_rng(seed, "kmeans", k)
    if max_training_frames is not None and frames.shape[0] > max_training_frames:
        pick = rng.choice(frames.shape[0], size=max_training_frames, replace=False)
        frames = frames[np.sort(pick)]

    n_distinct = np.unique(frames, axis=0).shape[0]
    if n_distinct < k:
        raise ValidationError(
            f"need at least {k} distinct frames, got {n_distinct}", field="frames"
        )

    centroids = _kmeans_pp_init(frames, k, rng)
    history: list[float] = []
    prev_inertia = np.inf
    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(frames, centroids)
        labels = np.argmin(d2, axis=1)
        # direct differences: the expanded form above suffers cancellation
        resid = frames - centroids[labels]
        assigned_d2 = np.einsum("ij,ij->i", resid, resid)
        inertia = float(assigned_d2.sum())
        history.append(inertia)

        if inertia == 0.0:
            break
        if np.isfinite(prev_inertia):
            improvement = (prev_inertia - inertia) / max(prev_inertia, 1e-12)
            if improvement < tol:
                break
        prev_inertia = inertia

        new_centroids = np.empty_like(centroids)
        for c in range(k):
            mask = labels == c
            if not mask.any():
                far = int(np.argmax(assigned_d2))
                logger.info("kmeans: reseeding empty cluster %d to frame %d", c, far)
                new_centroids[c] = frames[far]
            else:
                new_centroids[c] = frames[mask].mean(axis=0)
        centroids = new_centroids

    return Codebook(centroids=centroids, inertia_history=history)


def assign(fs: FeatureSequence | np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest-centroid label per frame; ties break to the lowest index."""
    frames = fs.data if isinstance(fs, FeatureSequence) else np.asarray(fs)
    frames = frames.astype(np.float64)
    if frames.ndim != 2:
        raise ValidationError("frames must be a (T, d) matrix", field="frames")
    if frames.shape[1] != cb.dim:
        raise ValidationError(
            f"feature dim {frames.shape[1]} does not match codebook dim {cb.dim}",
            field="dim",
        )
    # np.argmin returns the first minimum, which is the lowest centroid index
    return np.argmin(_pairwise_sq_dists(frames, cb.centroids), axis=1)


def deduplicate(labels: np.ndarray | list[int], source_id: str = "") -> UnitSequence:
    """Collapse runs of equal adjacent ids, preserving order."""
    seq = [int(x) for x in labels]
    if not seq:
        raise ValidationError("cannot deduplicate an empty label sequence", field="labels")
    out = [seq[0]]
    for x in seq[1:]:
        if x != out[-1]:
            out.append(x)
    return UnitSequence(units=out, source_id=source_id)


def quantize_corpus(corpus: Corpus, cb: Codebook) -> list[UnitSequence]:
    out = []
    for u in corpus.utterances:
        try:
            labels = assign(u.features, cb)
            out.append(deduplicate(labels, source_id=u.id))
        except ValidationError as e:
            raise ValidationError(f"utterance {u.id!r}: {e}", field=e.field) from e
    return out


def standardize_frames(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-dimension zero-mean unit-variance scaling; returns (scaled, mean, scale).

    Constant dimensions keep scale 1 to stay invertible.
    """
    frames = np.asarray(frames, dtype=np.float64)
    mean = frames.mean(axis=0)
    scale = frames.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    return (frames - mean) / scale, mean, scale


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_codebook(path: str | Path, cb: Codebook) -> None:
    """SEMK format: magic, version u16, k u32, d u32, k*d float32 LE row-major."""
    data = np.ascontiguousarray(cb.centroids, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<H", CODEBOOK_VERSION))
        f.write(struct.pack("<II", cb.k, cb.dim))
        f.write(data.tobytes())


def read_codebook(path: str | Path) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {CODEBOOK_MAGIC!r}", offset=0)
    if len(blob) < 14:
        raise FileFormatError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CODEBOOK_VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    k, d = struct.unpack_from("<II", blob, 6)
    if k < 1:
        raise FileFormatError("codebook declares 0 centroids", offset=6)
    if d < 1:
        raise FileFormatError("codebook declares 0 dimensions", offset=10)
    expected = 14 + 4 * k * d
    if len(blob) != expected:
        raise FileFormatError(
            f"payload length {len(blob) - 14} does not match k*d*4 = {expected - 14}",
            offset=min(len(blob), expected),
        )
    data = np.frombuffer(blob, dtype="<f4", count=k * d, offset=14)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FileFormatError("non-finite centroid value", offset=14 + 4 * int(bad[0]))
    return Codebook(centroids=data.reshape(k, d).astype(np.float64))


def save_unit_corpus(units: list[UnitSequence], path: str | Path) -> None:
    """One line per utterance: `<id><TAB><space-separated unit ids>`."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in units:
            f.write(f"{seq.source_id}\t{' '.join(str(u) for u in seq.units)}\n")


def load_unit_corpus(path: str | Path) -> list[UnitSequence]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FileFormatError(f"line {line_no}: expected `<id>\\t<ids>`")
            try:
                units = [int(x) for x in parts[1].split()]
            except ValueError as e:
                raise FileFormatError(f"line {line_no}: bad unit id: {e}") from e
            try:
                out.append(UnitSequence(units=units, source_id=parts[0]))
            except ValidationError as e:
                raise FileFormatError(f"line {line_no}: {e}") from e
    return out
