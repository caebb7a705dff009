"""Synthetic feature corpus with a ground-truth semantic oracle.

Each utterance is a sequence of latent symbols rendered into feature frames:
every symbol contributes a run of frames equal to its centroid plus a
per-speaker offset plus i.i.d. Gaussian noise. Because the latent symbols are
stored, semantic similarity between two utterances can be scored exactly
(bag-of-symbols cosine), which stands in for human similarity ratings.

Externally computed features can be ingested through the same manifest +
feature-file interfaces; such corpora carry no oracle.
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FileFormatError,
    MissingGroundTruthError,
    PairBinningError,
    ValidationError,
)
from .random_utils import derive_rng

FEATURE_MAGIC = b"SEMF"
FEATURE_VERSION = 1

DEFAULT_MAX_FRAMES = 1000

# centroid separation required relative to noise, and retry budget for
# rejection sampling on the unit sphere
_SEPARATION_FACTOR = 4.0
_MAX_CENTROID_TRIES = 500

# Fraction of utterances generated as edited variants of an earlier utterance,
# and the chance a variant is an exact symbol-level copy. Purely independent
# sequences almost never land in the high-similarity bins, so the corpus mimics
# a paraphrase-rich collection; the scored-pair sampler depends on every score
# decile being populable.
_VARIANT_PROB = 0.5
_COPY_PROB = 0.15


@dataclass
class FeatureSequence:
    """A T x d matrix of real-valued frames (the stand-in for a speech signal)."""

    data: np.ndarray  # shape (T, d), float32

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError("feature data must be a 2-D (T, d) matrix", field="data")
        if arr.shape[0] < 1:
            raise ValidationError("feature sequence must have at least one frame", field="n_frames")
        if arr.shape[1] < 1:
            raise ValidationError("feature dimension must be at least 1", field="dim")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("feature values must be finite", field="data")
        self.data = arr

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class Utterance:
    id: str
    speaker_id: int
    features: FeatureSequence
    symbols: list[int] | None = None  # hidden ground truth; absent for ingested data
    # per-frame symbol labels; synthetic corpora only, not persisted
    frame_symbols: list[int] | None = None


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic corpus generator."""

    alphabet_size: int = 16
    feature_dim: int = 16
    frames_per_symbol_range: tuple[int, int] = (2, 5)
    n_speakers: int = 4
    speaker_offset_scale: float = 0.05
    noise_scale: float = 0.05
    utterance_len_range: tuple[int, int] = (3, 10)
    n_utterances: int = 2000
    seed: int = 0
    max_frames: int = DEFAULT_MAX_FRAMES

    def validate(self) -> None:
        if self.alphabet_size < 2:
            raise ValidationError("alphabet_size must be >= 2", field="alphabet_size")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be >= 2", field="feature_dim")
        if self.n_speakers < 1:
            raise ValidationError("n_speakers must be >= 1", field="n_speakers")
        if self.n_utterances < 1:
            raise ValidationError("n_utterances must be >= 1", field="n_utterances")
        if self.speaker_offset_scale < 0:
            raise ValidationError("speaker_offset_scale must be >= 0", field="speaker_offset_scale")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0", field="noise_scale")
        for name, rng_pair in (
            ("frames_per_symbol_range", self.frames_per_symbol_range),
            ("utterance_len_range", self.utterance_len_range),
        ):
            lo, hi = rng_pair
            if lo < 1 or lo > hi:
                raise ValidationError(f"{name} must satisfy 1 <= min <= max", field=name)
        if self.max_frames < 1:
            raise ValidationError("max_frames must be >= 1", field="max_frames")
        worst = self.utterance_len_range[1] * self.frames_per_symbol_range[1]
        if worst > self.max_frames:
            raise ValidationError(
                f"utterance_len_range x frames_per_symbol_range can reach {worst} frames,"
                f" above the max_frames cap of {self.max_frames}",
                field="utterance_len_range",
            )


@dataclass
class Corpus:
    utterances: list[Utterance]
    spec: SyntheticSpec | None = None
    centroids: np.ndarray | None = None  # (S, d); synthetic corpora only
    speaker_offsets: np.ndarray | None = None  # (n_speakers, d)
    _by_id: dict[str, Utterance] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {u.id: u for u in self.utterances}
        if len(self._by_id) != len(self.utterances):
            raise ValidationError("utterance ids must be unique", field="id")

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self._by_id[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    def __iter__(self):
        return iter(self.utterances)

    @property
    def has_ground_truth(self) -> bool:
        return all(u.symbols is not None for u in self.utterances)


@dataclass
class ScoredPairSet:
    """Pairs of utterance ids with graded similarity scores on a 0-5 scale."""

    pairs: list[tuple[str, str, float]]
    split: str = "dev"

    def __post_init__(self):
        if self.split not in ("dev", "test"):
            raise ValidationError("split must be 'dev' or 'test'", field="split")
        seen: set[frozenset] = set()
        for a, b, score in self.pairs:
            if not 0.0 <= score <= 5.0:
                raise ValidationError(f"score {score} for ({a},{b}) outside [0,5]", field="score")
            key = frozenset((a, b))
            if key in seen:
                raise ValidationError(f"duplicate unordered pair ({a},{b})", field="pairs")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate_ids(self, corpus: Corpus) -> None:
        for a, b, _ in self.pairs:
            if a not in corpus:
                raise ValidationError(f"pair id {a!r} not in corpus", field="id_a")
            if b not in corpus:
                raise ValidationError(f"pair id {b!r} not in corpus", field="id_b")


def _sample_centroids(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the unit sphere, rejection-sampled for separation."""
    required = _SEPARATION_FACTOR * spec.noise_scale
    for _ in range(_MAX_CENTROID_TRIES):
        pts = rng.standard_normal((spec.alphabet_size, spec.feature_dim))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        pts /= norms
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() > required:
            return pts
    raise ValidationError(
        f"could not place {spec.alphabet_size} centroids with pairwise distance"
        f" > {required:.4g} on the unit sphere; lower noise_scale or alphabet_size",
        field="noise_scale",
    )


def _draw_avoiding(rng: np.random.Generator, alphabet_size: int, avoid: int | None) -> int:
    while True:
        s = int(rng.integers(alphabet_size))
        if s != avoid:
            return s


def _fresh_symbols(spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    lo_len, hi_len = spec.utterance_len_range
    n = int(rng.integers(lo_len, hi_len + 1))
    out: list[int] = []
    for _ in range(n):
        out.append(_draw_avoiding(rng, spec.alphabet_size, out[-1] if out else None))
    return out


def _fix_adjacent(symbols: list[int], spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    # Adjacent duplicate symbols render as one indistinguishable frame run, so
    # sequences are kept free of them; collapse violations and re-pad to the
    # minimum length.
    out = [symbols[0]]
    for s in symbols[1:]:
        if s != out[-1]:
            out.append(s)
    lo_len = spec.utterance_len_range[0]
    while len(out) < lo_len:
        out.append(_draw_avoiding(rng, spec.alphabet_size, out[-1]))
    return out


def _edit_symbols(
    symbols: list[int],
    spec: SyntheticSpec,
    rng: np.random.Generator,
) -> list[int]:
    """Apply a random number of substitute/insert/delete edits, respecting
    the utterance length bounds."""
    out = list(symbols)
    if rng.random() < _COPY_PROB:
        return out
    lo_len, hi_len = spec.utterance_len_range
    n_edits = 1 + int(rng.integers(len(out)))
    for _ in range(n_edits):
        ops = ["sub"]
        if len(out) < hi_len:
            ops.append("ins")
        if len(out) > lo_len:
            ops.append("del")
        op = ops[int(rng.integers(len(ops)))]
        if op == "sub":
            pos = int(rng.integers(len(out)))
            out[pos] = int(rng.integers(spec.alphabet_size))
        elif op == "ins":
            pos = int(rng.integers(len(out) + 1))
            out.insert(pos, int(rng.integers(spec.alphabet_size)))
        else:
            pos = int(rng.integers(len(out)))
            del out[pos]
    return _fix_adjacent(out, spec, rng)


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Deterministically render a synthetic corpus from ``spec``.

    Each utterance draws a symbol sequence (fresh, or an edited variant of an
    earlier utterance), then emits per symbol a run of frames equal to
    centroid + speaker offset + Gaussian noise.
    """
    spec.validate()
    rng = derive_rng(spec.seed, "corpus")
    centroids = _sample_centroids(spec, rng)
    speaker_offsets = spec.speaker_offset_scale * rng.standard_normal(
        (spec.n_speakers, spec.feature_dim)
    )

    lo_rep, hi_rep = spec.frames_per_symbol_range
    width = len(str(max(spec.n_utterances - 1, 1)))

    all_symbols: list[list[int]] = []
    utterances = []
    for i in range(spec.n_utterances):
        speaker = int(rng.integers(spec.n_speakers))
        if i > 0 and rng.random() < _VARIANT_PROB:
            anchor = all_symbols[int(rng.integers(i))]
            symbols = _edit_symbols(anchor, spec, rng)
        else:
            symbols = _fresh_symbols(spec, rng)
        all_symbols.append(symbols)
        frames = []
        frame_symbols: list[int] = []
        for sym in symbols:
            reps = int(rng.integers(lo_rep, hi_rep + 1))
            base = centroids[sym] + speaker_offsets[speaker]
            noise = spec.noise_scale * rng.standard_normal((reps, spec.feature_dim))
            frames.append(base[None, :] + noise)
            frame_symbols.extend([sym] * reps)
        data = np.concatenate(frames, axis=0).astype(np.float32)
        utterances.append(
            Utterance(
                id=f"utt-{i:0{width}d}",
                speaker_id=speaker,
                features=FeatureSequence(data),
                symbols=symbols,
                frame_symbols=frame_symbols,
            )
        )
    return Corpus(
        utterances=utterances,
        spec=spec,
        centroids=centroids,
        speaker_offsets=speaker_offsets,
    )


def ground_truth_similarity(a: Utterance, b: Utterance) -> float:
    """Cosine similarity of the bag-of-symbols count vectors; in [0, 1]."""
    if a.symbols is None or b.symbols is None:
        missing = a.id if a.symbols is None else b.id
        raise MissingGroundTruthError(
            f"utterance {missing!r} has no ground-truth symbols; the oracle is unavailable"
        )
    ca, cb = Counter(a.symbols), Counter(b.symbols)
    dot = sum(n * cb.get(sym, 0) for sym, n in ca.items())
    if dot == 0:
        return 0.0
    sq_a = sum(n * n for n in ca.values())
    sq_b = sum(n * n for n in cb.values())
    return dot / math.sqrt(sq_a * sq_b)


def _bin_index(score: float, n_bins: int = 10) -> int:
    # equal-width bins over [0, 1]; the top bin is closed
    return min(int(score * n_bins), n_bins - 1)


def _bin_label(idx: int, n_bins: int = 10) -> str:
    lo, hi = 5.0 * idx / n_bins, 5.0 * (idx + 1) / n_bins
    closer = "]" if idx == n_bins - 1 else ")"
    return f"[{lo:.1f}, {hi:.1f}{closer}"


def build_scored_pairs(
    corpus: Corpus,
    n_pairs: int,
    seed: int,
    split: str = "dev",
    max_candidates: int = 2_500_000,
) -> ScoredPairSet:
    """Stratify oracle-scored pairs into ten equal-width score bins.

    Candidate pairs are sampled, scored with the oracle, and drawn from each
    bin as evenly as possible; small deficits are borrowed from the nearest
    bins. Raises when a bin has no candidates or when the emitted histogram
    deviates more than 20% from n_pairs/10 in any bin.
    """
    if n_pairs < 10:
        raise ValidationError("n_pairs must be >= 10", field="n_pairs")
    if not corpus.has_ground_truth:
        raise MissingGroundTruthError("corpus has no ground-truth symbols; cannot score pairs")

    rng = derive_rng(seed, "pairs", split)
    n = len(corpus)
    utts = corpus.utterances
    total_pairs = n * (n - 1) // 2
    if total_pairs < n_pairs:
        raise ValidationError(
            f"corpus of {n} utterances admits only {total_pairs} pairs, fewer than {n_pairs}",
            field="n_pairs",
        )

    # Bag-of-symbols count matrix. Counts are small integers, so float64 dot
    # products are exact and the vectorized cosine matches
    # ground_truth_similarity bit for bit.
    n_symbols = 1 + max(max(u.symbols) for u in utts)
    counts = np.zeros((n, n_symbols), dtype=np.float64)
    for row, u in enumerate(utts):
        for sym in u.symbols:
            counts[row, sym] += 1.0
    sq = np.einsum("ij,ij->i", counts, counts)

    if total_pairs <= max_candidates:
        iu, ju = np.triu_indices(n, k=1)
        dots = (counts @ counts.T)[iu, ju]
    else:
        seen: set[tuple[int, int]] = set()
        while len(seen) < max_candidates:
            draw = rng.integers(n, size=(max_candidates, 2))
            for i, j in draw:
                if i == j:
                    continue
                seen.add((min(i, j), max(i, j)))
                if len(seen) >= max_candidates:
                    break
        arr = np.array(sorted(seen), dtype=np.int64)
        iu, ju = arr[:, 0], arr[:, 1]
        dots = np.einsum("ij,ij->i", counts[iu], counts[ju])
    scores = np.where(dots == 0.0, 0.0, dots / np.sqrt(sq[iu] * sq[ju]))

    n_bins = 10
    bin_of = np.minimum((scores * n_bins).astype(np.int64), n_bins - 1)
    bins: list[list[tuple[int, int, float]]] = [[] for _ in range(n_bins)]
    for k in range(n_bins):
        members = np.flatnonzero(bin_of == k)
        bins[k] = [(int(iu[m]), int(ju[m]), float(scores[m])) for m in members]

    populated = [k for k in range(n_bins) if bins[k]]
    for k in range(n_bins):
        if not bins[k]:
            only = ", ".join(_bin_label(p) for p in populated)
            raise PairBinningError(
                f"score bin {_bin_label(k)} has no candidate pairs (populable: {only})",
                bin_range=(5.0 * k / n_bins, 5.0 * (k + 1) / n_bins),
            )

    for k in range(n_bins):
        rng.shuffle(bins[k])

    base, rem = divmod(n_pairs, n_bins)
    quotas = [base + (1 if k < rem else 0) for k in range(n_bins)]
    taken: list[list[tuple[int, int, float]]] = []
    for k in range(n_bins):
        taken.append(bins[k][: quotas[k]])
        bins[k] = bins[k][quotas[k] :]

    # borrow for deficit bins from the nearest bins that still have candidates
    for k in range(n_bins):
        deficit = quotas[k] - len(taken[k])
        if deficit <= 0:
            continue
        for dist in range(1, n_bins):
            for nb in (k - dist, k + dist):
                if deficit == 0:
                    break
                if 0 <= nb < n_bins and bins[nb]:
                    grab = min(deficit, len(bins[nb]))
                    taken[k].extend(bins[nb][:grab])
                    bins[nb] = bins[nb][grab:]
                    deficit -= grab
            if deficit == 0:
                break
        if deficit > 0:
            raise PairBinningError(
                f"score bin {_bin_label(k)} cannot be filled: {deficit} pairs short"
                " even after borrowing from neighbors",
                bin_range=(5.0 * k / n_bins, 5.0 * (k + 1) / n_bins),
            )

    emitted = [p for bucket in taken for p in bucket]
    hist = [0] * n_bins
    for _, _, s in emitted:
        hist[_bin_index(s, n_bins)] += 1
    target = n_pairs / n_bins
    for k in range(n_bins):
        if abs(hist[k] - target) > 0.2 * target + 1e-9:
            raise PairBinningError(
                f"emitted count {hist[k]} in score bin {_bin_label(k)} deviates more than"
                f" 20% from the target {target:.1f}",
                bin_range=(5.0 * k / n_bins, 5.0 * (k + 1) / n_bins),
            )

    pairs = [(utts[i].id, utts[j].id, 5.0 * s) for i, j, s in emitted]
    return ScoredPairSet(pairs=pairs, split=split)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_features(path: str | Path, fs: FeatureSequence) -> None:
    """SEMF format: magic, version u16, T u32, d u32, T*d float32 LE row-major."""
    data = np.ascontiguousarray(fs.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<H", FEATURE_VERSION))
        f.write(struct.pack("<II", fs.n_frames, fs.dim))
        f.write(data.tobytes())


def read_features(path: str | Path) -> FeatureSequence:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}", offset=0)
    if len(blob) < 14:
        raise FileFormatError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FEATURE_VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    n_frames, dim = struct.unpack_from("<II", blob, 6)
    if n_frames < 1:
        raise FileFormatError("feature file declares 0 frames", offset=6)
    if dim < 1:
        raise FileFormatError("feature file declares 0 dimensions", offset=10)
    expected = 14 + 4 * n_frames * dim
    if len(blob) != expected:
        raise FileFormatError(
            f"payload length {len(blob) - 14} does not match T*d*4 = {expected - 14}",
            offset=min(len(blob), expected),
        )
    data = np.frombuffer(blob, dtype="<f4", count=n_frames * dim, offset=14)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FileFormatError("non-finite feature value", offset=14 + 4 * int(bad[0]))
    return FeatureSequence(data.reshape(n_frames, dim).copy())


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write manifest.jsonl plus one SEMF file per utterance; returns manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for u in corpus.utterances:
            rel = f"features/{u.id}.semf"
            write_features(out_dir / rel, u.features)
            record = {"id": u.id, "speaker": u.speaker_id, "path": rel}
            if u.symbols is not None:
                record["symbols"] = u.symbols
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir: str | Path) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    if not manifest.exists():
        raise FileFormatError(f"no manifest.jsonl in {corpus_dir}")
    utterances = []
    with open(manifest, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FileFormatError(f"manifest line {line_no} is not valid JSON: {e}") from e
            for key in ("id", "speaker", "path"):
                if key not in rec:
                    raise FileFormatError(f"manifest line {line_no} missing key {key!r}")
            fs = read_features(corpus_dir / rec["path"])
            utterances.append(
                Utterance(
                    id=rec["id"],
                    speaker_id=int(rec["speaker"]),
                    features=fs,
                    symbols=list(rec["symbols"]) if "symbols" in rec else None,
                )
            )
    return Corpus(utterances=utterances)


def save_scored_pairs(pairs: ScoredPairSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("id_a\tid_b\tscore\n")
        for a, b, s in pairs.pairs:
            f.write(f"{a}\t{b}\t{s:.6f}\n")


def load_scored_pairs(path: str | Path, split: str = "dev") -> ScoredPairSet:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header.split("\t") != ["id_a", "id_b", "score"]:
            raise FileFormatError(f"bad scored-pairs header {header!r}")
        pairs = []
        for line_no, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FileFormatError(f"line {line_no}: expected 3 tab-separated fields")
            try:
                score = float(parts[2])
            except ValueError as e:
                raise FileFormatError(f"line {line_no}: bad score {parts[2]!r}") from e
            pairs.append((parts[0], parts[1], score))
    return ScoredPairSet(pairs=pairs, split=split)
