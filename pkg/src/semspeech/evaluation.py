"""Embedding-quality measurement: rank correlation, geometry, retrieval.

Everything here is a pure function over vectors; models enter only through an
`embed` callable, so any encoder can be scored the same way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ScoredPairSet
from .errors import MissingGroundTruthError, ValidationError

POSITIVE_THRESHOLD = 4.0


def average_ranks(xs: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they cover."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs))
    sorted_vals = xs[order]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or ys.ndim != 1 or len(xs) != len(ys):
        raise ValidationError("inputs must be 1-D sequences of equal length", field="xs")
    if len(xs) < 2:
        raise ValidationError("need at least 2 observations", field="xs")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValidationError(
            "rank correlation is undefined for a constant input", field="xs"
        )
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    rxc = rx - rx.mean()
    ryc = ry - ry.mean()
    return float((rxc @ ryc) / math.sqrt((rxc @ rxc) * (ryc @ ryc)))


def l2_normalize(vectors: np.ndarray) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    norms = np.sqrt((arr * arr).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValidationError("cannot normalize a zero vector", field="vectors")
    out = arr / norms[:, None]
    return out[0] if single else out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine undefined for a zero vector", field="vectors")
    return float(a @ b) / (na * nb)


def alignment(
    embeddings: Mapping[str, np.ndarray],
    pairs: ScoredPairSet,
    pos_threshold: float = POSITIVE_THRESHOLD,
) -> float:
    """Mean squared distance between normalized embeddings of positive pairs."""
    total, count = 0.0, 0
    for id_a, id_b, score in pairs.pairs:
        if score < pos_threshold:
            continue
        for utt_id in (id_a, id_b):
            if utt_id not in embeddings:
                raise MissingGroundTruthError(f"no embedding for utterance {utt_id!r}")
        ea = l2_normalize(embeddings[id_a])
        eb = l2_normalize(embeddings[id_b])
        diff = ea - eb
        total += float(diff @ diff)
        count += 1
    if count == 0:
        raise ValidationError(
            f"no pairs score at or above the positive threshold {pos_threshold}",
            field="pos_threshold",
        )
    return total / count


def uniformity(embeddings, include_self: bool = False) -> float:
    """log mean over unordered pairs of exp(-2 ||f(x)-f(y)||^2), normalized inputs."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError("embeddings must form an (N, d) matrix", field="embeddings")
    n = arr.shape[0]
    if n < 2:
        raise ValidationError("uniformity needs at least 2 embeddings", field="embeddings")
    arr = l2_normalize(arr)
    total = 0.0
    for i in range(n - 1):
        diffs = arr[i + 1 :] - arr[i]
        sq = (diffs * diffs).sum(axis=1)
        total += float(np.exp(-2.0 * sq).sum())
    count = n * (n - 1) // 2
    if include_self:
        total += n  # each self-pair contributes e^0
        count += n
    return math.log(total / count)


@dataclass
class PairPrediction:
    id_a: str
    id_b: str
    human_score: float
    predicted: float
    n_combinations: int


@dataclass
class EvalReport:
    spearman: float
    n_pairs: int
    alignment: float
    uniformity: float
    recall_at_k: dict[int, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    per_pair: list[PairPrediction] = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.spearman <= 1.0 + 1e-9:
            raise ValidationError("spearman must lie in [-1, 1]", field="spearman")
        if self.n_pairs < 1:
            raise ValidationError("report needs at least one pair", field="n_pairs")
        if self.alignment < 0:
            raise ValidationError("alignment must be >= 0", field="alignment")
        for k, v in self.recall_at_k.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"recall@{k} must lie in [0, 1]", field="recall_at_k")

    def to_json(self) -> str:
        payload = {
            "spearman": self.spearman,
            "n_pairs": self.n_pairs,
            "alignment": self.alignment,
            "uniformity": self.uniformity,
            "recall_at_k": {str(k): v for k, v in self.recall_at_k.items()},
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            spearman=raw["spearman"],
            n_pairs=raw["n_pairs"],
            alignment=raw["alignment"],
            uniformity=raw["uniformity"],
            recall_at_k={int(k): v for k, v in raw.get("recall_at_k", {}).items()},
            metadata=raw.get("metadata", {}),
        )


def evaluate(
    embed: Callable[[object], np.ndarray],
    pairs: ScoredPairSet,
    renderings: Mapping[str, Sequence[object]],
    pos_threshold: float = POSITIVE_THRESHOLD,
    metadata: dict | None = None,
) -> EvalReport:
    """Score an embedder against human-scored pairs.

    Each utterance id maps to one or more renderings (e.g. the same content
    spoken by different speakers). Every rendering combination of a pair is
    scored and the cosines averaged before rank correlation, so multi-speaker
    sets follow the same protocol as single-rendering ones.
    """
    if not pairs.pairs:
        raise ValidationError("no pairs to evaluate", field="pairs")
    ids = sorted({i for a, b, _ in pairs.pairs for i in (a, b)})
    embedded: dict[str, list[np.ndarray]] = {}
    for utt_id in ids:
        if utt_id not in renderings or not renderings[utt_id]:
            raise MissingGroundTruthError(f"no rendering available for id {utt_id!r}")
        vecs = []
        for r in renderings[utt_id]:
            v = np.asarray(embed(r), dtype=np.float64)
            if v.ndim != 1:
                raise ValidationError("embedder must return 1-D vectors", field="embed")
            vecs.append(v)
        embedded[utt_id] = vecs

    per_pair: list[PairPrediction] = []
    for id_a, id_b, score in pairs.pairs:
        sims = [cosine(ea, eb) for ea in embedded[id_a] for eb in embedded[id_b]]
        per_pair.append(
            PairPrediction(
                id_a=id_a,
                id_b=id_b,
                human_score=score,
                predicted=float(np.mean(sims)),
                n_combinations=len(sims),
            )
        )

    rho = spearman([p.predicted for p in per_pair], [p.human_score for p in per_pair])
    # geometry over one representative embedding per id (mean of renderings),
    # plus all renderings for the dispersion term
    rep = {i: np.mean(np.stack(vs), axis=0) for i, vs in embedded.items()}
    align = alignment(rep, pairs, pos_threshold=pos_threshold)
    all_vecs = np.stack([v for vs in embedded.values() for v in vs])
    uniform = uniformity(all_vecs)
    return EvalReport(
        spearman=rho,
        n_pairs=len(per_pair),
        alignment=align,
        uniformity=uniform,
        metadata=metadata or {},
        per_pair=per_pair,
    )


def inter_rater_agreement(ratings) -> float:
    """Mean pairwise rank correlation across raters (rows)."""
    arr = np.asarray(ratings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValidationError("need an (n_raters >= 2, n_pairs) matrix", field="ratings")
    total, count = 0.0, 0
    for i in range(arr.shape[0] - 1):
        for j in range(i + 1, arr.shape[0]):
            total += spearman(arr[i], arr[j])
            count += 1
    return total / count


def recall_at_k(
    queries: np.ndarray,
    index_embeddings: np.ndarray,
    index_ids: Sequence[str],
    true_ids: Sequence[str],
    ks: Sequence[int],
) -> dict[int, float]:
    """Fraction of queries whose true id lands in the cosine top-k."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    index_embeddings = np.asarray(index_embeddings, dtype=np.float64)
    n = index_embeddings.shape[0]
    if len(index_ids) != n:
        raise ValidationError("index ids and embeddings disagree in length", field="index_ids")
    if len(true_ids) != queries.shape[0]:
        raise ValidationError("one true id per query required", field="true_ids")
    for k in ks:
        if not 1 <= k <= n:
            raise ValidationError(f"k={k} outside [1, {n}]", field="ks")
    qn = l2_normalize(queries)
    xn = l2_normalize(index_embeddings)
    scores = qn @ xn.T  # (Q, N)
    ids_arr = np.asarray(index_ids)
    hits = {k: 0 for k in ks}
    for qi in range(queries.shape[0]):
        # ties broken by id so rankings are reproducible
        order = np.lexsort((ids_arr, -scores[qi]))
        ranked = ids_arr[order]
        for k in ks:
            if true_ids[qi] in ranked[:k]:
                hits[k] += 1
    return {k: hits[k] / queries.shape[0] for k in ks}


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json())


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(Path(path).read_text())


def save_pair_predictions(report: EvalReport, path: str | Path) -> None:
    lines = ["id_a\tid_b\thuman_score\tpredicted\tn_combinations"]
    for p in report.per_pair:
        lines.append(
            f"{p.id_a}\t{p.id_b}\t{p.human_score:.6f}\t{p.predicted:.10f}\t{p.n_combinations}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def save_geometry_rows(rows: Sequence[tuple[str, float, float, float]], path: str | Path) -> None:
    """TSV of (model, uniformity, alignment, spearman) for scatter plotting."""
    lines = ["model\tuniformity\talignment\tspearman"]
    for model_id, uniform, align, rho in rows:
        lines.append(f"{model_id}\t{uniform:.10f}\t{align:.10f}\t{rho:.10f}")
    Path(path).write_text("\n".join(lines) + "\n")
