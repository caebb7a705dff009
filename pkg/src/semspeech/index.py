"""Exact cosine-similarity search over stored utterance embeddings.

The index is a plain matrix scan: rows are unit-normalized at build time, so a
query's cosine against every row is one matrix-vector product. No approximate
structures; results are exact and reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus
from .errors import FileFormatError, ValidationError

INDEX_MAGIC = b"SEMI"
INDEX_VERSION = 1


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray  # (N, d) float32, rows unit-normalized
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValidationError("matrix must be 2-D (N, d)", field="matrix")
        if len(self.ids) != self.matrix.shape[0]:
            raise ValidationError(
                f"{len(self.ids)} ids for {self.matrix.shape[0]} rows", field="ids"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("ids must be unique", field="ids")
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        if self.matrix.shape[0] and not np.allclose(norms, 1.0, atol=1e-5):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(
                f"row for {self.ids[worst]!r} has norm {norms[worst]:.6f}, not 1",
                field="matrix",
            )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(
    embed_fn: Callable[[object], np.ndarray],
    corpus: Corpus,
    metadata: dict | None = None,
) -> EmbeddingIndex:
    """Embed every utterance, unit-normalize, and assemble the index."""
    if len(corpus) == 0:
        raise ValidationError("corpus is empty", field="corpus")
    ids, rows = [], []
    for utt in corpus:
        z = np.asarray(embed_fn(utt.features), dtype=np.float64)
        if z.ndim != 1:
            raise ValidationError(
                f"embedding for {utt.id!r} is not a vector", field="embedding"
            )
        norm = np.linalg.norm(z)
        if norm == 0.0:
            raise ValidationError(
                f"embedding for {utt.id!r} has zero norm", field="embedding"
            )
        ids.append(utt.id)
        rows.append((z / norm).astype(np.float32))
    return EmbeddingIndex(ids=ids, matrix=np.stack(rows), metadata=dict(metadata or {}))


def search(
    index: EmbeddingIndex, query, k: int
) -> list[tuple[str, float]]:
    """Exact top-k by cosine, descending; ties broken by ascending id.

    The query is either a feature-space embedding vector or the id of an
    indexed item.
    """
    n = len(index)
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}", field="k")
    if isinstance(query, str):
        try:
            row = index.ids.index(query)
        except ValueError:
            raise ValidationError(f"id {query!r} is not indexed", field="query") from None
        q = index.matrix[row].astype(np.float64)
    else:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (index.dim,):
            raise ValidationError(
                f"query shape {q.shape} does not match index dim {index.dim}",
                field="query",
            )
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValidationError("query has zero norm", field="query")
    q = q / norm
    scores = index.matrix.astype(np.float64) @ q
    ids_arr = np.array(index.ids)
    order = np.lexsort((ids_arr, -scores))
    return [(index.ids[i], float(scores[i])) for i in order[:k]]


def search_batch(
    index: EmbeddingIndex, queries: Sequence, k: int
) -> list[list[tuple[str, float]]]:
    return [search(index, q, k) for q in queries]


# ---------------------------------------------------------------------------
# file format: magic "SEMI", version u16=1, N u32, d u32, JSON block length
# u32 + JSON {"ids", "metadata"}, then N*d float32 row-major
# ---------------------------------------------------------------------------

def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    doc = {"ids": index.ids, "metadata": index.metadata}
    doc_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    n, d = index.matrix.shape
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<H", INDEX_VERSION))
        f.write(struct.pack("<II", n, d))
        f.write(struct.pack("<I", len(doc_bytes)))
        f.write(doc_bytes)
        f.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != INDEX_MAGIC:
        raise FileFormatError(f"bad magic {blob[:4]!r}, expected {INDEX_MAGIC!r}", offset=0)
    if len(blob) < 18:
        raise FileFormatError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != INDEX_VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    n, d = struct.unpack_from("<II", blob, 6)
    (doc_len,) = struct.unpack_from("<I", blob, 14)
    if len(blob) < 18 + doc_len:
        raise FileFormatError("truncated JSON block", offset=len(blob))
    try:
        doc = json.loads(blob[18 : 18 + doc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"bad JSON block: {e}", offset=18) from e
    for key in ("ids", "metadata"):
        if key not in doc:
            raise FileFormatError(f"JSON block missing key {key!r}", offset=18)
    if len(doc["ids"]) != n:
        raise FileFormatError(
            f"JSON block has {len(doc['ids'])} ids for {n} rows", offset=18
        )
    offset = 18 + doc_len
    count = n * d
    if len(blob) < offset + 4 * count:
        raise FileFormatError("truncated embedding matrix", offset=len(blob))
    if len(blob) > offset + 4 * count:
        raise FileFormatError(
            f"{len(blob) - offset - 4 * count} trailing bytes", offset=offset + 4 * count
        )
    matrix = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(matrix)):
        bad = int(np.flatnonzero(~np.isfinite(matrix))[0])
        raise FileFormatError("non-finite value in matrix", offset=offset + 4 * bad)
    return EmbeddingIndex(
        ids=list(doc["ids"]),
        matrix=matrix.reshape(n, d).copy(),
        metadata=doc["metadata"],
    )
