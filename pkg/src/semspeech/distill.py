"""Contrastive distillation of a frame encoder against a frozen teacher.

The student embeds raw frame sequences; the teacher embeds the paired discrete
sequences. InfoNCE pulls each student embedding toward its own teacher
embedding, pushing away the other in-batch teacher embeddings plus a FIFO
memory bank of recent ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, ScoredPairSet
from .errors import ValidationError
from .evaluation import spearman
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import (
    EncoderConfig,
    apply_linear,
    attention_pool,
    init_feature_encoder,
    init_linear,
    transformer_encode,
)
from .nn.losses import _normalize_rows, infonce_batch, mse
from .nn.optim import ParamStore, adamw_step
from .nn.tensor import Tensor, concat, no_grad
from .random_utils import derive_rng
from .teachers import Teacher
from .wavembed import _as_frames, _chunks, _pad_frames

DEFAULT_BANK_CAPACITY = 256


class MemoryBank:
    """Bounded FIFO of unit-normalized embeddings."""

    def __init__(self, capacity: int = DEFAULT_BANK_CAPACITY):
        if capacity < 1:
            raise ValidationError("capacity must be >= 1", field="capacity")
        self.capacity = capacity
        self._vectors: list[np.ndarray] = []
        self._dim: int | None = None

    def __len__(self) -> int:
        return len(self._vectors)

    @property
    def dim(self) -> int | None:
        return self._dim

    def push(self, embeddings) -> None:
        arr = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if arr.shape[0] == 0:
            return
        if self._dim is None:
            self._dim = arr.shape[1]
        elif arr.shape[1] != self._dim:
            raise ValidationError(
                f"embedding dim {arr.shape[1]} does not match bank dim {self._dim}",
                field="embeddings",
            )
        norms = np.sqrt((arr * arr).sum(axis=1))
        if np.any(norms == 0.0):
            raise ValidationError("cannot bank a zero embedding", field="embeddings")
        for row, norm in zip(arr, norms):
            self._vectors.append(row / norm)
        overflow = len(self._vectors) - self.capacity
        if overflow > 0:
            del self._vectors[:overflow]

    def contents(self) -> np.ndarray:
        if not self._vectors:
            return np.zeros((0, self._dim or 0))
        return np.stack(self._vectors)


def bank_update(bank: MemoryBank, embeddings) -> None:
    bank.push(embeddings)


class StudentModel:
    """Frame encoder + pooling + one projection layer."""

    def __init__(
        self,
        store: ParamStore,
        cfg: EncoderConfig,
        d_in: int,
        pooling: str = "self_attention",
    ):
        if pooling not in ("self_attention", "cls"):
            raise ValidationError(
                f"pooling must be 'self_attention' or 'cls', got {pooling!r}",
                field="pooling",
            )
        self.store = store
        self.cfg = cfg
        self.d_in = d_in
        self.pooling = pooling

    @classmethod
    def create(
        cls,
        d_in: int,
        cfg: EncoderConfig | None = None,
        pooling: str = "self_attention",
        seed: int = 0,
    ) -> "StudentModel":
        cfg = cfg or EncoderConfig()
        cfg.validate()
        rng = derive_rng(seed, "student", "init")
        store = ParamStore()
        init_feature_encoder(store, rng, cfg, d_in, prefix="enc")
        if pooling == "self_attention":
            store.add("pool.W", Tensor(np.zeros(cfg.model_dim)))
        else:
            # a learnable pseudo-frame, prepended so its contextual state can
            # summarize the sequence
            store.add("pool.cls", Tensor(0.02 * rng.standard_normal(d_in)))
        init_linear(store, rng, "proj", cfg.model_dim, cfg.model_dim)
        return cls(store, cfg, d_in, pooling=pooling)

    def _forward(
        self,
        frame_list: Sequence[np.ndarray],
        train_mode: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        frames = [_as_frames(f) for f in frame_list]
        x, valid = _pad_frames(frames)
        h = transformer_encode(
            Tensor(x), self.store, self.cfg, train_mode=train_mode, rng=rng, valid=valid
        )
        pooled = attention_pool(h, self.store["pool.W"], valid=valid)
        return apply_linear(self.store, "proj", pooled)

    def _forward_cls_grad(
        self,
        frame_list: Sequence[np.ndarray],
        train_mode: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        """cls path with gradient flowing into the learnable pseudo-frame."""
        frames = [Tensor(_as_frames(f)) for f in frame_list]
        cls_vec = self.store["pool.cls"].reshape(1, self.d_in)
        rows = [concat([cls_vec, f], axis=0) for f in frames]
        t_max = max(r.shape[0] for r in rows)
        padded, valid = [], np.zeros((len(rows), t_max), dtype=bool)
        for i, r in enumerate(rows):
            valid[i, : r.shape[0]] = True
            if r.shape[0] < t_max:
                filler = Tensor(np.zeros((t_max - r.shape[0], self.d_in)))
                r = concat([r, filler], axis=0)
            padded.append(r.reshape(1, t_max, self.d_in))
        x = concat(padded, axis=0)
        h = transformer_encode(
            x, self.store, self.cfg, train_mode=train_mode, rng=rng, valid=valid
        )
        pooled = h[:, 0]
        return apply_linear(self.store, "proj", pooled)

    def embed_train(
        self, frame_list: Sequence[np.ndarray], rng: np.random.Generator
    ) -> Tensor:
        if self.pooling == "cls":
            return self._forward_cls_grad(frame_list, True, rng)
        return self._forward(frame_list, True, rng)

    def embed(self, features) -> np.ndarray:
        with no_grad():
            if self.pooling == "cls":
                z = self._forward_cls_grad([features], False, None)
            else:
                z = self._forward([features], False, None)
        return z.data[0].copy()

    def embed_batch(self, features: Sequence) -> np.ndarray:
        if not len(features):
            return np.zeros((0, self.cfg.model_dim))
        with no_grad():
            if self.pooling == "cls":
                z = self._forward_cls_grad(list(features), False, None)
            else:
                z = self._forward(list(features), False, None)
        return z.data.copy()

    def config_dict(self) -> dict:
        return {
            "encoder": self.cfg.to_dict(),
            "d_in": self.d_in,
            "pooling": self.pooling,
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, kind="student", config=self.config_dict(), store=self.store)

    @classmethod
    def load(cls, path: str | Path) -> "StudentModel":
        kind, config, params = load_checkpoint(path)
        if kind != "student":
            raise ValidationError(f"checkpoint kind {kind!r} is not 'student'", field="kind")
        model = cls.create(
            d_in=int(config["d_in"]),
            cfg=EncoderConfig.from_dict(config["encoder"]),
            pooling=config["pooling"],
        )
        model.store.load_state_dict(params)
        return model


def student_embed(student: StudentModel, features) -> np.ndarray:
    return student.embed(features)


@dataclass
class DistillConfig:
    loss: str = "infonce"
    tau: float = 0.05
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    bank_capacity: int = DEFAULT_BANK_CAPACITY
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.loss not in ("infonce", "mse"):
            raise ValidationError(
                f"loss must be 'infonce' or 'mse', got {self.loss!r}", field="loss"
            )
        if self.tau <= 0:
            raise ValidationError("tau must be positive", field="tau")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", field="batch_size")
        if self.lr <= 0:
            raise ValidationError("lr must be positive", field="lr")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1", field="epochs")
        if self.bank_capacity < 1:
            raise ValidationError("bank_capacity must be >= 1", field="bank_capacity")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0", field="weight_decay")


def _check_dims(student: StudentModel, teacher: Teacher) -> None:
    if student.cfg.model_dim != teacher.encoder.cfg.model_dim:
        raise ValidationError(
            f"student dim {student.cfg.model_dim} != teacher dim "
            f"{teacher.encoder.cfg.model_dim}",
            field="model_dim",
        )


def distill_step(
    student: StudentModel,
    teacher: Teacher,
    batch: Sequence[tuple[object, object]],
    bank: MemoryBank,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> float:
    """One optimization step; banks this batch's teacher embeddings afterwards."""
    cfg.validate()
    _check_dims(student, teacher)
    if not batch:
        raise ValidationError("batch is empty", field="batch")
    teacher_embs = teacher.embed_batch([t for _, t in batch])
    if cfg.loss == "infonce" and len(batch) == 1 and len(bank) == 0:
        raise ValidationError(
            "a single-item batch with an empty bank leaves no negatives",
            field="batch_size",
        )
    z = student.embed_train([x for x, _ in batch], rng)
    if cfg.loss == "infonce":
        bank_tensor = Tensor(bank.contents()) if len(bank) else None
        loss = infonce_batch(z, Tensor(teacher_embs), tau=cfg.tau, bank=bank_tensor)
    else:
        targets = teacher_embs / np.sqrt((teacher_embs**2).sum(axis=1, keepdims=True))
        loss = mse(_normalize_rows(z, "student embedding"), Tensor(targets))
    student.store.zero_grad()
    loss.backward()
    adamw_step(student.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    bank.push(teacher_embs)
    return float(loss.data)


def distill_train(
    student: StudentModel,
    teacher: Teacher,
    corpus: Corpus,
    targets: Mapping[str, object],
    cfg: DistillConfig,
    dev_pairs: ScoredPairSet,
    bank: MemoryBank | None = None,
) -> tuple[list[tuple[int, float]], dict]:
    """Epochs of distillation with keep-best on dev rank correlation.

    Returns (history of (step, dev_spearman), info); the student is left at
    its best checkpoint. The bank persists across epoch boundaries.
    """
    cfg.validate()
    _check_dims(student, teacher)
    ids = [u.id for u in corpus]
    if not ids:
        raise ValidationError("corpus is empty", field="corpus")
    for utt_id in ids:
        if utt_id not in targets:
            raise ValidationError(
                f"no paired target for utterance {utt_id!r}", field=utt_id
            )
    for id_a, id_b, _ in dev_pairs.pairs:
        for utt_id in (id_a, id_b):
            if utt_id not in corpus:
                raise ValidationError(
                    f"dev pair references unknown utterance {utt_id!r}", field=utt_id
                )

    dev_ids = sorted({i for a, b, _ in dev_pairs.pairs for i in (a, b)})

    def dev_metric() -> float:
        embs = student.embed_batch([corpus[i].features.data for i in dev_ids])
        vec = {i: embs[k] for k, i in enumerate(dev_ids)}
        preds, human = [], []
        for id_a, id_b, score in dev_pairs.pairs:
            a, b = vec[id_a], vec[id_b]
            preds.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
            human.append(score)
        return spearman(preds, human)

    def mean_teacher_cosine() -> float:
        s = student.embed_batch([corpus[i].features.data for i in dev_ids])
        t = teacher.embed_batch([targets[i] for i in dev_ids])
        s = s / np.linalg.norm(s, axis=1, keepdims=True)
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
        return float((s * t).sum(axis=1).mean())

    rng = derive_rng(cfg.seed, "distill", "train")
    if bank is None:
        bank = MemoryBank(cfg.bank_capacity)
    init_metric = dev_metric()
    history = [(0, init_metric)]
    info = {"cosine_start": mean_teacher_cosine()}
    best_metric = init_metric
    best_state = student.store.state_dict()

    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        for chunk in _chunks([ids[i] for i in order], cfg.batch_size):
            batch = [(corpus[i].features.data, targets[i]) for i in chunk]
            if cfg.loss == "infonce" and len(batch) == 1 and len(bank) == 0:
                continue  # nothing to contrast against yet
            distill_step(student, teacher, batch, bank, cfg, rng)
            step += 1
        metric = dev_metric()
        history.append((step, metric))
        if metric > best_metric:
            best_metric = metric
            best_state = student.store.state_dict()
    student.store.load_state_dict(best_state)
    info["cosine_best"] = mean_teacher_cosine()
    info["best_dev_spearman"] = best_metric
    return history, info


# ---------------------------------------------------------------------------
# paired-data manifest
# ---------------------------------------------------------------------------

def save_paired_manifest(pairs: Sequence[tuple[str, int]], path: str | Path) -> None:
    """TSV rows of utterance id and the line index of its target sequence."""
    lines = [f"{utt_id}\t{line_ref}" for utt_id, line_ref in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_paired_manifest(path: str | Path) -> list[tuple[str, int]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(
                f"line {lineno}: expected 'id<TAB>line_ref', got {line!r}", field="line"
            )
        try:
            ref = int(parts[1])
        except ValueError:
            raise ValidationError(
                f"line {lineno}: line_ref {parts[1]!r} is not an integer", field="line"
            ) from None
        out.append((parts[0], ref))
    return out
