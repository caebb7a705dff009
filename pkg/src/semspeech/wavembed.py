"""Sequence autoencoder: encode frames, pool to one vector, reconstruct tokens.

The model earns its embedding by having to regenerate the utterance's discrete
target sequence from a single pooled vector. After training the decoder can be
dropped; embedding extraction only ever reads encoder and pooling parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, FeatureSequence
from .errors import ValidationError
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import (
    EncoderConfig,
    attention_pool,
    decode_tokens,
    decoder_step,
    init_feature_encoder,
    init_token_decoder,
    transformer_encode,
)
from .nn.losses import nll_loss
from .nn.optim import ParamStore, adamw_step
from .nn.tensor import Tensor, no_grad
from .random_utils import derive_rng
from .tokenizer import CLS, PAD, SEP

DEFAULT_MAX_TARGET_LEN = 256


@dataclass
class TrainRunConfig:
    epochs: int = 10
    lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    dev_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1", field="epochs")
        if self.lr <= 0:
            raise ValidationError("lr must be positive", field="lr")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", field="batch_size")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ValidationError("dev_fraction must be in [0, 1)", field="dev_fraction")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0", field="weight_decay")


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    dev_loss: float


def _as_frames(x) -> np.ndarray:
    if isinstance(x, FeatureSequence):
        return np.asarray(x.data, dtype=np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError("features must be a 2-D (T, d) matrix", field="features")
    return arr


def _as_tokens(seq) -> np.ndarray:
    arr = np.asarray(getattr(seq, "tokens", seq), dtype=np.int64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise ValidationError(
            "target must be a 1-D token sequence of length >= 2", field="target"
        )
    return arr


class WavEmbedModel:
    """Feature encoder + attention pooling + token decoder in one store."""

    def __init__(
        self,
        store: ParamStore,
        encoder_cfg: EncoderConfig,
        decoder_cfg: EncoderConfig,
        d_in: int,
        vocab: int,
        target_mode: str = "units",
        condition_mode: str = "memory",
        max_target_len: int = DEFAULT_MAX_TARGET_LEN,
        has_decoder: bool = True,
    ):
        self.store = store
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.d_in = d_in
        self.vocab = vocab
        self.target_mode = target_mode
        self.condition_mode = condition_mode
        self.max_target_len = max_target_len
        self.has_decoder = has_decoder

    @classmethod
    def create(
        cls,
        d_in: int,
        vocab: int,
        encoder_cfg: EncoderConfig | None = None,
        decoder_cfg: EncoderConfig | None = None,
        target_mode: str = "units",
        condition_mode: str = "memory",
        max_target_len: int = DEFAULT_MAX_TARGET_LEN,
        seed: int = 0,
    ) -> "WavEmbedModel":
        if target_mode not in ("units", "tokens", "text"):
            raise ValidationError(
                f"target_mode must be 'units', 'tokens' or 'text', got {target_mode!r}",
                field="target_mode",
            )
        if vocab < 6:
            raise ValidationError(
                "vocabulary must cover the 5 special ids plus content", field="vocab"
            )
        encoder_cfg = encoder_cfg or EncoderConfig()
        decoder_cfg = decoder_cfg or EncoderConfig(
            layers=encoder_cfg.layers,
            model_dim=encoder_cfg.model_dim,
            heads=encoder_cfg.heads,
            ff_dim=encoder_cfg.ff_dim,
            dropout_rate=encoder_cfg.dropout_rate,
            max_positions=encoder_cfg.max_positions,
        )
        if decoder_cfg.model_dim != encoder_cfg.model_dim:
            raise ValidationError(
                "encoder and decoder must share model_dim", field="model_dim"
            )
        rng = derive_rng(seed, "wavembed", "init")
        store = ParamStore()
        init_feature_encoder(store, rng, encoder_cfg, d_in, prefix="enc")
        # zero pooling weight starts at plain mean pooling
        store.add("pool.W", Tensor(np.zeros(encoder_cfg.model_dim)))
        init_token_decoder(
            store, rng, decoder_cfg, vocab, prefix="dec", condition_mode=condition_mode
        )
        return cls(
            store,
            encoder_cfg,
            decoder_cfg,
            d_in,
            vocab,
            target_mode=target_mode,
            condition_mode=condition_mode,
            max_target_len=max_target_len,
        )

    # -- embedding ----------------------------------------------------------

    def _encode_pool(
        self,
        x: Tensor,
        valid: np.ndarray | None,
        train_mode: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        h = transformer_encode(
            x, self.store, self.encoder_cfg, train_mode=train_mode, rng=rng, valid=valid
        )
        return attention_pool(h, self.store["pool.W"], valid=valid)

    def embed(self, features) -> np.ndarray:
        frames = _as_frames(features)
        with no_grad():
            z = self._encode_pool(Tensor(frames), None, False, None)
        return z.data.copy()

    def embed_batch(self, features: Iterable) -> np.ndarray:
        frame_list = [_as_frames(f) for f in features]
        if not frame_list:
            return np.zeros((0, self.encoder_cfg.model_dim))
        x, valid = _pad_frames(frame_list)
        with no_grad():
            z = self._encode_pool(Tensor(x), valid, False, None)
        return z.data.copy()

    # -- reconstruction -----------------------------------------------------

    def _require_decoder(self) -> None:
        if not self.has_decoder:
            raise ValidationError(
                "decoder parameters were stripped from this model", field="decoder"
            )

    def _check_target_len(self, n: int) -> None:
        if n > self.max_target_len:
            raise ValidationError(
                f"target length {n} exceeds max_target_len {self.max_target_len}",
                field="max_target_len",
            )

    def reconstruction_loss(
        self,
        features,
        target,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        self._require_decoder()
        tokens = _as_tokens(target)
        self._check_target_len(len(tokens))
        frames = _as_frames(features)
        z = self._encode_pool(Tensor(frames), None, train_mode, rng)
        logits = decode_tokens(
            tokens[:-1],
            z,
            self.store,
            self.decoder_cfg,
            self.vocab,
            condition_mode=self.condition_mode,
            train_mode=train_mode,
            rng=rng,
        )
        return nll_loss(logits, tokens[1:], pad_id=PAD)

    def batch_loss(
        self,
        frame_list: Sequence[np.ndarray],
        token_list: Sequence[np.ndarray],
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        self._require_decoder()
        if len(frame_list) != len(token_list) or not frame_list:
            raise ValidationError(
                "need equal, non-zero numbers of feature and target sequences",
                field="batch",
            )
        for t in token_list:
            self._check_target_len(len(t))
        x, valid = _pad_frames([_as_frames(f) for f in frame_list])
        inputs, targets = _pad_targets([_as_tokens(t) for t in token_list])
        z = self._encode_pool(Tensor(x), valid, train_mode, rng)
        logits = decode_tokens(
            inputs,
            z,
            self.store,
            self.decoder_cfg,
            self.vocab,
            condition_mode=self.condition_mode,
            train_mode=train_mode,
            rng=rng,
        )
        return nll_loss(logits, targets, pad_id=PAD)

    def greedy_decode(self, features, max_len: int = 64) -> np.ndarray:
        self._require_decoder()
        if max_len < 2:
            raise ValidationError("max_len must be >= 2", field="max_len")
        frames = _as_frames(features)
        with no_grad():
            z = self._encode_pool(Tensor(frames), None, False, None)
            out = [CLS]
            while len(out) < max_len:
                logits = decoder_step(
                    np.asarray(out),
                    z,
                    self.store,
                    self.decoder_cfg,
                    self.vocab,
                    condition_mode=self.condition_mode,
                )
                nxt = int(np.argmax(logits.data))
                out.append(nxt)
                if nxt == SEP:
                    break
        return np.asarray(out, dtype=np.int64)

    # -- persistence --------------------------------------------------------

    def strip_decoder(self) -> None:
        """Drop decoder parameters; embedding extraction is unaffected."""
        kept = ParamStore()
        for name, p in self.store.items():
            if not name.startswith("dec."):
                kept.add(name, Tensor(p.data.copy()))
        self.store = kept
        self.has_decoder = False

    def config_dict(self) -> dict:
        return {
            "encoder": self.encoder_cfg.to_dict(),
            "decoder": self.decoder_cfg.to_dict(),
            "d_in": self.d_in,
            "vocab": self.vocab,
            "target_mode": self.target_mode,
            "condition_mode": self.condition_mode,
            "max_target_len": self.max_target_len,
            "has_decoder": self.has_decoder,
        }

    def save(self, path: str | Path, encoder_only: bool = False) -> None:
        store = self.store
        has_decoder = self.has_decoder
        if encoder_only and has_decoder:
            store = ParamStore()
            for name, p in self.store.items():
                if not name.startswith("dec."):
                    store.add(name, Tensor(p.data))
            has_decoder = False
        config = self.config_dict()
        config["has_decoder"] = has_decoder
        save_checkpoint(path, kind="wavembed", config=config, store=store)

    @classmethod
    def load(cls, path: str | Path) -> "WavEmbedModel":
        kind, config, params = load_checkpoint(path)
        if kind != "wavembed":
            raise ValidationError(f"checkpoint kind {kind!r} is not 'wavembed'", field="kind")
        encoder_cfg = EncoderConfig.from_dict(config["encoder"])
        decoder_cfg = EncoderConfig.from_dict(config["decoder"])
        model = cls.create(
            d_in=int(config["d_in"]),
            vocab=int(config["vocab"]),
            encoder_cfg=encoder_cfg,
            decoder_cfg=decoder_cfg,
            target_mode=config["target_mode"],
            condition_mode=config["condition_mode"],
            max_target_len=int(config["max_target_len"]),
        )
        if not config.get("has_decoder", True):
            model.strip_decoder()
        model.store.load_state_dict(params)
        return model


def _pad_frames(frame_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    t_max = max(f.shape[0] for f in frame_list)
    d = frame_list[0].shape[1]
    x = np.zeros((len(frame_list), t_max, d))
    valid = np.zeros((len(frame_list), t_max), dtype=bool)
    for i, f in enumerate(frame_list):
        if f.shape[1] != d:
            raise ValidationError("inconsistent feature dimensions in batch", field="batch")
        x[i, : f.shape[0]] = f
        valid[i, : f.shape[0]] = True
    return x, valid


def _pad_targets(token_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    s_max = max(len(t) for t in token_list)
    inputs = np.full((len(token_list), s_max - 1), PAD, dtype=np.int64)
    targets = np.full((len(token_list), s_max - 1), PAD, dtype=np.int64)
    for i, t in enumerate(token_list):
        inputs[i, : len(t) - 1] = t[:-1]
        targets[i, : len(t) - 1] = t[1:]
    return inputs, targets


def _chunks(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _mean_eval_loss(
    model: WavEmbedModel,
    ids: Sequence[str],
    frames: Mapping[str, np.ndarray],
    targets: Mapping[str, np.ndarray],
    batch_size: int,
) -> float:
    total, count = 0.0, 0
    with no_grad():
        for chunk in _chunks(list(ids), batch_size):
            loss = model.batch_loss(
                [frames[i] for i in chunk], [targets[i] for i in chunk]
            )
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def train_wavembed(
    model: WavEmbedModel,
    corpus: Corpus,
    targets: Mapping[str, Sequence[int]],
    cfg: TrainRunConfig,
) -> list[CurvePoint]:
    """Optimize reconstruction over the corpus; keep the best-dev-loss params.

    Returns the loss curve; the model is left holding the best parameters.
    """
    cfg.validate()
    model._require_decoder()
    ids = [u.id for u in corpus]
    if not ids:
        raise ValidationError("corpus is empty", field="corpus")
    token_map: dict[str, np.ndarray] = {}
    frame_map: dict[str, np.ndarray] = {}
    for u in corpus:
        if u.id not in targets:
            raise ValidationError(f"no target sequence for utterance {u.id!r}", field=u.id)
        t = _as_tokens(targets[u.id])
        model._check_target_len(len(t))
        if t.min() < 0 or t.max() >= model.vocab:
            raise ValidationError(
                f"target for {u.id!r} contains ids outside vocab {model.vocab}",
                field=u.id,
            )
        token_map[u.id] = t
        frame_map[u.id] = _as_frames(u.features)

    split_rng = derive_rng(cfg.seed, "wavembed", "split")
    order = [ids[i] for i in split_rng.permutation(len(ids))]
    n_dev = int(round(cfg.dev_fraction * len(ids)))
    dev_ids = order[:n_dev]
    train_ids = order[n_dev:]
    if not train_ids:
        raise ValidationError("dev split leaves no training utterances", field="dev_fraction")
    if not dev_ids:
        # tiny corpora: judge on the training set rather than skipping keep-best
        dev_ids = train_ids

    train_rng = derive_rng(cfg.seed, "wavembed", "train")
    curve: list[CurvePoint] = []
    init_train = _mean_eval_loss(model, train_ids, frame_map, token_map, cfg.batch_size)
    init_dev = _mean_eval_loss(model, dev_ids, frame_map, token_map, cfg.batch_size)
    curve.append(CurvePoint(step=0, train_loss=init_train, dev_loss=init_dev))
    best_dev = init_dev
    best_state = model.store.state_dict()

    step = 0
    for _epoch in range(cfg.epochs):
        perm = train_rng.permutation(len(train_ids))
        epoch_total, epoch_count = 0.0, 0
        for chunk in _chunks([train_ids[i] for i in perm], cfg.batch_size):
            model.store.zero_grad()
            loss = model.batch_loss(
                [frame_map[i] for i in chunk],
                [token_map[i] for i in chunk],
                train_mode=True,
                rng=train_rng,
            )
            loss.backward()
            adamw_step(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
            step += 1
            epoch_total += float(loss.data) * len(chunk)
            epoch_count += len(chunk)
        dev_loss = _mean_eval_loss(model, dev_ids, frame_map, token_map, cfg.batch_size)
        curve.append(
            CurvePoint(step=step, train_loss=epoch_total / epoch_count, dev_loss=dev_loss)
        )
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_state = model.store.state_dict()

    model.store.load_state_dict(best_state)
    return curve


def save_loss_curve(path: str | Path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "dev_loss"])
        for point in curve:
            writer.writerow([point.step, repr(point.train_loss), repr(point.dev_loss)])


def load_loss_curve(path: str | Path) -> list[CurvePoint]:
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "train_loss", "dev_loss"]:
            raise ValidationError("unexpected loss curve header", field="header")
        for row in reader:
            points.append(CurvePoint(int(row[0]), float(row[1]), float(row[2])))
    return points
