"""Model checkpoint file: magic "SEMM", version u16=1, u32 header length,
UTF-8 JSON header {"kind", "config", "params": [[name, shape], ...]}, then the
float32 parameter buffers concatenated in header order."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FileFormatError
from .optim import ParamStore

CHECKPOINT_MAGIC = b"SEMM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, kind: str, config: dict, store: ParamStore) -> None:
    header = {
        "kind": kind,
        "config": config,
        "params": [[name, list(p.shape)] for name, p in store.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, p in store.items():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns (kind, config, name -> float32 array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(
            f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0
        )
    if len(blob) < 10:
        raise FileFormatError("truncated header", offset=len(blob))
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=4)
    (header_len,) = struct.unpack_from("<I", blob, 6)
    if len(blob) < 10 + header_len:
        raise FileFormatError("truncated JSON header", offset=len(blob))
    try:
        header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"bad JSON header: {e}", offset=10) from e
    for key in ("kind", "config", "params"):
        if key not in header:
            raise FileFormatError(f"header missing key {key!r}", offset=10)

    params: dict[str, np.ndarray] = {}
    offset = 10 + header_len
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if len(blob) < offset + nbytes:
            raise FileFormatError(
                f"truncated buffer for parameter {name!r}", offset=len(blob)
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FileFormatError(
                f"non-finite value in parameter {name!r}", offset=offset + 4 * bad
            )
        params[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FileFormatError(
            f"{len(blob) - offset} trailing bytes after parameter buffers", offset=offset
        )
    return header["kind"], header["config"], params


def load_into_store(path: str | Path, store: ParamStore, expect_kind: str | None = None):
    """Load a checkpoint's buffers into an already constructed store."""
    kind, config, params = load_checkpoint(path)
    if expect_kind is not None and kind != expect_kind:
        raise FileFormatError(f"checkpoint kind {kind!r}, expected {expect_kind!r}")
    store.load_state_dict({k: v.astype(np.float64) for k, v in params.items()})
    return kind, config
