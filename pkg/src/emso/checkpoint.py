"""Binary checkpoint format.

Layout (all integers little-endian):

    b"UMLB" | uint32 version | uint64 metadata length | metadata (UTF-8 JSON)
    | float32 payload, tensors concatenated in canonical name order

The metadata carries the model config, the vocabulary, the tensor table and
free-form lineage/seed records.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from array import array
from pathlib import Path

import torch

from .model import ModelConfig, TinyGPT, Vocabulary

MAGIC = b"UMLB"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    a = array("f", t.detach().to(torch.float32).reshape(-1).tolist())
    if sys.byteorder != "little":
        a.byteswap()
    return a.tobytes()


def _bytes_tensor(data: bytes, shape) -> torch.Tensor:
    a = array("f")
    a.frombytes(data)
    if sys.byteorder != "little":
        a.byteswap()
    return torch.tensor(a, dtype=torch.float32).reshape(shape)


def vocabulary_info() -> dict:
    return {"kind": "bytes", "size": Vocabulary.size, "bos": Vocabulary.bos, "pad": Vocabulary.pad}


def dumps(model: TinyGPT, lineage: list | None = None, seeds: dict | None = None, extra: dict | None = None) -> bytes:
    names = model.canonical_names()
    meta = {
        "config": model.config.to_dict(),
        "vocabulary": vocabulary_info(),
        "tensors": [[n, list(model.params[n].shape)] for n in names],
        "lineage": list(lineage or []),
        "seeds": dict(seeds or {}),
    }
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(_tensor_bytes(model.params[n]) for n in names)
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + payload


def loads(data: bytes) -> tuple[TinyGPT, dict]:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if start + n > len(data):
        raise CheckpointError("truncated metadata")
    try:
        meta = json.loads(data[start : start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable metadata: {e}") from None
    if meta.get("vocabulary") != vocabulary_info():
        raise CheckpointError(f"vocabulary mismatch: {meta.get('vocabulary')}")
    model = TinyGPT(ModelConfig.from_dict(meta["config"]))
    offset = start + n
    with torch.no_grad():
        for name, shape in meta["tensors"]:
            if name not in model.params:
                raise CheckpointError(f"unknown tensor {name}")
            if list(model.params[name].shape) != shape:
                raise CheckpointError(f"shape mismatch for {name}: {shape}")
            size = 4 * model.params[name].numel()
            chunk = data[offset : offset + size]
            if len(chunk) != size:
                raise CheckpointError("truncated payload")
            model.params[name].copy_(_bytes_tensor(chunk, shape))
            offset += size
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after payload")
    missing = set(model.params) - {n for n, _ in meta["tensors"]}
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return model, meta


def save(path: str | Path, model: TinyGPT, **kw) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model, **kw))
    return path


def load(path: str | Path) -> tuple[TinyGPT, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return loads(path.read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(model: TinyGPT) -> str:
    """Hash of the parameter payload alone (ignores metadata)."""
    h = hashlib.sha256()
    for n in model.canonical_names():
        h.update(_tensor_bytes(model.params[n]))
    return h.hexdigest()
