"""MMFX tensor-table files for checkpoints and golden fixtures.

Layout, all little-endian::

    b"MMFX" | u32 version | u32 doc_len | doc (UTF-8 JSON)
    then per tensor: u16 name_len | name | u8 rank | u32 extent * rank | f32 data

The JSON document records ``tensor_count`` so truncation at a tensor
boundary is caught as well as truncation inside one.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMFX"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_table(tensors: Mapping[str, np.ndarray], doc: dict) -> bytes:
    doc = dict(doc, tensor_count=len(tensors))
    doc_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(doc_bytes)), doc_bytes]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_table(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not an MMFX file")
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    version, doc_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported MMFX version {version}")
    pos = 12 + doc_len
    if pos > len(buf):
        raise CheckpointError("truncated config document")
    doc = json.loads(buf[12:pos].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            end = pos + 4 * size
            if end > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(buf[pos:end], dtype="<f4").reshape(shape).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated tensor table: {exc}") from None
    if doc.get("tensor_count") != len(tensors):
        raise CheckpointError(f"expected {doc.get('tensor_count')} tensors, found {len(tensors)}")
    return doc, tensors


def write_table(path: str | Path, tensors: Mapping[str, np.ndarray], doc: dict):
    Path(path).write_bytes(encode_table(tensors, doc))


def read_table(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_table(Path(path).read_bytes())


def save_checkpoint(model, path: str | Path, tokenizer=None, extra: dict | None = None):
    doc = {"kind": "model", "model": model.cfg.to_dict(),
           "lora": model.lora.to_dict() if model.lora is not None else None}
    if tokenizer is not None:
        doc["vocab"] = tokenizer.tokens[3:]
    if extra:
        doc["extra"] = extra
    write_table(path, {name: p.data for name, p in model.named_parameters()}, doc)


def load_checkpoint(path: str | Path):
    """Rebuild (model, tokenizer-or-None, doc) from an MMFX checkpoint."""
    from .features import Tokenizer
    from .lora import LoraConfig, wrap_model
    from .model import ModelConfig, build_model
    from .tensor import Rng

    doc, tensors = read_table(path)
    if doc.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    model = build_model(ModelConfig.from_dict(doc["model"]), Rng(0))
    if doc.get("lora"):
        wrap_model(model, LoraConfig.from_dict(doc["lora"]), Rng(0))
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(f"checkpoint/config mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        if p.shape != tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].copy()
    tok = Tokenizer(doc["vocab"]) if "vocab" in doc else None
    return model, tok, doc
