"""Versioned binary checkpoint format.

Layout (little-endian)::

    magic        8 bytes  b"ADVMICKP"
    header       u32 format_version, u32 hidden, u32 embed, u32 vocab_size
    n_records    u32
    record*      u16 name_len, name (utf-8), u8 ndim, u64 shape[ndim], f64 data[prod(shape)]
    meta         u32 length, JSON (utf-8, sorted keys)
    checksum     u32 crc32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ADVMICKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(header: tuple[int, int, int], tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    hidden, embed, vocab_size = header
    parts = [MAGIC, struct.pack("<IIII", FORMAT_VERSION, hidden, embed, vocab_size),
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns (header, tensors, meta)."""
    if len(data) < len(MAGIC) + 24 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    try:
        pos = len(MAGIC)
        version, hidden, embed, vocab_size = struct.unpack_from("<IIII", body, pos)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        pos += 16
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
            tensors[name] = arr.astype(np.float64)
            pos += 8 * count
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + ln].decode("utf-8"))
        if pos + ln != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return (hidden, embed, vocab_size), tensors, meta


def save_params(params, path: str | Path, meta: dict | None = None) -> None:
    cfg = params.config
    meta = {"model": {"vocab_size": cfg.vocab_size, "embed": cfg.embed, "hidden": cfg.hidden,
                      "max_len": cfg.max_len}, **(meta or {})}
    Path(path).write_bytes(dumps((cfg.hidden, cfg.embed, cfg.vocab_size), params.weights, meta))


def load_params(path: str | Path):
    from .seqmodel import ModelConfig, SeqModelParams
    header, tensors, meta = loads(Path(path).read_bytes())
    cfg = ModelConfig(**meta["model"])
    if (cfg.hidden, cfg.embed, cfg.vocab_size) != header:
        raise CheckpointError("header disagrees with stored model config")
    return SeqModelParams(cfg, dict(tensors)), meta
