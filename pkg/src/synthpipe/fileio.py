"""On-disk formats: JSONL, TOML, preprocessed-frame binaries and embedding matrices."""

from __future__ import annotations

import json
import struct
import sys
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SPF_MAGIC = b"SPF1"
_SPF_HEADER = struct.Struct("<4sIII")
_EMB_HEADER = struct.Struct("<II")


def read_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def write_toml(path: str | Path, data: dict[str, Any]) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(_drop_none(data), fh)


def _drop_none(obj: Any) -> Any:
    # TOML has no null
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def iter_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def write_spf(path: str | Path, pixels: np.ndarray) -> None:
    """Write a 2-D float image as SPF1: 16-byte header then float32 LE row-major."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_SPF_HEADER.pack(SPF_MAGIC, h, w, 0))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_spf(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _SPF_HEADER.size:
        raise ValueError(f"{path}: truncated SPF header")
    magic, h, w, _ = _SPF_HEADER.unpack_from(data)
    if magic != SPF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_SPF_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def write_embeddings(path: str | Path, emb: np.ndarray) -> None:
    """u32 count, u32 dim, then float32 LE row-major."""
    arr = np.asarray(emb)
    if arr.ndim != 2:
        raise ValueError(f"expected (count, dim), got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(*arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    count, dim = _EMB_HEADER.unpack_from(data)
    body = data[_EMB_HEADER.size:]
    if len(body) != 4 * count * dim:
        raise ValueError(f"{path}: payload size does not match header ({count}x{dim})")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)
