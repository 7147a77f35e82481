"""Checkpoint container (``HWS1``) and per-head weight slicing.

File layout::

    b"HWS1" | u64 little-endian header length | UTF-8 JSON header | payload

The header is canonical JSON (sorted keys, compact separators) holding the
tensor table and free-form metadata (model config, head layout). Payload
tensors are raw little-endian, row-major, stored back to back in table order.
Loading rejects any header that would not re-serialize to the same bytes, so
``save_store(load_store(f))`` reproduces ``f`` exactly.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass
from functools import total_ordering
from os import PathLike
from typing import Any

import numpy as np

from .errors import (
    HeadOutOfRange,
    HeaderError,
    InvalidConfig,
    MagicMismatch,
    MissingTensor,
    ShapeMismatch,
    TruncatedData,
    UnknownTensor,
)

MAGIC = b"HWS1"
HEAD_LAYOUT = "contiguous"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAME_RE = re.compile(
    r"^(?:layer\.(0|[1-9]\d*)\.(?:attn\.(?:wq|wk|wv|wo)|ffn\.(?:gate|up|down))|embed\.tok|head\.out)$"
)
ATTN_NAMES = ("wq", "wk", "wv", "wo")
FFN_NAMES = ("gate", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    heads_per_layer: int
    embed_dim: int
    head_dim_q: int
    head_dim_k: int
    head_dim_v: int
    ffn_dim: int
    vocab_size: int = 1
    max_seq_len: int = 1024

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidConfig(f"{name} must be an integer >= 1, got {value!r}")
        if self.head_dim_k != self.head_dim_q:
            raise InvalidConfig("head_dim_k must equal head_dim_q")
        if self.heads_per_layer * self.head_dim_q > self.embed_dim:
            raise InvalidConfig("heads_per_layer * head_dim_q exceeds embed_dim")

    @property
    def total_heads(self) -> int:
        return self.num_layers * self.heads_per_layer

    def heads(self) -> Iterator[HeadRef]:
        for layer in range(self.num_layers):
            for head in range(self.heads_per_layer):
                yield HeadRef(layer, head)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelConfig:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        try:
            return cls(**known)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None


@total_ordering
@dataclass(frozen=True)
class HeadRef:
    """Zero-based (layer, head) coordinate, ordered lexicographically."""

    layer: int
    head: int

    def __lt__(self, other: HeadRef) -> bool:
        return (self.layer, self.head) < (other.layer, other.head)

    def as_list(self) -> list[int]:
        return [self.layer, self.head]

    @classmethod
    def parse(cls, value: Any) -> HeadRef:
        layer, head = value
        return cls(int(layer), int(head))

    def __str__(self) -> str:
        return f"({self.layer},{self.head})"


@dataclass(frozen=True)
class HeadSlices:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor table for an engine model with this config."""
    D, H = cfg.embed_dim, cfg.heads_per_layer
    shapes: dict[str, tuple[int, ...]] = {"embed.tok": (cfg.vocab_size, D)}
    for i in range(cfg.num_layers):
        shapes[f"layer.{i}.attn.wq"] = (D, H * cfg.head_dim_q)
        shapes[f"layer.{i}.attn.wk"] = (D, H * cfg.head_dim_k)
        shapes[f"layer.{i}.attn.wv"] = (D, H * cfg.head_dim_v)
        shapes[f"layer.{i}.attn.wo"] = (H * cfg.head_dim_v, D)
        shapes[f"layer.{i}.ffn.gate"] = (D, cfg.ffn_dim)
        shapes[f"layer.{i}.ffn.up"] = (D, cfg.ffn_dim)
        shapes[f"layer.{i}.ffn.down"] = (cfg.ffn_dim, D)
    shapes["head.out"] = (D, cfg.vocab_size)
    return shapes


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True, order="C")
    a.flags.writeable = False
    return a


class TensorStore(Mapping[str, np.ndarray]):
    """Immutable, insertion-ordered mapping of tensor name to array.

    Arrays are read-only; derive modified stores with :meth:`replace`.
    """

    def __init__(
        self,
        tensors: Mapping[str, np.ndarray],
        metadata: Mapping[str, Any] | None = None,
        *,
        allow_extra: bool = False,
    ):
        entries: dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            if not allow_extra and not _NAME_RE.match(name):
                raise UnknownTensor(name)
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                raise HeaderError(f"{name}: unsupported dtype {arr.dtype}")
            entries[name] = arr if not arr.flags.writeable and arr.flags.c_contiguous else _frozen(arr)
        self._entries = entries
        self.metadata: dict[str, Any] = json.loads(json.dumps(dict(metadata or {})))
        self.allow_extra = allow_extra

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise MissingTensor(name) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"TensorStore({len(self)} tensors)"

    def replace(self, updates: Mapping[str, np.ndarray]) -> TensorStore:
        """New store with ``updates`` swapped in; untouched arrays are shared."""
        merged = dict(self._entries)
        for name, arr in updates.items():
            if name not in merged:
                raise MissingTensor(name)
            old = merged[name]
            arr = np.asarray(arr, dtype=old.dtype)
            if arr.shape != old.shape:
                raise ShapeMismatch(f"{name}: {arr.shape} != {old.shape}")
            merged[name] = _frozen(arr)
        return TensorStore(merged, self.metadata, allow_extra=self.allow_extra)

    def config(self) -> ModelConfig:
        if "config" not in self.metadata:
            raise InvalidConfig("checkpoint header carries no model config")
        return ModelConfig.from_dict(self.metadata["config"])

    def check_against(self, cfg: ModelConfig, names: list[str] | None = None) -> None:
        shapes = expected_shapes(cfg)
        for name in names if names is not None else shapes:
            arr = self[name]
            if arr.shape != shapes[name]:
                raise ShapeMismatch(f"{name}: {list(arr.shape)} != {list(shapes[name])}")


def _header_bytes(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps_store(store: TensorStore) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in store.items():
        dtype = "f32" if arr.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offsets": [offset, offset + len(raw)]}
        )
        chunks.append(raw)
        offset += len(raw)
    metadata = dict(store.metadata)
    metadata.setdefault("head_layout", HEAD_LAYOUT)
    header = _header_bytes({"metadata": metadata, "tensors": table})
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads_store(buf: bytes, *, allow_extra: bool = False) -> TensorStore:
    if buf[:4] != MAGIC:
        raise MagicMismatch(f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 12:
        raise HeaderError("file too short for header length")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    raw_header = buf[12 : 12 + hlen]
    if len(raw_header) != hlen:
        raise HeaderError("header truncated")
    try:
        header = json.loads(raw_header.decode("utf-8"))
        table = header["tensors"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise HeaderError(f"malformed header: {e}") from None
    if _header_bytes(header) != raw_header:
        raise HeaderError("header is not in canonical form")
    if metadata.get("head_layout") != HEAD_LAYOUT:
        raise HeaderError(f"unsupported head_layout {metadata.get('head_layout')!r}")

    payload = memoryview(buf)[12 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    expected_begin = 0
    for entry in table:
        name = entry["name"]
        if name in tensors:
            raise HeaderError(f"duplicate tensor {name}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise HeaderError(f"{name}: unsupported dtype {entry['dtype']!r}")
        shape = [int(s) for s in entry["shape"]]
        begin, end = (int(o) for o in entry["offsets"])
        if begin != expected_begin or end < begin:
            raise HeaderError(f"{name}: offsets not contiguous")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise ShapeMismatch(name)
        if end > len(payload):
            raise TruncatedData(name)
        arr = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        expected_begin = end
    if len(payload) != expected_begin:
        raise HeaderError(f"{len(payload) - expected_begin} trailing payload bytes")
    return TensorStore(tensors, metadata, allow_extra=allow_extra)


def save_store(store: TensorStore, path: str | PathLike) -> None:
    with open(path, "wb") as f:
        f.write(dumps_store(store))


def load_store(path: str | PathLike, *, allow_extra: bool = False) -> TensorStore:
    with open(path, "rb") as f:
        return loads_store(f.read(), allow_extra=allow_extra)


def _check_head(cfg: ModelConfig, h: HeadRef) -> None:
    if not (0 <= h.layer < cfg.num_layers and 0 <= h.head < cfg.heads_per_layer):
        raise HeadOutOfRange(f"{h} outside {cfg.num_layers} layers x {cfg.heads_per_layer} heads")


def head_slices(store: TensorStore, cfg: ModelConfig, h: HeadRef) -> HeadSlices:
    _check_head(cfg, h)
    prefix = f"layer.{h.layer}.attn."
    store.check_against(cfg, [prefix + n for n in ATTN_NAMES])
    dq, dk, dv = cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v
    i = h.head
    return HeadSlices(
        wq=store[prefix + "wq"][:, i * dq : (i + 1) * dq],
        wk=store[prefix + "wk"][:, i * dk : (i + 1) * dk],
        wv=store[prefix + "wv"][:, i * dv : (i + 1) * dv],
        wo=store[prefix + "wo"][i * dv : (i + 1) * dv, :],
    )


def with_head_slices(
    store: TensorStore, cfg: ModelConfig, h: HeadRef, slices: HeadSlices
) -> TensorStore:
    """Return a new store in which head ``h`` carries ``slices``."""
    _check_head(cfg, h)
    prefix = f"layer.{h.layer}.attn."
    dq, dk, dv = cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v
    i = h.head
    wq, wk, wv, wo = (store[prefix + n].copy() for n in ATTN_NAMES)
    wq[:, i * dq : (i + 1) * dq] = slices.wq
    wk[:, i * dk : (i + 1) * dk] = slices.wk
    wv[:, i * dv : (i + 1) * dv] = slices.wv
    wo[i * dv : (i + 1) * dv, :] = slices.wo
    return store.replace(dict(zip((prefix + n for n in ATTN_NAMES), (wq, wk, wv, wo))))


def store_from_arrays(
    arrays: Mapping[str, np.ndarray], cfg: ModelConfig | None = None, **metadata: Any
) -> TensorStore:
    meta: dict[str, Any] = {"head_layout": HEAD_LAYOUT, **metadata}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    store = TensorStore(arrays, meta)
    if cfg is not None:
        store.check_against(cfg, [n for n in expected_shapes(cfg) if n in store])
    return store


__all__ = [
    "ATTN_NAMES",
    "FFN_NAMES",
    "HEAD_LAYOUT",
    "MAGIC",
    "HeadRef",
    "HeadSlices",
    "ModelConfig",
    "TensorStore",
    "dumps_store",
    "expected_shapes",
    "head_slices",
    "load_store",
    "loads_store",
    "save_store",
    "store_from_arrays",
    "with_head_slices",
]

