"""Binary container for checkpoints, sparse deltas and LoRA factor files.

Layout (all three kinds share it)::

    [8 bytes]  little-endian u64 header length N
    [N bytes]  UTF-8 JSON: {"__metadata__": {str: str},
                            name: {"dtype": "F32"|"U64", "shape": [...],
                                   "data_offsets": [begin, end]}, ...}
    [payload]  raw little-endian tensor bytes, map order, no padding

Offsets are relative to the payload start. The writer emits compact JSON
with sorted metadata keys, so write/read/write is byte-identical.

Sparse deltas store ``<name>::indices`` (U64) and ``<name>::values`` (F32)
per source tensor. LoRA files store ``<name>::A``/``<name>::B`` (factor
variant) or ``<name>::U``/``<name>::S``/``<name>::V`` (truncated variant).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from byomkit.errors import (
    IndexOutOfRange,
    IoFailure,
    MalformedHeader,
    OffsetOverlap,
    TruncatedPayload,
    UnsortedIndices,
    UnsupportedDtype,
    VariantMixing,
)

FORMAT_VERSION = "1"
SEP = "::"
BASE_KINDS = ("pretrained", "merged", "zero")
LORA_VARIANTS = {"factor": ("A", "B"), "truncated": ("U", "S", "V")}

_DTYPES = {"F32": np.dtype("<f4"), "U64": np.dtype("<u8")}

PathLike = Union[str, os.PathLike]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=lambda: {"format_version": FORMAT_VERSION})

    def __post_init__(self):
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        self.metadata = dict(self.metadata)
        self.metadata.setdefault("format_version", FORMAT_VERSION)

    def num_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(t.shape) for k, t in self.tensors.items()}

    def zeros_like(self) -> "Checkpoint":
        return Checkpoint({k: np.zeros_like(t) for k, t in self.tensors.items()})


@dataclass
class SparseDelta:
    """One pruned task vector: kept flat positions and values per tensor."""

    indices: Dict[str, np.ndarray]
    values: Dict[str, np.ndarray]
    shapes: Dict[str, Tuple[int, ...]]
    keep_ratio: float
    base_fingerprint: str
    base_kind: str = "pretrained"
    merge_provenance: str = "none"

    def __post_init__(self):
        self.indices = {k: np.asarray(v, dtype=np.uint64) for k, v in self.indices.items()}
        self.values = {k: np.asarray(v, dtype=np.float32) for k, v in self.values.items()}
        self.shapes = {k: tuple(int(d) for d in s) for k, s in self.shapes.items()}
        self.keep_ratio = float(self.keep_ratio)

    def kept(self) -> int:
        return sum(int(v.size) for v in self.values.values())

    def validate(self) -> None:
        if not (0.0 < self.keep_ratio <= 1.0):
            raise MalformedHeader(f"keep_ratio {self.keep_ratio} outside (0, 1]")
        if self.base_kind not in BASE_KINDS:
            raise MalformedHeader(f"unknown base_kind {self.base_kind!r}")
        _check_fingerprint_string(self.base_fingerprint)
        if set(self.indices) != set(self.shapes) or set(self.values) != set(self.shapes):
            raise MalformedHeader("indices, values and shapes name different tensors")
        for name, shape in self.shapes.items():
            idx, val = self.indices[name], self.values[name]
            if idx.ndim != 1 or val.ndim != 1 or idx.size != val.size:
                raise MalformedHeader(f"{name!r}: indices/values must be equal-length vectors")
            if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
                raise UnsortedIndices(f"{name!r}: indices are not strictly ascending")
            size = math.prod(shape)
            if idx.size and int(idx[-1]) >= size:
                raise IndexOutOfRange(f"{name!r}: index {int(idx[-1])} >= tensor size {size}")


@dataclass
class LoraFile:
    """Per-target low-rank update, as factors ``(A, B)`` or a truncated SVD ``(U, S, V)``."""

    factors: Dict[str, Tuple[np.ndarray, ...]]
    variant: str = "factor"
    base_fingerprint: str = "0" * 64
    rank: Optional[int] = None

    def __post_init__(self):
        self.factors = {
            k: tuple(np.asarray(x, dtype=np.float32) for x in v) for k, v in self.factors.items()
        }
        if self.rank is None:
            self.rank = _infer_rank(self.factors, self.variant)

    def update(self, name: str) -> np.ndarray:
        """Dense ``d_out x d_in`` update for one target, accumulated in float64."""
        f = [x.astype(np.float64) for x in self.factors[name]]
        if self.variant == "factor":
            return f[0] @ f[1].T
        return (f[0] * f[1]) @ f[2].T

    def stored_params(self, name: str) -> int:
        return sum(int(x.size) for x in self.factors[name])

    def validate(self) -> None:
        if self.variant not in LORA_VARIANTS:
            raise VariantMixing(f"unknown LoRA variant {self.variant!r}")
        _check_fingerprint_string(self.base_fingerprint)
        want = len(LORA_VARIANTS[self.variant])
        for name, parts in self.factors.items():
            if len(parts) != want:
                raise VariantMixing(f"{name!r}: {len(parts)} arrays for variant {self.variant!r}")
            if self.variant == "factor":
                a, b = parts
                if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] != self.rank:
                    raise MalformedHeader(f"{name!r}: factor shapes {a.shape}, {b.shape} vs rank {self.rank}")
            else:
                u, s, v = parts
                q = self.rank
                if u.ndim != 2 or s.shape != (q,) or v.ndim != 2 or u.shape[1] != q or v.shape[1] != q:
                    raise MalformedHeader(f"{name!r}: truncated shapes inconsistent with rank {q}")
                if np.any(s < 0) or np.any(s[1:] > s[:-1]):
                    raise MalformedHeader(f"{name!r}: singular values must be non-negative and descending")


def _infer_rank(factors, variant) -> int:
    for parts in factors.values():
        return int(parts[0].shape[1]) if parts and parts[0].ndim == 2 else 0
    return 0


def _check_fingerprint_string(fp: str) -> None:
    if len(fp) != 64 or any(c not in "0123456789abcdef" for c in fp):
        raise MalformedHeader(f"base fingerprint must be 64 lowercase hex digits, got {fp!r}")


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name or "\x00" in name or name == "__metadata__":
        raise MalformedHeader(f"invalid tensor name {name!r}")


# --- container encoding ---------------------------------------------------

Entry = Tuple[str, str, np.ndarray]  # (name, dtype code, array)


def _encode(entries: List[Entry], metadata: Optional[Mapping[str, str]]) -> bytes:
    header: Dict[str, object] = {}
    if metadata is not None:
        header["__metadata__"] = {str(k): str(metadata[k]) for k in sorted(metadata)}
    chunks = []
    offset = 0
    for name, code, arr in entries:
        _check_name(name)
        if name in header:
            raise MalformedHeader(f"duplicate tensor name {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {
            "dtype": code,
            "shape": [int(d) for d in arr.shape],
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise MalformedHeader(f"duplicate header key {k!r}")
        out[k] = v
    return out


def _decode(blob: bytes) -> Tuple[Dict[str, Tuple[str, np.ndarray]], Dict[str, str]]:
    if len(blob) < 8:
        raise TruncatedPayload("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > len(blob) - 8:
        raise TruncatedPayload(f"header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    payload = memoryview(blob)[8 + n :]
    spans = []
    specs = []
    for name, info in header.items():
        _check_name(name)
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeader(f"{name!r}: entry must have exactly dtype, shape, data_offsets")
        code, shape, offs = info["dtype"], info["shape"], info["data_offsets"]
        if code not in _DTYPES:
            raise UnsupportedDtype(f"{name!r}: dtype {code!r}")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise MalformedHeader(f"{name!r}: bad shape {shape!r}")
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offs)
            or offs[1] < offs[0]
        ):
            raise MalformedHeader(f"{name!r}: bad data_offsets {offs!r}")
        if offs[1] - offs[0] != math.prod(shape) * _DTYPES[code].itemsize:
            raise MalformedHeader(f"{name!r}: byte span does not match shape {shape}")
        spans.append((offs[0], offs[1], name))
        specs.append((name, code, shape, offs))

    prev_end, prev_name = 0, None
    for begin, end, name in sorted(spans):
        if begin < prev_end:
            raise OffsetOverlap(f"{name!r} overlaps {prev_name!r}")
        prev_end, prev_name = end, name
    if prev_end > len(payload):
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header needs {prev_end}")
    if prev_end < len(payload):
        raise MalformedHeader(f"{len(payload) - prev_end} trailing bytes after the last tensor")

    tensors = {}
    for name, code, shape, (begin, end) in specs:
        arr = np.frombuffer(payload[begin:end], dtype=_DTYPES[code]).reshape(shape)
        tensors[name] = (code, arr.astype(_DTYPES[code].newbyteorder("=")))
    return tensors, metadata


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path: PathLike, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


# --- checkpoints ----------------------------------------------------------


def encode_checkpoint(c: Checkpoint) -> bytes:
    return _encode([(k, "F32", t) for k, t in c.tensors.items()], c.metadata)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    tensors, metadata = _decode(blob)
    out = {}
    for name, (code, arr) in tensors.items():
        if code != "F32":
            raise UnsupportedDtype(f"{name!r}: checkpoints hold F32 tensors only, found {code}")
        out[name] = arr
    return Checkpoint(out, metadata)


def write_checkpoint(path: PathLike, c: Checkpoint) -> None:
    _write_bytes(path, encode_checkpoint(c))


def read_checkpoint(path: PathLike) -> Checkpoint:
    return decode_checkpoint(_read_bytes(path))


def fingerprint(c: Union[Checkpoint, Mapping[str, np.ndarray]]) -> str:
    """SHA-256 over the canonical container bytes, metadata left out."""
    tensors = c.tensors if isinstance(c, Checkpoint) else c
    return hashlib.sha256(_encode([(k, "F32", t) for k, t in tensors.items()], None)).hexdigest()


# --- sparse deltas --------------------------------------------------------


def encode_sparse_delta(d: SparseDelta) -> bytes:
    d.validate()
    entries: List[Entry] = []
    for name in d.shapes:
        entries.append((name + SEP + "indices", "U64", d.indices[name]))
        entries.append((name + SEP + "values", "F32", d.values[name]))
    metadata = {
        "format_version": FORMAT_VERSION,
        "kind": "sparse_delta",
        "keep_ratio": repr(d.keep_ratio),
        "base_fingerprint": d.base_fingerprint,
        "base_kind": d.base_kind,
        "merge_provenance": d.merge_provenance,
        "source_shapes": json.dumps({k: list(s) for k, s in d.shapes.items()}, separators=(",", ":")),
    }
    return _encode(entries, metadata)


def _meta(metadata: Mapping[str, str], key: str, kind: str) -> str:
    if key not in metadata:
        raise MalformedHeader(f"{kind} metadata lacks {key!r}")
    return metadata[key]


def decode_sparse_delta(blob: bytes) -> SparseDelta:
    tensors, metadata = _decode(blob)
    if metadata.get("kind") != "sparse_delta":
        raise MalformedHeader("not a sparse delta file")
    try:
        keep_ratio = float(_meta(metadata, "keep_ratio", "sparse delta"))
        shapes = json.loads(_meta(metadata, "source_shapes", "sparse delta"), object_pairs_hook=_no_duplicates)
    except (ValueError, TypeError) as exc:
        raise MalformedHeader(f"bad sparse delta metadata: {exc}") from None
    if not isinstance(shapes, dict):
        raise MalformedHeader("source_shapes must be a JSON object")
    indices, values = {}, {}
    for full, (code, arr) in tensors.items():
        name, _, part = full.rpartition(SEP)
        want = {"indices": "U64", "values": "F32"}.get(part)
        if want is None or name not in shapes:
            raise MalformedHeader(f"unexpected tensor {full!r} in sparse delta")
        if code != want:
            raise UnsupportedDtype(f"{full!r}: expected {want}, found {code}")
        (indices if part == "indices" else values)[name] = arr
    d = SparseDelta(
        indices=indices,
        values=values,
        shapes={k: tuple(v) for k, v in shapes.items()},
        keep_ratio=keep_ratio,
        base_fingerprint=_meta(metadata, "base_fingerprint", "sparse delta"),
        base_kind=_meta(metadata, "base_kind", "sparse delta"),
        merge_provenance=metadata.get("merge_provenance", "none"),
    )
    d.validate()
    return d


def write_sparse_delta(path: PathLike, d: SparseDelta) -> None:
    _write_bytes(path, encode_sparse_delta(d))


def read_sparse_delta(path: PathLike) -> SparseDelta:
    return decode_sparse_delta(_read_bytes(path))


# --- LoRA files -----------------------------------------------------------


def encode_lora(f: LoraFile) -> bytes:
    f.validate()
    parts = LORA_VARIANTS[f.variant]
    entries: List[Entry] = []
    for name, arrays in f.factors.items():
        for part, arr in zip(parts, arrays):
            entries.append((name + SEP + part, "F32", arr))
    metadata = {
        "format_version": FORMAT_VERSION,
        "kind": "lora",
        "variant": f.variant,
        "rank": str(f.rank),
        "base_fingerprint": f.base_fingerprint,
    }
    return _encode(entries, metadata)


def decode_lora(blob: bytes) -> LoraFile:
    tensors, metadata = _decode(blob)
    if metadata.get("kind") != "lora":
        raise MalformedHeader("not a LoRA file")
    variant = _meta(metadata, "variant", "LoRA")
    if variant not in LORA_VARIANTS:
        raise VariantMixing(f"unknown LoRA variant {variant!r}")
    try:
        rank = int(_meta(metadata, "rank", "LoRA"))
    except ValueError:
        raise MalformedHeader("LoRA rank is not an integer") from None
    expected = LORA_VARIANTS[variant]
    every_part = {p for ps in LORA_VARIANTS.values() for p in ps}
    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for full, (code, arr) in tensors.items():
        name, _, part = full.rpartition(SEP)
        if not name or part not in every_part:
            raise MalformedHeader(f"unexpected tensor {full!r} in LoRA file")
        if part not in expected:
            raise VariantMixing(f"{full!r} does not belong to variant {variant!r}")
        if code != "F32":
            raise UnsupportedDtype(f"{full!r}: expected F32, found {code}")
        grouped.setdefault(name, {})[part] = arr
    factors = {}
    for name, got in grouped.items():
        if set(got) != set(expected):
            raise VariantMixing(f"{name!r} has parts {sorted(got)}, variant {variant!r} needs {list(expected)}")
        factors[name] = tuple(got[p] for p in expected)
    f = LoraFile(factors, variant=variant, base_fingerprint=_meta(metadata, "base_fingerprint", "LoRA"), rank=rank)
    f.validate()
    return f


def write_lora(path: PathLike, f: LoraFile) -> None:
    _write_bytes(path, encode_lora(f))


def read_lora(path: PathLike) -> LoraFile:
    return decode_lora(_read_bytes(path))


def read_any(path: PathLike) -> Union[Checkpoint, SparseDelta, LoraFile]:
    """Decode a file of any of the three kinds, dispatching on its metadata."""
    blob = _read_bytes(path)
    _, metadata = _decode(blob)
    kind = metadata.get("kind", "checkpoint")
    if kind == "sparse_delta":
        return decode_sparse_delta(blob)
    if kind == "lora":
        return decode_lora(blob)
    return decode_checkpoint(blob)
