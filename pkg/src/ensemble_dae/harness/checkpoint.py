"""Binary checkpoint container for models, DAEs and adversarial batches.

Layout (all integers little-endian)::

    b"ANSM"                      magic
    u32  version                 currently 1
    u32  metadata length M
    M    UTF-8 JSON metadata     includes "kind": model | dae | adv-batch
    u32  array count A
    A x  u16 name length L, L bytes UTF-8 name,
         u8 dtype tag (1 = float32, 2 = int32), u8 rank R,
         R x u32 dims, prod(dims) * 4 bytes of data

Arrays are stored at 32-bit precision and promoted to float64 / int64 on
load.  Decoding validates every length before slicing and rejects trailing
bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    CheckpointError,
    DimMismatchError,
    MetadataError,
    TrailingDataError,
    TruncatedError,
    VersionError,
)

MAGIC = b"ANSM"
VERSION = 1
KINDS = ("model", "dae", "adv-batch")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_TAGS = {"f": 1, "i": 2, "b": 2, "u": 2}
MAX_RANK = 8


def encode(metadata, arrays):
    """Serialise a metadata dict and a name -> array mapping to bytes."""
    if metadata.get("kind") not in KINDS:
        raise CheckpointError(f"metadata kind must be one of {KINDS}")
    meta = json.dumps(metadata, sort_keys=True, allow_nan=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        tag = _TAGS.get(a.dtype.kind)
        if tag is None:
            raise CheckpointError(f"array {name!r} has unsupported dtype {a.dtype}")
        if a.ndim > MAX_RANK:
            raise CheckpointError(f"array {name!r} has rank {a.ndim} > {MAX_RANK}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data):
    """Inverse of :func:`encode`; returns (metadata, arrays)."""
    r = _Reader(data)
    if len(data) < 4 or bytes(data[:4]) != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    r.take(4, "magic")
    version, meta_len = r.unpack("<II", "header")
    if version == 0 or version > VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (max {VERSION})")
    raw = r.take(meta_len, "metadata")
    try:
        metadata = json.loads(bytes(raw).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MetadataError(f"corrupt metadata: {exc}") from None
    if not isinstance(metadata, dict) or metadata.get("kind") not in KINDS:
        raise MetadataError("metadata must be an object with a known 'kind'")
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "array name length")
        try:
            name = bytes(r.take(name_len, "array name")).decode("utf-8")
        except UnicodeDecodeError:
            raise MetadataError("array name is not UTF-8") from None
        tag, rank = r.unpack("<BB", "array header")
        if tag not in _DTYPES:
            raise DimMismatchError(f"array {name!r}: unknown dtype tag {tag}")
        if rank > MAX_RANK:
            raise DimMismatchError(f"array {name!r}: rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}I", "array dims")
        count_elems = 1
        for d in dims:
            count_elems *= d
        remaining = len(r.data) - r.pos
        nbytes = count_elems * 4
        if nbytes > remaining:
            raise DimMismatchError(f"array {name!r}: dims {dims} need {nbytes} bytes, only {remaining} left")
        if name in arrays:
            raise MetadataError(f"duplicate array name {name!r}")
        raw_arr = r.take(nbytes, f"array {name!r}")
        arr = np.frombuffer(raw_arr, dtype=_DTYPES[tag]).reshape(dims)
        with np.errstate(invalid="ignore"):  # signalling NaN payloads widen quietly
            arrays[name] = arr.astype(np.float64 if tag == 1 else np.int64)
    if r.pos != len(r.data):
        raise TrailingDataError(f"{len(r.data) - r.pos} unexpected trailing bytes")
    return metadata, arrays


# -- typed contents --------------------------------------------------------


def model_to_record(model, kind=None):
    from ..nn.presets import arch_type

    if kind is None:
        kind = "dae" if model.spec.output_shape == model.spec.input_shape else "model"
    meta = {"kind": kind, "spec": model.spec.to_dict(), "seed": model.seed, "arch_type": arch_type(model.spec),
            "info": getattr(model, "meta", {})}
    return meta, model.arrays()


def model_from_record(meta, arrays):
    from ..errors import SpecError
    from ..nn.model import Model
    from ..nn.spec import ModelSpec

    try:
        spec = ModelSpec.from_dict(meta["spec"])
        model = Model.from_arrays(spec, arrays, int(meta.get("seed", 0)))
    except (KeyError, TypeError, ValueError, SpecError) as exc:
        raise MetadataError(f"checkpoint does not describe a valid model: {exc}") from None
    model.meta = dict(meta.get("info") or {})
    return model


def batch_to_record(batch):
    meta = {"kind": "adv-batch", "source": batch.source, "algorithm": batch.algorithm, "config": batch.config,
            "probe_log": batch.probe_log}
    arrays = {"clean": batch.clean, "perturbed": batch.perturbed, "labels": batch.labels,
              "success": batch.success.astype(np.int32), "norms": batch.norms}
    for name in ("flags", "iterations", "const"):
        value = getattr(batch, name)
        if value is not None:
            arrays[name] = value.astype(np.int32) if value.dtype.kind in "biu" else value
    if batch.const is not None:
        # JSON cannot hold NaN; store unsuccessful constants as -1
        arrays["const"] = np.where(np.isnan(batch.const), -1.0, batch.const)
    return meta, arrays


def batch_from_record(meta, arrays):
    from ..attacks import AdversarialBatch

    try:
        const = arrays.get("const")
        if const is not None:
            const = np.where(const < 0, np.nan, const)
        flags = arrays.get("flags")
        return AdversarialBatch(
            clean=arrays["clean"], perturbed=arrays["perturbed"], labels=arrays["labels"],
            source=meta["source"], algorithm=meta["algorithm"], success=arrays["success"].astype(bool),
            norms=arrays["norms"], config=meta.get("config") or {},
            flags=None if flags is None else flags.astype(bool), iterations=arrays.get("iterations"),
            const=const, probe_log=meta.get("probe_log"))
    except (KeyError, ValueError) as exc:
        raise MetadataError(f"checkpoint does not describe an adversarial batch: {exc}") from None


def to_bytes(content):
    from ..attacks import AdversarialBatch

    if isinstance(content, AdversarialBatch):
        return encode(*batch_to_record(content))
    if isinstance(content, tuple):
        return encode(*content)
    return encode(*model_to_record(content))


def from_bytes(data):
    meta, arrays = decode(data)
    if meta["kind"] == "adv-batch":
        return batch_from_record(meta, arrays)
    return model_from_record(meta, arrays)


def save_checkpoint(content, path):
    """Write a Model, AdversarialBatch or (metadata, arrays) pair atomically."""
    data = to_bytes(content)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())
