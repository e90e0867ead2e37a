"""Single-file named-tensor container with a SHA-256 over the payloads.

Layout (all integers little-endian)::

    magic        8 bytes   b"ADFMCKPT"
    version      u32       1
    meta_len     u32       length of the metadata blob
    metadata     meta_len  UTF-8 JSON, sorted keys, compact separators
    count        u32       number of entries
    per entry:   u16 name_len, name (UTF-8), u8 ndim, ndim x u64 dims
    payloads     f64[]     entries concatenated in table order
    digest       32 bytes  sha256(payloads)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"ADFMCKPT"
VERSION = 1
SUBSETS = ("all", "backbone", "adapters", "head")


class CheckpointError(Exception):
    """Malformed, corrupted, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION
    digest: str = ""


def encode(tensors: Mapping[str, np.ndarray | Tensor], metadata: dict | None = None) -> tuple[bytes, str]:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    head = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    payload = []
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(arr.tobytes(order="C"))
    body = b"".join(payload)
    digest = hashlib.sha256(body)
    return b"".join(head) + body + digest.digest(), digest.hexdigest()


def encoded_size(shapes: Mapping[str, tuple[int, ...]], metadata: dict | None = None) -> int:
    """File size in bytes for entries of the given shapes, without building payloads."""
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    size = 8 + 8 + len(meta) + 4 + 32
    for name, shape in shapes.items():
        size += 2 + len(name.encode()) + 1 + 8 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))
    return size


def decode(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        metadata = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
            pos += 1 + 8 * ndim
            table.append((name, shape))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed header: {exc}") from exc
    body, stored = buf[pos:-32], buf[-32:]
    digest = hashlib.sha256(body)
    if digest.digest() != stored:
        raise CheckpointError("content hash mismatch: payload corrupted")
    tensors: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in table:
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(body):
            raise CheckpointError(f"payload too short for {name!r}")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(body):
        raise CheckpointError("trailing bytes after payloads")
    return Checkpoint(tensors, metadata, version, digest.hexdigest())


def save(tensors: Mapping[str, np.ndarray | Tensor], path, metadata: dict | None = None) -> str:
    """Write atomically (temp file + rename); returns the hex content hash."""
    path = Path(path)
    blob, digest = encode(tensors, metadata)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    return digest


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode(buf)


# ---------------------------------------------------------------- model views

def subset_of(name: str) -> str:
    if name.startswith(("head.", "head_norm.")):
        return "head"
    if name.startswith(("adapters.", "prompts.")):
        return "adapters"
    return "backbone"


def _subsets(subset) -> tuple[str, ...]:
    subsets = (subset,) if isinstance(subset, str) else tuple(subset)
    for s in subsets:
        if s not in SUBSETS:
            raise ValueError(f"subset must be one of {SUBSETS}, got {s!r}")
    return subsets


def _in_subset(name: str, subset) -> bool:
    subsets = _subsets(subset)
    return "all" in subsets or subset_of(name) in subsets


def model_state(model, subset="all") -> dict[str, np.ndarray]:
    """Parameters followed by buffers, filtered to ``subset`` (a name or a tuple of names)."""
    _subsets(subset)
    state = {n: t.data for n, t in model.params.items() if _in_subset(n, subset)}
    state.update({n: b for n, b in model.buffers.items() if _in_subset(n, subset)})
    return state


def save_model(model, path, subset="all", metadata: dict | None = None) -> str:
    meta = {"subsets": list(_subsets(subset)), "vit": model.config.to_dict()}
    if model.adapter_config is not None:
        meta["adapter"] = vars(model.adapter_config).copy()
    if model.prompt_config is not None:
        meta["prompt"] = vars(model.prompt_config).copy()
    meta.update(metadata or {})
    return save(model_state(model, subset), path, meta)


def load_into(model, path, subset="all") -> Checkpoint:
    """Overwrite exactly ``subset`` of the model from ``path``.

    Every name in the subset must exist on both sides with equal shapes;
    nothing is written unless the whole subset validates.
    """
    ckpt = load(path)
    have = model_state(model, subset)
    given = {n: a for n, a in ckpt.tensors.items() if _in_subset(n, subset)}
    missing_in_model = sorted(set(given) - set(have))
    missing_in_ckpt = sorted(set(have) - set(given))
    problems = []
    if missing_in_model:
        problems.append(f"names absent from model: {', '.join(missing_in_model)}")
    if missing_in_ckpt:
        problems.append(f"names absent from checkpoint: {', '.join(missing_in_ckpt)}")
    for name in sorted(set(have) & set(given)):
        if have[name].shape != given[name].shape:
            problems.append(f"shape mismatch for {name}: model {have[name].shape}, "
                            f"checkpoint {given[name].shape}")
    if problems:
        raise CheckpointError(f"cannot load subset {subset!r} from {path}: " + "; ".join(problems))
    for name, arr in given.items():
        if name in model.params:
            model.params[name].data = arr.copy()
        else:
            model.buffers[name] = arr.copy()
    return ckpt
