"""Versioned binary container for model parameters and run state.

Layout: magic `OGCKPT01`, little-endian u32 header length, UTF-8 JSON
header (version, kind, config, tensor names/shapes, optimizer flag, rng
state, metadata), raw little-endian f64 tensor payloads in header order,
optional optimizer payloads, and a SHA-256 trailer over everything before
it.  Tensors are widened to f64 on save regardless of training precision
so evaluation reproduces across precisions.  Writes are atomic
(temp-file-then-rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .errors import FormatError, IntegrityError, TruncationError, VersionError

__all__ = ["ModelCheckpoint", "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = b"OGCKPT01"
FORMAT_VERSION = 1
KINDS = ("snapshot", "iterative", "baseline", "teacher", "probe", "binary-probe")


@dataclass
class ModelCheckpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, dict] | None = None  # name -> {m, v, step}
    rng_state: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown checkpoint kind {self.kind!r}")

    @classmethod
    def from_params(cls, kind: str, config: dict, params: list[Parameter],
                    with_optimizer: bool = False, rng_state=None, metadata=None):
        tensors = {p.name: p.data for p in params}
        optimizer = None
        if with_optimizer:
            optimizer = {p.name: {"m": p.m, "v": p.v, "step": p.step} for p in params}
        return cls(kind=kind, config=config, tensors=tensors, optimizer=optimizer,
                   rng_state=rng_state or [], metadata=metadata or {})

    def load_into(self, params: list[Parameter]) -> None:
        """Copy stored tensors (and optimizer state) into live parameters."""
        for p in params:
            if p.name not in self.tensors:
                raise KeyError(f"checkpoint missing tensor {p.name!r}")
            stored = self.tensors[p.name]
            if stored.shape != p.data.shape:
                raise ValueError(
                    f"tensor {p.name!r}: stored {stored.shape} vs live {p.data.shape}"
                )
            p.data[...] = stored.astype(p.data.dtype)
            if self.optimizer and p.name in self.optimizer:
                state = self.optimizer[p.name]
                p.m[...] = state["m"].astype(p.m.dtype)
                p.v[...] = state["v"].astype(p.v.dtype)
                p.step = int(state["step"])


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    names = list(ckpt.tensors)
    header = {
        "version": ckpt.version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "tensors": [[n, list(ckpt.tensors[n].shape)] for n in names],
        "has_optimizer": ckpt.optimizer is not None,
        "optimizer_steps": (
            {n: int(ckpt.optimizer[n]["step"]) for n in names} if ckpt.optimizer else None
        ),
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", len(head))
    buf += head
    for n in names:
        buf += np.asarray(ckpt.tensors[n], dtype="<f8").tobytes()
    if ckpt.optimizer is not None:
        for n in names:
            buf += np.asarray(ckpt.optimizer[n]["m"], dtype="<f8").tobytes()
            buf += np.asarray(ckpt.optimizer[n]["v"], dtype="<f8").tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CKPT_MAGIC) + 4 + 32:
        raise TruncationError(f"checkpoint too short: {len(blob)} bytes")
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:8]!r}")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"checkpoint hash mismatch for {path}")
    (head_len,) = struct.unpack("<I", blob[8:12])
    head_end = 12 + head_len
    if head_end > len(payload):
        raise TruncationError("checkpoint header extends past payload")
    header = json.loads(blob[12:head_end].decode())
    if header["version"] > FORMAT_VERSION:
        raise VersionError(
            f"checkpoint version {header['version']} newer than supported {FORMAT_VERSION}"
        )
    offset = head_end
    tensors = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * size
        if end > len(payload):
            raise TruncationError(f"tensor {name!r} extends past payload")
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        offset = end
    optimizer = None
    if header["has_optimizer"]:
        optimizer = {}
        for name, shape in header["tensors"]:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            m = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            v = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            optimizer[name] = {
                "m": m.reshape(shape).copy(),
                "v": v.reshape(shape).copy(),
                "step": header["optimizer_steps"][name],
            }
    if offset != len(payload):
        raise TruncationError(
            f"checkpoint has {len(payload) - offset} unexpected trailing payload bytes"
        )
    return ModelCheckpoint(
        kind=header["kind"], config=header["config"], tensors=tensors,
        optimizer=optimizer, rng_state=header["rng_state"],
        metadata=header["metadata"], version=header["version"],
    )
