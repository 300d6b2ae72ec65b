"""Named-tensor archive shared by generator, training and extractor weights.

Byte layout (all integers little-endian):

    magic       8 bytes   b"ARBINPT\\x01"
    header_len  u64
    header      header_len bytes of UTF-8 JSON:
                  {"version", "kind", "fingerprint", "seed", "meta",
                   "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
                offsets are relative to the first payload byte
    payload     raw C-order tensor bytes, in table order
    digest      32 bytes  SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from arbinpaint.errors import CorruptCheckpointError, IncompatibleCheckpointError
from utils.log_util import logger

MAGIC = b"ARBINPT\x01"
VERSION = 1
DIGEST_SIZE = 32
_LEN = struct.Struct("<Q")


class TensorEntry(BaseModel):
    name: str
    dtype: str
    shape: list[int]
    offset: int = Field(ge=0)
    nbytes: int = Field(ge=0)

    model_config = ConfigDict(extra="forbid")


class ArchiveHeader(BaseModel):
    version: int = VERSION
    kind: str
    fingerprint: str
    seed: int
    meta: dict[str, Any] = Field(default_factory=dict)
    tensors: list[TensorEntry] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")


class Archive(BaseModel):
    header: ArchiveHeader
    tensors: dict[str, torch.Tensor]

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def meta(self) -> dict[str, Any]:
        return self.header.meta

    def require(self, kind: str, fingerprint: str | None = None) -> Archive:
        if self.header.kind != kind:
            raise IncompatibleCheckpointError(f"expected a {kind!r} archive, got {self.header.kind!r}")
        if fingerprint is not None and self.header.fingerprint != fingerprint:
            raise IncompatibleCheckpointError(
                f"config fingerprint {self.header.fingerprint[:12]} does not match current config {fingerprint[:12]}"
            )
        return self


def config_fingerprint(cfg: BaseModel) -> str:
    return hashlib.sha256(cfg.model_dump_json().encode()).hexdigest()


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).removeprefix("torch.")


def encode_archive(
    tensors: dict[str, torch.Tensor], kind: str, fingerprint: str, seed: int, meta: dict[str, Any] | None = None
) -> bytes:
    entries: list[TensorEntry] = []
    chunks: list[bytes] = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append(TensorEntry(name=name, dtype=_dtype_name(t), shape=list(arr.shape), offset=offset, nbytes=len(data)))
        chunks.append(data)
        offset += len(data)

    header = ArchiveHeader(kind=kind, fingerprint=fingerprint, seed=seed, meta=meta or {}, tensors=entries)
    header_bytes = header.model_dump_json().encode("utf-8")
    body = MAGIC + _LEN.pack(len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_archive(raw: bytes, source: str = "<bytes>") -> Archive:
    prefix = len(MAGIC) + _LEN.size
    if len(raw) < prefix + DIGEST_SIZE:
        raise CorruptCheckpointError(f"{source} is truncated ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{source} is not a checkpoint archive")
    body, digest = raw[:-DIGEST_SIZE], raw[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{source} failed its checksum; the file is truncated or modified")

    (header_len,) = _LEN.unpack_from(body, len(MAGIC))
    try:
        header = ArchiveHeader.model_validate_json(body[prefix : prefix + header_len])
    except PydanticValidationError as e:
        raise CorruptCheckpointError(f"{source} has an unreadable header: {e}") from e
    if header.version != VERSION:
        raise IncompatibleCheckpointError(f"{source} has archive version {header.version}, expected {VERSION}")

    payload = memoryview(body)[prefix + header_len :]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header.tensors:
        if entry.offset + entry.nbytes > len(payload):
            raise CorruptCheckpointError(f"{source}: tensor {entry.name} runs past the payload")
        dtype = np.dtype(entry.dtype).newbyteorder("<")
        arr = np.frombuffer(payload[entry.offset : entry.offset + entry.nbytes], dtype=dtype)
        tensors[entry.name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(entry.shape))
    return Archive(header=header, tensors=tensors)


def save_archive(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    kind: str,
    fingerprint: str,
    seed: int,
    meta: dict[str, Any] | None = None,
) -> Path:
    """Writes to a sibling temp file first, then renames over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_archive(tensors, kind, fingerprint, seed, meta))
    tmp.replace(path)
    logger.debug(f"Saved {kind} archive with {len(tensors)} tensors to {path}")
    return path


def load_archive(path: str | Path) -> Archive:
    path = Path(path)
    return decode_archive(path.read_bytes(), str(path))
