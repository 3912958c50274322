"""Binary store for per-token embeddings (the ``MVIX`` container).

On-disk layout, little-endian throughout::

    header:  magic "MVIX" | version u32 | dim u32 | doc_count u64 | flags u32
    per doc: id_len u16 | id bytes (UTF-8) | m u32 | token_ids m*u32
             | salience m*f32 (iff flags bit 0) | vectors m*dim*f32 row-major

flags bit 0 marks the presence of per-token salience scores. Query files use
the same container: a query is a "document" whose id is the query id.

Serialization is deterministic — writing the same records twice yields
byte-identical files — and readers return array views into one contiguous
buffer, so per-document slice access is O(1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CorruptionError,
    DimensionError,
    DuplicateIdError,
    FormatError,
    NormalizationError,
)

MAGIC = b"MVIX"
FORMAT_VERSION = 1
NORM_TOL = 1e-5

_HEADER = struct.Struct("<4sIIQI")
_FLAG_SALIENCE = 0x1


@dataclass
class TokenEmbeddings:
    """Token-level representation of one query or document.

    vectors:   (m, dim) float32, every row unit-L2-normalized
    token_ids: (m,) uint32 vocabulary ids; 0 when unknown
    salience:  optional (m,) float32, non-negative
    """

    vectors: np.ndarray
    token_ids: np.ndarray
    salience: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.token_ids = np.asarray(self.token_ids, dtype=np.uint32)
        if self.salience is not None:
            self.salience = np.asarray(self.salience, dtype=np.float32)

    @property
    def num_tokens(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def validate(self) -> None:
        """Check shape and normalization invariants, raising on violation."""
        if self.vectors.ndim != 2 or self.num_tokens < 1:
            raise DimensionError(
                f"expected a non-empty (m, dim) vector matrix, got shape {self.vectors.shape}"
            )
        if self.token_ids.shape != (self.num_tokens,):
            raise DimensionError(
                f"token_ids length {self.token_ids.shape} does not match m={self.num_tokens}"
            )
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0)
        if off.max() > NORM_TOL:
            i = int(off.argmax())
            raise NormalizationError(
                f"token {i} has L2 norm {norms[i]:.6f}, outside 1±{NORM_TOL}"
            )
        if self.salience is not None:
            if self.salience.shape != (self.num_tokens,):
                raise DimensionError(
                    f"salience length {self.salience.shape} does not match m={self.num_tokens}"
                )
            if np.any(self.salience < 0):
                raise ValueError("salience entries must be non-negative")


@dataclass
class DocumentRecord:
    """A document (or query) id paired with its token embeddings."""

    doc_id: str
    embeddings: TokenEmbeddings


@dataclass
class StoreHeader:
    magic: bytes
    format_version: int
    dim: int
    doc_count: int
    has_salience: bool


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Return a float32 copy of x with unit-L2 rows."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return (x / np.maximum(norms, np.finfo(np.float32).tiny)).astype(np.float32)


def write_store(records: Sequence[DocumentRecord], path) -> None:
    """Serialize records to `path` in the MVIX layout.

    All records must share one dimension, have unique ids, and carry
    unit-normalized rows; salience must be present on all records or none.
    """
    records = list(records)
    has_salience = bool(records) and all(r.embeddings.salience is not None for r in records)
    if records and not has_salience and any(r.embeddings.salience is not None for r in records):
        raise ValueError("either all records or none may carry salience")

    dim = records[0].embeddings.dim if records else 0
    seen = set()
    for rec in records:
        if rec.doc_id in seen:
            raise DuplicateIdError(f"duplicate doc_id {rec.doc_id!r}")
        if not rec.doc_id:
            raise DuplicateIdError("empty doc_id")
        seen.add(rec.doc_id)
        if rec.embeddings.dim != dim:
            raise DimensionError(
                f"record {rec.doc_id!r} has dim {rec.embeddings.dim}, store has dim {dim}"
            )
        rec.embeddings.validate()

    flags = _FLAG_SALIENCE if has_salience else 0
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(records), flags)]
    for rec in records:
        emb = rec.embeddings
        id_bytes = rec.doc_id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise ValueError(f"doc_id too long: {rec.doc_id[:32]!r}...")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack("<I", emb.num_tokens))
        parts.append(np.ascontiguousarray(emb.token_ids, dtype="<u4").tobytes())
        if has_salience:
            parts.append(np.ascontiguousarray(emb.salience, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_header(path) -> StoreHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a store header")
    magic, version, dim, doc_count, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return StoreHeader(magic, version, dim, doc_count, bool(flags & _FLAG_SALIENCE))


def read_store(path) -> list[DocumentRecord]:
    """Parse an MVIX file into records backed by views on one buffer."""
    header = read_header(path)
    buf = Path(path).read_bytes()
    dim = header.dim
    pos = _HEADER.size
    records: list[DocumentRecord] = []

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise CorruptionError(f"{path}: truncated while reading {what}")

    for i in range(header.doc_count):
        need(2, f"record {i} id length")
        (id_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(id_len, f"record {i} id")
        try:
            doc_id = buf[pos : pos + id_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptionError(f"{path}: record {i} id is not valid UTF-8") from e
        pos += id_len
        need(4, f"record {i} token count")
        (m,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if m < 1:
            raise CorruptionError(f"{path}: record {doc_id!r} has zero tokens")

        need(4 * m, f"record {doc_id!r} token ids")
        token_ids = np.frombuffer(buf, dtype="<u4", count=m, offset=pos)
        pos += 4 * m
        salience = None
        if header.has_salience:
            need(4 * m, f"record {doc_id!r} salience")
            salience = np.frombuffer(buf, dtype="<f4", count=m, offset=pos)
            pos += 4 * m
        need(4 * m * dim, f"record {doc_id!r} vectors")
        vectors = np.frombuffer(buf, dtype="<f4", count=m * dim, offset=pos).reshape(m, dim)
        pos += 4 * m * dim
        records.append(DocumentRecord(doc_id, TokenEmbeddings(vectors, token_ids, salience)))

    if pos != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - pos} trailing bytes after last record")
    return records
