"""Token-level maximum inner-product index over a document store.

Every kept token becomes one entry (doc_ordinal, token_ordinal, vector).
The flat kind scans all entries exactly; the IVF kind partitions entries into
k-means cells and scans only the nprobe nearest cells. Entries are stored
grouped by document in ascending (doc, token) order, which doubles as the
deterministic tie-break for equal scores.

Sidecar persistence (``MVIK``, little-endian)::

    magic "MVIK" | version u32 | kind u8 (0 flat, 1 ivf) | dim u32
    | nlist u32 | entry_count u64 | doc_count u64
    | doc_ordinals u32*T | token_ordinals u32*T | vectors f32*T*dim
    | centroids f32*nlist*dim | assignments u32*T        (IVF only)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError
from .salience import SalienceHead, prune_select, raw_salience
from .store import DocumentRecord

INDEX_MAGIC = b"MVIK"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIBIIQQ")
_KIND_CODES = {"flat": 0, "ivf": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

KMEANS_ITERS = 20


@dataclass
class TokenIndex:
    kind: str
    dim: int
    doc_ordinals: np.ndarray  # (T,) uint32, ascending
    token_ordinals: np.ndarray  # (T,) uint32, ascending within each doc
    vectors: np.ndarray  # (T, dim) float32
    doc_offsets: np.ndarray  # (doc_count + 1,) entry ranges per doc ordinal
    nlist: int = 0
    centroids: Optional[np.ndarray] = None  # (nlist, dim) float32
    assignments: Optional[np.ndarray] = None  # (T,) uint32 cell per entry
    postings: Optional[list[np.ndarray]] = field(default=None, repr=False)

    @property
    def entry_count(self) -> int:
        return int(self.doc_ordinals.size)

    @property
    def doc_count(self) -> int:
        return int(self.doc_offsets.size - 1)

    def kept_tokens(self, doc_ordinal: int) -> np.ndarray:
        """Token ordinals indexed for one document, ascending."""
        lo, hi = self.doc_offsets[doc_ordinal], self.doc_offsets[doc_ordinal + 1]
        return self.token_ordinals[lo:hi]

    def build_postings(self) -> None:
        if self.kind != "ivf" or self.postings is not None:
            return
        order = np.argsort(self.assignments, kind="stable")
        bounds = np.searchsorted(self.assignments[order], np.arange(self.nlist + 1))
        self.postings = [order[bounds[c] : bounds[c + 1]] for c in range(self.nlist)]


def _kmeans(vectors: np.ndarray, nlist: int, seed: int, iters: int = KMEANS_ITERS):
    """Seeded full-batch Lloyd's: assign to nearest centroid, then re-average.

    Empty cells are reseeded to random data points so every cell stays live.
    """
    rng = np.random.default_rng(seed)
    n = vectors.shape[0]
    centroids = vectors[rng.choice(n, size=nlist, replace=False)].astype(np.float32).copy()
    for _ in range(iters):
        # for unit rows, nearest-by-L2 == argmax(x·c - |c|²/2)
        scores = vectors @ centroids.T - 0.5 * (centroids**2).sum(axis=1)
        assignments = scores.argmax(axis=1)
        for c in range(nlist):
            members = assignments == c
            if members.any():
                centroids[c] = vectors[members].mean(axis=0)
            else:
                centroids[c] = vectors[int(rng.integers(n))]
    # final pass so posting lists match the centroids searches will probe
    scores = vectors @ centroids.T - 0.5 * (centroids**2).sum(axis=1)
    assignments = scores.argmax(axis=1).astype(np.uint32)
    return centroids, assignments


def build_index(
    records: Sequence[DocumentRecord],
    head: Optional[SalienceHead] = None,
    beta_d: float = 1.0,
    kind: str = "flat",
    nlist: int = 0,
    seed: int = 0,
) -> TokenIndex:
    """Index the ceil(beta_d·m) most salient tokens of every document.

    With beta_d=1 every token is indexed and no salience source is needed.
    Below 1, each record's stored salience is used when present; otherwise
    `head` scores its tokens.
    """
    if not 0.0 < beta_d <= 1.0:
        raise ConfigError("beta_d must lie in (0, 1]")
    if kind not in _KIND_CODES:
        raise ConfigError(f"unknown index kind {kind!r}")
    records = list(records)
    dim = records[0].embeddings.dim if records else 0

    doc_ords: list[np.ndarray] = []
    tok_ords: list[np.ndarray] = []
    chunks: list[np.ndarray] = []
    offsets = np.zeros(len(records) + 1, dtype=np.int64)
    for ordinal, rec in enumerate(records):
        emb = rec.embeddings
        if beta_d < 1.0:
            sal = emb.salience
            if sal is None:
                if head is None:
                    raise ConfigError(
                        "beta_d < 1 needs a document salience head "
                        "(or per-token salience in the store)"
                    )
                sal = raw_salience(emb, head)
            kept = prune_select(sal, beta_d)
        else:
            kept = np.arange(emb.num_tokens)
        doc_ords.append(np.full(kept.size, ordinal, dtype=np.uint32))
        tok_ords.append(kept.astype(np.uint32))
        chunks.append(emb.vectors[kept])
        offsets[ordinal + 1] = offsets[ordinal] + kept.size

    vectors = (
        np.concatenate(chunks).astype(np.float32)
        if chunks
        else np.zeros((0, dim), dtype=np.float32)
    )
    index = TokenIndex(
        kind=kind,
        dim=dim,
        doc_ordinals=np.concatenate(doc_ords) if doc_ords else np.zeros(0, dtype=np.uint32),
        token_ordinals=np.concatenate(tok_ords) if tok_ords else np.zeros(0, dtype=np.uint32),
        vectors=vectors,
        doc_offsets=offsets,
    )
    if kind == "ivf":
        if nlist < 1:
            raise ConfigError("ivf needs nlist >= 1")
        if nlist > index.entry_count:
            raise ConfigError(f"nlist={nlist} exceeds entry count {index.entry_count}")
        index.nlist = nlist
        index.centroids, index.assignments = _kmeans(vectors, nlist, seed)
        index.build_postings()
    return index


def search_tokens(
    index: TokenIndex,
    query_vector: np.ndarray,
    k_neighbors: int,
    nprobe: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top inner-product entries for one query token.

    Returns parallel arrays (doc_ordinals, token_ordinals, scores), sorted by
    descending score with ties broken by ascending (doc, token).
    """
    q = np.asarray(query_vector, dtype=np.float32).ravel()
    if k_neighbors < 1 or index.entry_count == 0:
        empty = np.zeros(0, dtype=np.uint32)
        return empty, empty, np.zeros(0, dtype=np.float32)
    if q.size != index.dim:
        raise ConfigError(f"query dim {q.size} does not match index dim {index.dim}")

    if index.kind == "flat":
        candidates = None
        scores = index.vectors @ q
    else:
        index.build_postings()
        nprobe = min(max(nprobe, 1), index.nlist)
        dist = ((index.centroids - q) ** 2).sum(axis=1)
        cells = np.argsort(dist, kind="stable")[:nprobe]
        lists = [index.postings[c] for c in cells]
        candidates = np.sort(np.concatenate(lists)) if lists else np.zeros(0, dtype=np.int64)
        scores = index.vectors[candidates] @ q

    order = np.argsort(-scores, kind="stable")[:k_neighbors]
    if candidates is not None:
        picked = candidates[order]
    else:
        picked = order
    return index.doc_ordinals[picked], index.token_ordinals[picked], scores[order]


def write_index(index: TokenIndex, path) -> None:
    parts = [
        _INDEX_HEADER.pack(
            INDEX_MAGIC,
            INDEX_VERSION,
            _KIND_CODES[index.kind],
            index.dim,
            index.nlist,
            index.entry_count,
            index.doc_count,
        ),
        np.ascontiguousarray(index.doc_ordinals, dtype="<u4").tobytes(),
        np.ascontiguousarray(index.token_ordinals, dtype="<u4").tobytes(),
        np.ascontiguousarray(index.vectors, dtype="<f4").tobytes(),
    ]
    if index.kind == "ivf":
        parts.append(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(index.assignments, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_index(path) -> TokenIndex:
    buf = Path(path).read_bytes()
    if len(buf) < _INDEX_HEADER.size:
        raise FormatError(f"{path}: file too short for an index header")
    magic, version, kind_code, dim, nlist, entry_count, doc_count = _INDEX_HEADER.unpack_from(
        buf, 0
    )
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    if kind_code not in _KIND_NAMES:
        raise CorruptionError(f"{path}: unknown index kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]

    pos = _INDEX_HEADER.size
    expected = entry_count * (4 + 4 + 4 * dim)
    if kind == "ivf":
        expected += nlist * 4 * dim + entry_count * 4
    if len(buf) - pos != expected:
        raise CorruptionError(
            f"{path}: payload is {len(buf) - pos} bytes, expected {expected}"
        )

    doc_ordinals = np.frombuffer(buf, dtype="<u4", count=entry_count, offset=pos)
    pos += 4 * entry_count
    token_ordinals = np.frombuffer(buf, dtype="<u4", count=entry_count, offset=pos)
    pos += 4 * entry_count
    vectors = np.frombuffer(buf, dtype="<f4", count=entry_count * dim, offset=pos).reshape(
        entry_count, dim
    )
    pos += 4 * entry_count * dim
    centroids = assignments = None
    if kind == "ivf":
        centroids = np.frombuffer(buf, dtype="<f4", count=nlist * dim, offset=pos).reshape(
            nlist, dim
        )
        pos += 4 * nlist * dim
        assignments = np.frombuffer(buf, dtype="<u4", count=entry_count, offset=pos)

    # entries are doc-grouped ascending, so offsets rebuild by binary search
    offsets = np.searchsorted(doc_ordinals, np.arange(doc_count + 1))
    index = TokenIndex(
        kind=kind,
        dim=dim,
        doc_ordinals=doc_ordinals,
        token_ordinals=token_ordinals,
        vectors=vectors,
        doc_offsets=offsets,
        nlist=nlist,
        centroids=centroids,
        assignments=assignments,
    )
    if kind == "ivf":
        index.build_postings()
    return index
