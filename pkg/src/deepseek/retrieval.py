"""Exact top-k retrieval over the shared embedding space.

Two index modes implement the two retrieval strategies:

* ``embedding_space`` - one vector per image (the projected image
  feature); a query is matched directly against images.
* ``caption_based`` - one vector per caption (text-side pipeline); an
  image is scored by its best caption and that caption is reported.

Scores are squared L2 distances: the ranking is identical to plain L2 and
the squaring is documented in the API so callers don't double-convert.
Ties are broken by ascending image id, and within an image's captions by
caption position, so a rebuilt index always serializes to identical bytes.

Index file layout (DSKI, little-endian):

    magic    4 bytes  b"DSKI"
    version  u32      1
    mode     u8       1 = caption_based, 2 = embedding_space
    d        u32
    count    u64      number of images
    record   count times: id (u16 len + bytes), uri flag u8 then
             (u16 len + bytes) when set, caption count u16, captions
             (u16 len + bytes each), embedding d f64
    caption vectors (caption_based only): count u64, then per vector
             owner u64, caption position u16, d f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .embedding import JointEmbeddingModel
from .errors import DataError, FormatError, IntegrityError, ShapeError
from .features import HashedTextFeaturizer

MAGIC = b"DSKI"
VERSION = 1

MODE_CAPTION = "caption_based"
MODE_EMBEDDING = "embedding_space"
_MODE_BYTE = {MODE_CAPTION: 1, MODE_EMBEDDING: 2}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


@dataclass
class SourceRecord:
    """Raw per-image input to index building."""

    image_id: str
    captions: list[str] = field(default_factory=list)
    image_feature: np.ndarray | None = None
    uri: str | None = None
    caption_features: list[np.ndarray] | None = None  # overrides the featurizer


@dataclass
class IndexRecord:
    image_id: str
    embedding: np.ndarray  # (d,)
    captions: list[str] = field(default_factory=list)
    uri: str | None = None


@dataclass
class RankedHit:
    image_id: str
    distance: float  # squared L2
    best_caption: str | None = None


@dataclass
class SearchResult:
    ranked: list[RankedHit]
    diagnostics: tuple[str, ...] = ()


class VectorIndex:
    """Immutable-after-build collection of embedded records."""

    def __init__(self, mode: str, d: int, records: list[IndexRecord],
                 caption_vectors: np.ndarray | None = None,
                 caption_owner: np.ndarray | None = None,
                 caption_pos: np.ndarray | None = None):
        if mode not in _MODE_BYTE:
            raise DataError(f"unknown index mode '{mode}'")
        self.mode = mode
        self.d = d
        self.records = records
        seen = set()
        for rec in records:
            if rec.image_id in seen:
                raise IntegrityError(f"duplicate image id '{rec.image_id}'")
            seen.add(rec.image_id)
            if rec.embedding.shape != (d,):
                raise ShapeError(
                    f"record '{rec.image_id}' embedding has shape "
                    f"{rec.embedding.shape}, index dim is {d}"
                )
        self._by_id = {rec.image_id: rec for rec in records}
        self._ids = np.array([rec.image_id for rec in records])
        self._matrix = (
            np.vstack([rec.embedding for rec in records])
            if records else np.zeros((0, d))
        )
        if mode == MODE_CAPTION:
            if caption_vectors is None:
                caption_vectors = np.zeros((0, d))
                caption_owner = np.zeros(0, dtype=np.int64)
                caption_pos = np.zeros(0, dtype=np.int64)
            self.caption_vectors = caption_vectors
            self.caption_owner = caption_owner
            self.caption_pos = caption_pos
        else:
            self.caption_vectors = None
            self.caption_owner = None
            self.caption_pos = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def vector_count(self) -> int:
        if self.mode == MODE_CAPTION:
            return self.caption_vectors.shape[0]
        return len(self.records)

    def record(self, image_id: str) -> IndexRecord | None:
        return self._by_id.get(image_id)


def build_index(mode: str, sources, model: JointEmbeddingModel,
                featurizer: HashedTextFeaturizer | None = None) -> VectorIndex:
    """Embed raw records into an index.

    embedding_space mode projects each image feature through the image
    side; caption_based mode projects every caption (its precomputed
    feature when given, otherwise the featurizer output) through the text
    side. In caption mode the per-image embedding slot is not used for
    scoring and is stored as zeros.
    """
    if mode not in _MODE_BYTE:
        raise DataError(f"unknown index mode '{mode}'")
    d = model.d
    records: list[IndexRecord] = []
    cap_vecs: list[np.ndarray] = []
    cap_owner: list[int] = []
    cap_pos: list[int] = []

    for owner, src in enumerate(sources):
        captions = list(src.captions)
        if mode == MODE_EMBEDDING:
            if src.image_feature is None:
                raise DataError(
                    f"record '{src.image_id}' lacks an image feature "
                    f"(required in embedding_space mode)"
                )
            embedding = model.embed_image(np.asarray(src.image_feature, dtype=np.float64))
        else:
            if not captions:
                raise DataError(
                    f"record '{src.image_id}' has no captions and could never "
                    f"be retrieved in caption_based mode"
                )
            embedding = np.zeros(d)
            for pos, caption in enumerate(captions):
                if src.caption_features is not None:
                    feat = np.asarray(src.caption_features[pos], dtype=np.float64)
                elif featurizer is not None:
                    feat = featurizer.featurize(caption)
                else:
                    raise DataError(
                        "caption_based mode needs caption features or a featurizer"
                    )
                cap_vecs.append(model.embed_text(feat))
                cap_owner.append(owner)
                cap_pos.append(pos)
        records.append(IndexRecord(
            image_id=str(src.image_id),
            embedding=embedding,
            captions=captions,
            uri=src.uri,
        ))

    return VectorIndex(
        mode=mode,
        d=d,
        records=records,
        caption_vectors=np.vstack(cap_vecs) if cap_vecs else np.zeros((0, d)),
        caption_owner=np.asarray(cap_owner, dtype=np.int64),
        caption_pos=np.asarray(cap_pos, dtype=np.int64),
    )


def search(index: VectorIndex, query_embedding: np.ndarray, k: int) -> SearchResult:
    """Exact scan returning min(k, image_count) hits, squared-L2 distances
    non-decreasing, ties broken by ascending image id."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (index.d,):
        raise ShapeError(
            f"query embedding has shape {q.shape}, index dim is {index.d}"
        )
    n = len(index)
    if n == 0:
        return SearchResult(ranked=[])

    if index.mode == MODE_EMBEDDING:
        dists = kernels.sq_l2_scan(index._matrix, q)
        best_caption = [None] * n
    else:
        cap_dists = kernels.sq_l2_scan(index.caption_vectors, q)
        dists = np.full(n, np.inf)
        best_pos = np.full(n, -1, dtype=np.int64)
        for vec_idx in range(cap_dists.shape[0]):
            owner = index.caption_owner[vec_idx]
            dist = cap_dists[vec_idx]
            if dist < dists[owner]:
                dists[owner] = dist
                best_pos[owner] = index.caption_pos[vec_idx]
        best_caption = [
            index.records[i].captions[best_pos[i]] if best_pos[i] >= 0 else None
            for i in range(n)
        ]
        # images with no captions never match
        keep = best_pos >= 0
        if not np.all(keep):
            dists = np.where(keep, dists, np.inf)

    order = np.lexsort((index._ids, dists))
    hits: list[RankedHit] = []
    for i in order[: min(k, n)]:
        if not np.isfinite(dists[i]):
            continue
        hits.append(RankedHit(
            image_id=str(index._ids[i]),
            distance=float(dists[i]),
            best_caption=best_caption[i],
        ))
    return SearchResult(ranked=hits)


def query_text(index: VectorIndex, model: JointEmbeddingModel,
               featurizer: HashedTextFeaturizer, text: str, k: int) -> SearchResult:
    """Featurize -> project through the text side -> search.

    Empty (after trimming) text searches from the zero feature, which
    embeds to the text bias, and flags 'empty_query' in diagnostics.
    """
    diagnostics: tuple[str, ...] = ()
    if text.strip():
        feature = featurizer.featurize(text)
    else:
        feature = np.zeros(featurizer.dim)
        diagnostics = ("empty_query",)
    if featurizer.dim != model.text_dim:
        raise ShapeError(
            f"featurizer dim {featurizer.dim} != model text dim {model.text_dim}"
        )
    result = search(index, model.embed_text(feature), k)
    return SearchResult(ranked=result.ranked, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# DSKI persistence
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    encoded = s.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise IntegrityError(f"string too long to encode: '{s[:32]}...'")
    return struct.pack("<H", len(encoded)) + encoded


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise IntegrityError(f"index file truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def save_index(index: VectorIndex, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<B", _MODE_BYTE[index.mode])
    buf += struct.pack("<IQ", index.d, len(index.records))
    for rec in index.records:
        buf += _pack_str(rec.image_id)
        if rec.uri is None:
            buf += b"\x00"
        else:
            buf += b"\x01" + _pack_str(rec.uri)
        buf += struct.pack("<H", len(rec.captions))
        for caption in rec.captions:
            buf += _pack_str(caption)
        buf += np.ascontiguousarray(rec.embedding, dtype="<f8").tobytes()
    if index.mode == MODE_CAPTION:
        m = index.caption_vectors.shape[0]
        buf += struct.pack("<Q", m)
        for i in range(m):
            buf += struct.pack("<QH", int(index.caption_owner[i]), int(index.caption_pos[i]))
            buf += np.ascontiguousarray(index.caption_vectors[i], dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_index(path) -> VectorIndex:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IntegrityError(f"index file truncated: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    rd = _Reader(data)
    rd.offset = 4
    version = rd.u32()
    if version != VERSION:
        raise FormatError(f"unsupported index version {version}")
    mode_byte = rd.u8()
    if mode_byte not in _BYTE_MODE:
        raise FormatError(f"unknown index mode byte {mode_byte}")
    mode = _BYTE_MODE[mode_byte]
    d = rd.u32()
    count = rd.u64()

    records: list[IndexRecord] = []
    for _ in range(count):
        image_id = rd.string()
        uri = rd.string() if rd.u8() else None
        ncap = rd.u16()
        captions = [rd.string() for _ in range(ncap)]
        embedding = rd.f64s(d)
        records.append(IndexRecord(image_id, embedding, captions, uri))

    caption_vectors = caption_owner = caption_pos = None
    if mode == MODE_CAPTION:
        m = rd.u64()
        vecs = np.zeros((m, d))
        owners = np.zeros(m, dtype=np.int64)
        positions = np.zeros(m, dtype=np.int64)
        for i in range(m):
            owners[i] = rd.u64()
            positions[i] = rd.u16()
            vecs[i] = rd.f64s(d)
            if owners[i] >= count:
                raise IntegrityError(
                    f"caption vector {i} references image {owners[i]} of {count}"
                )
            if positions[i] >= len(records[owners[i]].captions):
                raise IntegrityError(
                    f"caption vector {i} references caption {positions[i]} "
                    f"of record '{records[owners[i]].image_id}'"
                )
        caption_vectors, caption_owner, caption_pos = vecs, owners, positions

    if rd.offset != len(data):
        raise IntegrityError(
            f"index file has {len(data) - rd.offset} trailing bytes at byte {rd.offset}"
        )
    return VectorIndex(mode, d, records, caption_vectors, caption_owner, caption_pos)
