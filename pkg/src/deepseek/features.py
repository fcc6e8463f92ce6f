"""Feature-vector sources: file ingestion and the hashed text featurizer.

Image and caption features normally arrive precomputed (the upstream
extractors are outside this package); the hashed featurizer exists so
captions and queries can be embedded without any external model, and both
paths hand downstream code the same thing: a float64 vector.

DSKF binary layout (all integers little-endian):

    magic   4 bytes  b"DSKF"
    version u32      1
    dim     u32
    count   u64
    record  count times: id_len u16, id UTF-8 bytes, dim f32 values

Vectors are stored f32 and widened to f64 on read. A JSON-lines flavour is
also supported for interchange: one object per line, ``{"id": str,
"v": [numbers]}``; the first line fixes the dimension.
"""

from __future__ import annotations

import json
import string
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IntegrityError

MAGIC = b"DSKF"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_NGRAM_SEP = b"\x1f"


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens with ASCII punctuation trimmed.

    Splits on Unicode whitespace; tokens that are pure punctuation vanish.
    The captioner's vocabulary uses the same rules, so query text and
    caption text always agree byte-for-byte.
    """
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            tokens.append(tok)
    return tokens


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class HashedTextFeaturizer:
    """Deterministic bag-of-n-grams vectorizer with the hashing trick.

    Token n-grams (n = 1..ngram_max, joined with a 0x1F separator byte) are
    FNV-1a-64 hashed; the hash mod dim picks the bucket and bit 63 of the
    hash picks the sign (set bit contributes -1). The result is
    L2-normalized unless it is the zero vector.
    """

    dim: int
    ngram_max: int = 2

    def __post_init__(self):
        if self.dim < 1:
            raise DataError(f"featurizer dim must be >= 1, got {self.dim}")
        if self.ngram_max < 1:
            raise DataError(f"ngram_max must be >= 1, got {self.ngram_max}")

    def featurize(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        tokens = tokenize(text)
        for n in range(1, self.ngram_max + 1):
            for start in range(len(tokens) - n + 1):
                gram = _NGRAM_SEP.join(
                    t.encode("utf-8") for t in tokens[start:start + n]
                )
                h = fnv1a64(gram)
                sign = -1.0 if (h >> 63) & 1 else 1.0
                vec[h % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


def featurize_text(featurizer: HashedTextFeaturizer, text: str) -> np.ndarray:
    return featurizer.featurize(text)


# ---------------------------------------------------------------------------
# DSKF binary feature files
# ---------------------------------------------------------------------------

def write_feature_file(path, records, dim: int | None = None) -> None:
    """Write (id, vector) records in DSKF layout.

    dim is only needed when records is empty; otherwise it is taken from
    the first record. Rejects duplicate ids and mixed dims before any
    bytes hit the disk.
    """
    records = [(str(rid), np.asarray(vec, dtype=np.float64)) for rid, vec in records]
    if records:
        inferred = records[0][1].shape[0]
        if dim is not None and dim != inferred:
            raise IntegrityError(f"dim argument {dim} != first record dim {inferred}")
        dim = inferred
    elif dim is None:
        raise DataError("dim is required when writing an empty feature file")

    seen = set()
    for rid, vec in records:
        if rid in seen:
            raise IntegrityError(f"duplicate feature id '{rid}'")
        seen.add(rid)
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise IntegrityError(
                f"record '{rid}' has dim {vec.shape}, file dim is {dim}"
            )

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIQ", VERSION, dim, len(records))
    for rid, vec in records:
        encoded = rid.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise IntegrityError(f"id too long to encode: '{rid[:32]}...'")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += vec.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_feature_file(path) -> list[tuple[str, np.ndarray]]:
    """Read a DSKF file; returns records in file order, vectors as f64."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise IntegrityError(f"feature file truncated: {len(data)} bytes, header needs 20")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported feature file version {version}")

    records: list[tuple[str, np.ndarray]] = []
    seen = set()
    offset = 20
    for _ in range(count):
        if offset + 2 > len(data):
            raise IntegrityError(f"feature file truncated at byte {offset}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + id_len + 4 * dim
        if end > len(data):
            raise IntegrityError(f"feature file truncated at byte {offset}")
        rid = data[offset:offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data[offset:offset + 4 * dim], dtype="<f4").astype(np.float64)
        offset += 4 * dim
        if rid in seen:
            raise IntegrityError(f"duplicate feature id '{rid}'")
        seen.add(rid)
        records.append((rid, vec))
    if offset != len(data):
        raise IntegrityError(
            f"feature file has {len(data) - offset} trailing bytes at byte {offset}"
        )
    return records


# ---------------------------------------------------------------------------
# JSON-lines interchange
# ---------------------------------------------------------------------------

def write_jsonl_features(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, vec in records:
            fh.write(json.dumps({"id": str(rid), "v": list(map(float, vec))}) + "\n")


def read_jsonl_features(path) -> list[tuple[str, np.ndarray]]:
    """Read {"id", "v"} JSON lines; dim fixed by the first line."""
    records: list[tuple[str, np.ndarray]] = []
    seen = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj or "v" not in obj:
                raise FormatError(f"line {lineno}: missing 'id' or 'v'")
            vec = np.asarray(obj["v"], dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise IntegrityError(
                    f"line {lineno}: dim {vec.shape[0]} != file dim {dim}"
                )
            rid = str(obj["id"])
            if rid in seen:
                raise IntegrityError(f"line {lineno}: duplicate id '{rid}'")
            seen.add(rid)
            records.append((rid, vec))
    return records


# ---------------------------------------------------------------------------
# Caption datasets: {"id": str, "captions": [str, ...]} JSON lines
# ---------------------------------------------------------------------------

def read_caption_file(path) -> list[tuple[str, list[str]]]:
    records: list[tuple[str, list[str]]] = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj or "captions" not in obj:
                raise FormatError(f"line {lineno}: missing 'id' or 'captions'")
            rid = str(obj["id"])
            captions = obj["captions"]
            if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
                raise FormatError(f"line {lineno}: 'captions' must be a list of strings")
            if rid in seen:
                raise IntegrityError(f"line {lineno}: duplicate id '{rid}'")
            seen.add(rid)
            records.append((rid, captions))
    return records


def write_caption_file(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, captions in records:
            fh.write(json.dumps({"id": str(rid), "captions": list(captions)}) + "\n")
