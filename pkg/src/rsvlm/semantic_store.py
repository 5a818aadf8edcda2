"""Semantic knowledge database: textual scene descriptions with unit-norm
embeddings, exact top-k cosine retrieval, and a fixed binary file format.

Retrieval is an exact flat scan (no approximate index). Embeddings are
L2-normalized at ingest and stored as float32, so cosine similarity against a
normalized query reduces to a dot product. Ties are broken by ascending id.

File format (all little-endian)::

    magic "RSDB" | version u16 | dim u32 | count u64 |
    per record: id u64 | text byte-length u32 | UTF-8 bytes | dim * float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError

MAGIC = b"RSDB"
FORMAT_VERSION = 1


@dataclass
class SemanticRecord:
    id: int
    text: str
    embedding: np.ndarray  # float32, unit L2 norm


@dataclass
class RetrievalResult:
    id: int
    score: float


class SemanticDatabase:
    def __init__(self, dim: int):
        if dim <= 0:
            raise ShapeError(f"database dim must be positive, got {dim}")
        self.dim = int(dim)
        self.records: list[SemanticRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def get(self, record_id: int) -> SemanticRecord:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)

    def ingest(self, text: str, embedding) -> int:
        """Normalize and append one description; returns the new record id."""
        if not text:
            raise DomainError("ingest: empty text")
        emb = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if emb.shape[0] != self.dim:
            raise ShapeError(f"ingest: embedding length {emb.shape[0]} != db dim {self.dim}")
        norm = float(np.linalg.norm(emb))
        if norm == 0.0:
            raise DomainError("ingest: zero embedding vector")
        unit = (emb / norm).astype(np.float32)
        new_id = self.records[-1].id + 1 if self.records else 0
        self.records.append(SemanticRecord(new_id, text, unit))
        return new_id

    def retrieve_top_k(self, query, k: int) -> list[RetrievalResult]:
        """Exact top-k by cosine similarity, sorted by score desc then id asc."""
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ShapeError(f"retrieve: query length {q.shape[0]} != db dim {self.dim}")
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise DomainError("retrieve: zero query vector")
        if k < 0:
            raise DomainError(f"retrieve: k must be >= 0, got {k}")
        if not self.records or k == 0:
            return []
        # Score each record with an individual float64 dot product so the
        # exact values are reproducible by any independent scorer (a fused
        # matrix-vector product may round differently in the last ulp).
        unit = q / qn
        scores = np.array([
            np.clip(rec.embedding.astype(np.float64) @ unit, -1.0, 1.0)
            for rec in self.records
        ])
        ids = np.array([rec.id for rec in self.records], dtype=np.int64)
        order = np.lexsort((ids, -scores))[: min(k, len(self.records))]
        return [RetrievalResult(int(ids[i]), float(scores[i])) for i in order]

    def save(self, path) -> None:
        blob = bytearray()
        blob += MAGIC
        blob += struct.pack("<H", FORMAT_VERSION)
        blob += struct.pack("<I", self.dim)
        blob += struct.pack("<Q", len(self.records))
        for rec in self.records:
            text_bytes = rec.text.encode("utf-8")
            blob += struct.pack("<Q", rec.id)
            blob += struct.pack("<I", len(text_bytes))
            blob += text_bytes
            blob += rec.embedding.astype("<f4").tobytes()
        Path(path).write_bytes(bytes(blob))

    @staticmethod
    def load(path) -> "SemanticDatabase":
        data = Path(path).read_bytes()
        reader = _Reader(data)
        magic = reader.take(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        version = reader.u16("version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version} at byte 4")
        dim = reader.u32("dim")
        if dim <= 0:
            raise FormatError(f"non-positive dim {dim} at byte 6")
        count = reader.u64("count")
        db = SemanticDatabase(dim)
        prev_id = -1
        for i in range(count):
            rec_id = reader.u64(f"record {i} id")
            if rec_id <= prev_id:
                raise FormatError(f"record ids not strictly increasing at byte {reader.offset - 8}")
            prev_id = rec_id
            text_len = reader.u32(f"record {i} text length")
            text = reader.take(text_len, f"record {i} text").decode("utf-8")
            emb_bytes = reader.take(4 * dim, f"record {i} embedding")
            emb = np.frombuffer(emb_bytes, dtype="<f4").copy()
            db.records.append(SemanticRecord(rec_id, text, emb))
        if reader.offset != len(data):
            raise FormatError(f"trailing {len(data) - reader.offset} bytes at byte {reader.offset}")
        return db


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated payload reading {what} at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def iter_jsonl(path):
    """Yield (line_number, object) pairs; malformed lines raise FormatError."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {lineno}: invalid JSON ({e.msg})") from e


def ingest_jsonl(db: SemanticDatabase, path) -> int:
    """Ingest records from a JSONL file of {"text": str, "embedding": [..]}."""
    added = 0
    for lineno, obj in iter_jsonl(path):
        if "text" not in obj or "embedding" not in obj:
            raise FormatError(f"line {lineno}: need 'text' and 'embedding' fields")
        db.ingest(obj["text"], obj["embedding"])
        added += 1
    return added
