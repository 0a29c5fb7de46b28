"""Hamming-space retrieval and mean-average-precision evaluation.

Codes are bit-packed: each sample's c logical bits (bit set <=> feature
entry >= 0, i.e. logical +1) live in ceil(c/64) uint64 words, pad bits zero.
Hamming distance is popcount of xor, which equals (c - <+-1, +-1>) / 2.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import HeadTailPartition, build_affinity
from .errors import EvaluationError, FormatError, ShapeError

CODES_MAGIC = b"LCMB"
CODES_FORMAT_VERSION = 1


@dataclass
class BinaryCodeMatrix:
    c: int
    words: np.ndarray   # n x ceil(c/64), uint64

    @property
    def n(self):
        return self.words.shape[0]

    def unpack(self) -> np.ndarray:
        """Logical bits as a +-1 float matrix (n x c)."""
        bytes_ = self.words.astype("<u8").view(np.uint8).reshape(self.n, -1)
        bits = np.unpackbits(bytes_, axis=1, bitorder="little")[:, :self.c]
        return np.where(bits > 0, 1.0, -1.0)


def binarize(V: np.ndarray) -> BinaryCodeMatrix:
    """Pack sign codes of a (c x samples) feature matrix; entry >= 0 -> bit 1."""
    V = np.asarray(V, dtype=np.float64)
    if not np.all(np.isfinite(V)):
        raise ValueError("features must be finite")
    c, n = V.shape
    bits = (V.T >= 0.0).astype(np.uint8)          # n x c
    n_words = (c + 63) // 64
    padded = np.zeros((n, n_words * 64), dtype=np.uint8)
    padded[:, :c] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    words = packed.view("<u8").reshape(n, n_words)
    return BinaryCodeMatrix(c=c, words=np.ascontiguousarray(words))


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Differing-bit count between two packed code rows."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"code widths differ: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_matrix(queries: BinaryCodeMatrix, db: BinaryCodeMatrix) -> np.ndarray:
    """All-pairs Hamming distances (n_query x n_db)."""
    if queries.c != db.c:
        raise ShapeError(f"code lengths differ: {queries.c} vs {db.c}")
    xored = queries.words[:, None, :] ^ db.words[None, :, :]
    return np.bitwise_count(xored).sum(axis=2).astype(np.int64)


def rank_by_hamming(query_row: np.ndarray, db: BinaryCodeMatrix) -> np.ndarray:
    """Database indices by ascending distance, ties by ascending index."""
    dists = np.bitwise_count(query_row[None, :] ^ db.words).sum(axis=1)
    return np.argsort(dists, kind="stable")


def average_precision(relevance: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance list; 0 when nothing is relevant."""
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[ranks - 1] / ranks).sum() / total)


@dataclass
class RetrievalResult:
    direction: str
    code_bits: int
    rankings: np.ndarray       # n_query x n_db
    ap: np.ndarray             # per-query AP
    map_all: float
    map_head: float
    map_tail: float
    num_queries: int
    num_head_queries: int
    num_tail_queries: int

    def rows(self):
        """Table rows: (direction, group, code_bits, map, num_queries)."""
        return [
            (self.direction, "all", self.code_bits, self.map_all,
             self.num_queries),
            (self.direction, "head", self.code_bits, self.map_head,
             self.num_head_queries),
            (self.direction, "tail", self.code_bits, self.map_tail,
             self.num_tail_queries),
        ]


def query_groups(query_labels: np.ndarray, partition: HeadTailPartition):
    """A query is in the tail group if any of its labels is a tail class."""
    labels = np.asarray(query_labels) > 0
    is_tail = (labels & ~partition.is_head[None, :]).any(axis=1)
    return ~is_tail, is_tail


def evaluate(query_codes: BinaryCodeMatrix, query_labels: np.ndarray,
             db_codes: BinaryCodeMatrix, db_labels: np.ndarray,
             partition: HeadTailPartition, direction: str) -> RetrievalResult:
    """Rank the database for every query and compute MAP with head/tail
    breakdown. Relevance = sharing at least one label."""
    if query_codes.n == 0:
        raise EvaluationError("empty query set")
    if query_labels.shape[1] != db_labels.shape[1]:
        raise ShapeError(
            f"label widths differ: {query_labels.shape} vs {db_labels.shape}"
        )
    relevant = build_affinity(query_labels, db_labels).astype(bool)
    dists = hamming_matrix(query_codes, db_codes)
    rankings = np.argsort(dists, axis=1, kind="stable")
    ap = np.array([
        average_precision(relevant[i, rankings[i]])
        for i in range(query_codes.n)
    ])
    head_mask, tail_mask = query_groups(query_labels, partition)
    return RetrievalResult(
        direction=direction,
        code_bits=query_codes.c,
        rankings=rankings,
        ap=ap,
        map_all=float(ap.mean()),
        map_head=float(ap[head_mask].mean()) if head_mask.any() else 0.0,
        map_tail=float(ap[tail_mask].mean()) if tail_mask.any() else 0.0,
        num_queries=query_codes.n,
        num_head_queries=int(head_mask.sum()),
        num_tail_queries=int(tail_mask.sum()),
    )


def write_result_csv(path, results):
    """Table-shaped CSV: one row per (direction, group)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["direction", "group", "code_bits", "map", "num_queries"])
        for r in results:
            for row in r.rows():
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", row[4]])


# --- code file I/O ------------------------------------------------------------

def save_codes(path, codes: BinaryCodeMatrix):
    with open(path, "wb") as f:
        f.write(CODES_MAGIC)
        f.write(struct.pack("<I", CODES_FORMAT_VERSION))
        f.write(struct.pack("<QQ", codes.n, codes.c))
        f.write(codes.words.astype("<u8").tobytes())


def load_codes(path) -> BinaryCodeMatrix:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CODES_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0")
    if len(data) < 24:
        raise FormatError(f"truncated header at offset {len(data)}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CODES_FORMAT_VERSION:
        raise FormatError(f"unsupported codes version {version} at offset 4")
    n, c = struct.unpack("<QQ", data[8:24])
    n_words = (c + 63) // 64
    need = 24 + 8 * n * n_words
    if len(data) < need:
        raise FormatError(f"truncated code rows at offset {len(data)}")
    words = np.frombuffer(data[24:need], dtype="<u8").reshape(n, n_words).copy()
    return BinaryCodeMatrix(c=int(c), words=words)
