"""Random-hyperplane Simhash over masked binary templates, plus exact Hamming search.

Hyperplanes are never shipped between nodes. Each sign is expanded from
SHA-256 of a public seed, so any node holding the seed derives the same matrix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator

import numpy as np

from .templates import DEFAULT_N, FeatureVector, MaskVector, TemplateError, validate_pair

HASH_BYTES = 32
DEFAULT_K = 256
DEFAULT_THRESHOLD = 0.4
DEFAULT_SEED = hashlib.sha256(b"covichain/lsh/hyperplanes/v1").digest()

# float32 accumulates integer dot products exactly below 2**24
_MAX_EXACT_N = 2**24


@dataclass(frozen=True)
class LshParams:
    k: int = DEFAULT_K
    n: int = DEFAULT_N
    seed: bytes = DEFAULT_SEED
    tie_bit: int = 1

    def __post_init__(self):
        if self.k not in (64, 128, 256):
            raise ValueError(f"k must be 64, 128 or 256, got {self.k}")
        if self.n < self.k:
            raise ValueError(f"n={self.n} must be at least k={self.k}")
        if self.n >= _MAX_EXACT_N:
            raise ValueError("n too large for exact projection")
        if len(self.seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        if self.tie_bit != 1:
            raise ValueError("tie_bit is fixed to 1")


@dataclass(frozen=True, order=True)
class ScanHash:
    """k-bit Simhash digest, stored MSB-first in 32 zero-padded bytes."""

    value: bytes
    k: int = DEFAULT_K

    def __post_init__(self):
        if len(self.value) != HASH_BYTES:
            raise ValueError(f"ScanHash must be {HASH_BYTES} bytes, got {len(self.value)}")
        if self.k not in (64, 128, 256):
            raise ValueError(f"unsupported k={self.k}")
        if self.k < 256 and any(self.value[self.k // 8:]):
            raise ValueError("bits beyond k must be zero")

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str, k: int = DEFAULT_K) -> "ScanHash":
        if len(text) != 2 * HASH_BYTES:
            raise ValueError("ScanHash hex form is 64 characters")
        return cls(bytes.fromhex(text), k)

    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self.value, dtype=np.uint8))[: self.k]

    def complement(self) -> "ScanHash":
        bits = 1 - self.bits()
        return ScanHash(_pad(np.packbits(bits).tobytes()), self.k)

    def __str__(self):
        return self.hex()


def _pad(raw: bytes) -> bytes:
    return raw + bytes(HASH_BYTES - len(raw))


@lru_cache(maxsize=8)
def _hyperplanes(params: LshParams) -> np.ndarray:
    chunks = -(-params.n // 256)
    rows = np.empty((params.k, chunks * 256), dtype=np.int8)
    for i in range(params.k):
        stream = b"".join(
            hashlib.sha256(params.seed + i.to_bytes(4, "big") + j.to_bytes(4, "big")).digest()
            for j in range(chunks)
        )
        bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8))
        rows[i] = 2 * bits.astype(np.int8) - 1
    out = np.ascontiguousarray(rows[:, : params.n])
    out.setflags(write=False)
    return out


def derive_hyperplanes(params: LshParams) -> np.ndarray:
    """Return the (k, n) matrix of +/-1 signs for ``params``.

    Row ``i`` is the MSB-first bit stream of
    ``SHA-256(seed || be32(i) || be32(j))`` for ``j = 0, 1, ...``, truncated to
    ``n`` bits, with bit 0 mapped to -1 and bit 1 to +1.
    """
    return _hyperplanes(params)


@lru_cache(maxsize=8)
def _hyperplanes_f32(params: LshParams) -> np.ndarray:
    return np.ascontiguousarray(_hyperplanes(params).T.astype(np.float32))


def simhash_batch(templates: np.ndarray, masks: np.ndarray, params: LshParams) -> np.ndarray:
    """Hash many templates at once. Returns a (rows, 32) uint8 array."""
    templates = np.atleast_2d(templates)
    masks = np.atleast_2d(masks)
    if templates.shape != masks.shape or templates.shape[1] != params.n:
        raise TemplateError(
            f"expected templates and masks of width {params.n}, "
            f"got {templates.shape} and {masks.shape}"
        )
    if (masks.sum(axis=1) == 0).any():
        raise TemplateError("mask occludes every bit")
    values = (2 * templates.astype(np.float32) - 1) * masks.astype(np.float32)
    projections = values @ _hyperplanes_f32(params)
    bits = (projections >= 0).astype(np.uint8)  # zero projection -> tie_bit (1)
    packed = np.packbits(bits, axis=1)
    out = np.zeros((len(packed), HASH_BYTES), dtype=np.uint8)
    out[:, : packed.shape[1]] = packed
    return out


def simhash(fv: FeatureVector, mask: MaskVector, params: LshParams) -> ScanHash:
    validate_pair(fv, mask)
    if fv.n != params.n:
        raise TemplateError(f"template has {fv.n} bits, params expect n={params.n}")
    row = simhash_batch(fv.bits[None, :], mask.bits[None, :], params)[0]
    return ScanHash(row.tobytes(), params.k)


def hash_distance(a: ScanHash, b: ScanHash, k: int | None = None) -> float:
    """Fraction of the k hash bits that differ (exact: k is a power of two)."""
    k = a.k if k is None else k
    if a.k != k or b.k != k:
        raise ValueError(f"hash widths differ: {a.k}, {b.k}, expected {k}")
    diff = int.from_bytes(a.value, "big") ^ int.from_bytes(b.value, "big")
    return bin(diff).count("1") / k


# -- search -----------------------------------------------------------------


class PackedHashes:
    """Stored scan hashes as an (m, 4) array of big-endian 64-bit words.

    Lexicographic order over the word rows equals byte-lexicographic order
    over the hashes.
    """

    def __init__(self, words: np.ndarray, k: int = DEFAULT_K):
        self.words = np.asarray(words, dtype=np.uint64).reshape(-1, 4)
        self.k = k

    @classmethod
    def from_bytes(cls, raw: bytes, k: int = DEFAULT_K) -> "PackedHashes":
        words = np.frombuffer(raw, dtype=">u8").astype(np.uint64).reshape(-1, 4)
        return cls(words, k)

    @classmethod
    def from_hashes(cls, hashes: Iterable[ScanHash], k: int | None = None) -> "PackedHashes":
        hashes = list(hashes)
        if k is None:
            k = hashes[0].k if hashes else DEFAULT_K
        for h in hashes:
            if h.k != k:
                raise ValueError(f"mixed hash widths in store: {h.k} != {k}")
        return cls.from_bytes(b"".join(h.value for h in hashes), k)

    def __len__(self):
        return len(self.words)

    def hash_at(self, i: int) -> ScanHash:
        return ScanHash(self.words[i].astype(">u8").tobytes(), self.k)

    def distances(self, query: ScanHash) -> np.ndarray:
        """Differing-bit counts between ``query`` and every stored hash."""
        q = np.frombuffer(query.value, dtype=">u8").astype(np.uint64)
        return np.bitwise_count(self.words ^ q).sum(axis=1, dtype=np.int64)


@dataclass(frozen=True)
class MatchSet:
    """Candidates sorted by (distance, hash bytes)."""

    entries: tuple[tuple[ScanHash, float], ...] = ()

    def __iter__(self) -> Iterator[tuple[ScanHash, float]]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def hashes(self) -> list[ScanHash]:
        return [h for h, _ in self.entries]


def max_differing_bits(threshold: float | Fraction, k: int) -> int:
    """Largest differing-bit count whose distance is within ``threshold``.

    Decimal thresholds are taken at their printed value, so 0.4 means 2/5
    rather than the nearest binary double.
    """
    t = threshold if isinstance(threshold, Fraction) else Fraction(str(threshold))
    if not 0 < t <= Fraction(1, 2):
        raise ValueError(f"threshold must lie in (0, 0.5], got {threshold}")
    return int(t * k)  # floor; t*k is non-negative


def find_candidates(
    query: ScanHash,
    store: PackedHashes | Iterable[ScanHash],
    threshold: float | Fraction = DEFAULT_THRESHOLD,
) -> MatchSet:
    """Exhaustive scan: every stored hash within ``threshold`` of ``query``."""
    if not isinstance(store, PackedHashes):
        store = PackedHashes.from_hashes(store, query.k)
    limit = max_differing_bits(threshold, query.k)
    if len(store) == 0:
        return MatchSet()
    if store.k != query.k:
        raise ValueError(f"query k={query.k} does not match store k={store.k}")
    counts = store.distances(query)
    hit = np.flatnonzero(counts <= limit)
    if hit.size == 0:
        return MatchSet()
    w = store.words[hit]
    order = np.lexsort((w[:, 3], w[:, 2], w[:, 1], w[:, 0], counts[hit]))
    k = query.k
    return MatchSet(
        tuple((store.hash_at(int(hit[i])), int(counts[hit[i]]) / k) for i in order)
    )
