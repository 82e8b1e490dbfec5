"""Binary iris templates: file formats and a synthetic population generator.

Iris extraction itself (segmentation, normalisation, Log-Gabor encoding) is not
done here. Templates arrive pre-extracted as a bit vector plus an occlusion
mask, either from a file or from :func:`generate_population`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

DEFAULT_N = 9600  # 20 x 480 template geometry

TEXT_MAGIC = "COVICHAIN-TPL v1"
BINARY_MAGIC = b"COVICHAIN-TPLB\x00\x01"  # 16 bytes: tag, NUL, format version
BINARY_HEADER_SIZE = len(BINARY_MAGIC) + 4

assert len(BINARY_MAGIC) == 16


class TemplateError(ValueError):
    """Invalid template contents."""


class TemplateParseError(TemplateError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise TemplateError(f"bit vector must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise TemplateError("bit vector contains values other than 0 and 1")
    out = arr.astype(np.uint8, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class BitVector:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", _as_bits(self.bits))

    @property
    def n(self) -> int:
        return int(self.bits.size)

    def popcount(self) -> int:
        return int(self.bits.sum())

    def packed(self) -> bytes:
        """MSB-first packing, zero-padded to a whole byte."""
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_packed(cls, data: bytes, n: int):
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:n]
        return cls(bits)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((type(self).__name__, self.n, self.packed()))

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, hex={self.packed().hex()[:16]}...)"


class FeatureVector(BitVector):
    """Extracted iris code, one bit per filter response sign."""


class MaskVector(BitVector):
    """Per-bit validity: 1 = usable iris bit, 0 = occluded."""


def validate_pair(fv: FeatureVector, mask: MaskVector) -> None:
    if fv.n == 0:
        raise TemplateError("template length must be positive")
    if fv.n != mask.n:
        raise TemplateError(f"template has {fv.n} bits but mask has {mask.n}")
    if mask.popcount() == 0:
        raise TemplateError("mask occludes every bit")


# -- file formats -----------------------------------------------------------


def _parse_bit_line(line: bytes, n: int, offset: int, what: str) -> np.ndarray:
    if len(line) != n:
        raise TemplateParseError(
            f"{what} line has {len(line)} symbols, expected n={n}", offset
        )
    arr = np.frombuffer(line, dtype=np.uint8)
    bad = np.flatnonzero((arr != ord("0")) & (arr != ord("1")))
    if bad.size:
        pos = int(bad[0])
        raise TemplateParseError(
            f"non-binary symbol {line[pos:pos + 1]!r} in {what} line", offset + pos
        )
    return arr - ord("0")


def _parse_text(data: bytes) -> tuple[FeatureVector, MaskVector]:
    if not data.endswith(b"\n"):
        raise TemplateParseError("file is not newline-terminated", len(data))
    lines = data[:-1].split(b"\n")
    if len(lines) != 4:
        raise TemplateParseError(f"expected 4 lines, found {len(lines)}", 0)
    offsets = [0]
    for line in lines[:-1]:
        offsets.append(offsets[-1] + len(line) + 1)

    if lines[0] != TEXT_MAGIC.encode():
        raise TemplateParseError("malformed header: bad magic line", 0)
    header = lines[1]
    if not header.startswith(b"n=") or not header[2:].isdigit():
        raise TemplateParseError("malformed header: expected n=<decimal>", offsets[1])
    n = int(header[2:])
    if n <= 0:
        raise TemplateParseError("malformed header: n must be positive", offsets[1] + 2)

    bits = _parse_bit_line(lines[2], n, offsets[2], "template")
    mask = _parse_bit_line(lines[3], n, offsets[3], "mask")
    return FeatureVector(bits), MaskVector(mask)


def _parse_binary(data: bytes) -> tuple[FeatureVector, MaskVector]:
    if len(data) < BINARY_HEADER_SIZE:
        raise TemplateParseError("truncated binary header", len(data))
    n = int.from_bytes(data[16:20], "big")
    if n <= 0:
        raise TemplateParseError("malformed header: n must be positive", 16)
    width = (n + 7) // 8
    expected = BINARY_HEADER_SIZE + 2 * width
    if len(data) != expected:
        raise TemplateParseError(
            f"payload length mismatch: file is {len(data)} bytes, expected {expected}",
            min(len(data), expected),
        )
    # Padding bits past n must be zero, otherwise the file is not canonical.
    pad = 8 * width - n
    for start in (BINARY_HEADER_SIZE, BINARY_HEADER_SIZE + width):
        last = data[start + width - 1]
        if pad and last & ((1 << pad) - 1):
            raise TemplateParseError("non-zero padding bits", start + width - 1)
    fv = FeatureVector.from_packed(data[BINARY_HEADER_SIZE:BINARY_HEADER_SIZE + width], n)
    mask = MaskVector.from_packed(data[BINARY_HEADER_SIZE + width:], n)
    return fv, mask


def parse_template(path: str | os.PathLike) -> tuple[FeatureVector, MaskVector]:
    """Read a template file in either the text or the packed binary format.

    Raises :class:`TemplateParseError` (with a byte offset) on malformed input.
    """
    data = Path(path).read_bytes()
    if data.startswith(BINARY_MAGIC):
        fv, mask = _parse_binary(data)
    else:
        fv, mask = _parse_text(data)
    if mask.popcount() == 0:
        raise TemplateError("mask occludes every bit")
    return fv, mask


def encode_template(fv: FeatureVector, mask: MaskVector, binary: bool = False) -> bytes:
    validate_pair(fv, mask)
    if binary:
        return BINARY_MAGIC + fv.n.to_bytes(4, "big") + fv.packed() + mask.packed()
    header = f"{TEXT_MAGIC}\nn={fv.n}\n".encode("ascii")
    return b"".join([header, (fv.bits + ord("0")).tobytes(), b"\n",
                     (mask.bits + ord("0")).tobytes(), b"\n"])


def write_template(
    fv: FeatureVector, mask: MaskVector, path: str | os.PathLike, binary: bool = False
) -> None:
    Path(path).write_bytes(encode_template(fv, mask, binary=binary))


# -- synthetic populations --------------------------------------------------


@dataclass(frozen=True)
class PopulationSpec:
    num_subjects: int = 500
    scans_per_subject: int = 4
    intra_flip_rate: float = 0.15
    mask_occlusion_rate: float = 0.1
    seed: int = 0
    n: int = DEFAULT_N

    def __post_init__(self):
        if self.num_subjects < 1:
            raise ValueError("num_subjects must be positive")
        if self.scans_per_subject < 1:
            raise ValueError("scans_per_subject must be at least 1")
        if not 0 <= self.intra_flip_rate <= 0.5:
            raise ValueError("intra_flip_rate must lie in [0, 0.5]")
        if not 0 <= self.mask_occlusion_rate < 0.5:
            raise ValueError("mask_occlusion_rate must lie in [0, 0.5)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.n < 1:
            raise ValueError("n must be positive")


@dataclass(frozen=True)
class PopulationArrays:
    """Dense form of a population: row r is scan ``scans[r]`` of ``subjects[r]``."""

    subjects: np.ndarray
    scans: np.ndarray
    templates: np.ndarray  # (rows, n) uint8
    masks: np.ndarray      # (rows, n) uint8

    def __len__(self):
        return len(self.subjects)

    def rows(self) -> Iterator[tuple[int, int, FeatureVector, MaskVector]]:
        for r in range(len(self)):
            yield (
                int(self.subjects[r]),
                int(self.scans[r]),
                FeatureVector(self.templates[r]),
                MaskVector(self.masks[r]),
            )


def generate_population_arrays(spec: PopulationSpec) -> PopulationArrays:
    # intra_flip_rate = 0.5 is accepted here only as the degenerate-noise control.
    count = spec.num_subjects * spec.scans_per_subject
    templates = np.empty((count, spec.n), dtype=np.uint8)
    masks = np.empty((count, spec.n), dtype=np.uint8)
    row = 0
    for subject in range(spec.num_subjects):
        # one stream per subject: scan c of subject s does not depend on population size
        rng = np.random.default_rng([spec.seed, subject])
        base = rng.integers(0, 2, spec.n, dtype=np.uint8)
        for _ in range(spec.scans_per_subject):
            flips = rng.random(spec.n) < spec.intra_flip_rate
            templates[row] = base ^ flips
            mask = rng.random(spec.n) >= spec.mask_occlusion_rate
            if not mask.any():
                mask[rng.integers(spec.n)] = True
            masks[row] = mask
            row += 1
    subjects = np.repeat(np.arange(spec.num_subjects), spec.scans_per_subject)
    scans = np.tile(np.arange(spec.scans_per_subject), spec.num_subjects)
    return PopulationArrays(subjects, scans, templates, masks)


def generate_population(
    spec: PopulationSpec,
) -> list[tuple[int, int, FeatureVector, MaskVector]]:
    """Deterministic synthetic population.

    Every subject gets a uniformly random latent template; each scan of that
    subject is the latent template with every bit flipped independently with
    probability ``intra_flip_rate``, paired with an independently drawn mask.
    """
    return list(generate_population_arrays(spec).rows())
