"""Anonymous user identifiers: SHA-256 over personal info and a scan hash.

Preimage layout (the interoperability contract)::

    ASCII("dd/mm/yyyy") 0x1F ASCII(gender) 0x1F [ASCII(pin) 0x1F] scan_hash[32]

45 bytes without a PIN, 46 + len(pin) with one.
"""

from __future__ import annotations

import datetime as dt
import enum
import hashlib
import math
import re
from dataclasses import dataclass

from .lsh import HASH_BYTES, ScanHash

SEP = b"\x1f"
MIN_YEAR = 1900
MAX_YEAR = 2155
_PIN_RE = re.compile(r"[0-9]{4,12}")
_DOB_RE = re.compile(r"([0-9]{2})/([0-9]{2})/([0-9]{4})")


class IdentityError(ValueError):
    pass


class Gender(str, enum.Enum):
    MALE = "M"
    FEMALE = "F"
    OTHER = "O"

    @classmethod
    def parse(cls, text: str) -> "Gender":
        key = text.strip().lower()
        for g in cls:
            if key in (g.value.lower(), g.name.lower()):
                return g
        raise IdentityError(f"invalid gender {text!r}; expected M, F or O")


@dataclass(frozen=True)
class PersonalInfo:
    dob: dt.date
    gender: Gender
    pin: str | None = None

    def __post_init__(self):
        if not isinstance(self.dob, dt.date):
            raise IdentityError("dob must be a date")
        if not MIN_YEAR <= self.dob.year <= MAX_YEAR:
            raise IdentityError(f"dob year {self.dob.year} outside {MIN_YEAR}-{MAX_YEAR}")
        if not isinstance(self.gender, Gender):
            raise IdentityError(f"invalid gender {self.gender!r}")
        if self.pin is not None and not _PIN_RE.fullmatch(self.pin):
            raise IdentityError("PIN must be 4 to 12 ASCII digits")

    @classmethod
    def parse(cls, dob: str, gender: str, pin: str | None = None) -> "PersonalInfo":
        m = _DOB_RE.fullmatch(dob)
        if not m:
            raise IdentityError(f"dob {dob!r} is not dd/mm/yyyy")
        day, month, year = (int(g) for g in m.groups())
        try:
            date = dt.date(year, month, day)
        except ValueError as exc:
            raise IdentityError(f"invalid date {dob}: {exc}") from None
        return cls(date, Gender.parse(gender), pin)

    @property
    def dob_text(self) -> str:
        return f"{self.dob.day:02d}/{self.dob.month:02d}/{self.dob.year:04d}"


@dataclass(frozen=True)
class UserId:
    value: bytes

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError("UserId is 32 bytes")

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def from_hex(cls, text: str) -> "UserId":
        return cls(bytes.fromhex(text))

    def __str__(self):
        return self.hex()


def canonical_preimage(info: PersonalInfo, scan_hash: ScanHash) -> bytes:
    parts = [info.dob_text.encode("ascii"), SEP, info.gender.value.encode("ascii"), SEP]
    if info.pin is not None:
        parts += [info.pin.encode("ascii"), SEP]
    parts.append(scan_hash.value)
    out = b"".join(parts)
    assert len(out) == 13 + HASH_BYTES + (len(info.pin) + 1 if info.pin else 0)
    return out


def derive_id(info: PersonalInfo, scan_hash: ScanHash) -> UserId:
    return UserId(hashlib.sha256(canonical_preimage(info, scan_hash)).digest())


def count_valid_dates(first_year: int = MIN_YEAR, last_year: int = MAX_YEAR) -> int:
    return (dt.date(last_year, 12, 31) - dt.date(first_year, 1, 1)).days + 1


def estimate_search_space(pin_used: bool, stored_hashes: int, pin_length: int = 4) -> float:
    """log2 of the guesses needed to try every (dob, gender[, pin]) against every stored hash."""
    if stored_hashes < 1:
        raise ValueError("stored_hashes must be at least 1")
    if pin_used and not 4 <= pin_length <= 12:
        raise ValueError("pin_length must be 4-12")
    bits = math.log2(count_valid_dates()) + math.log2(len(Gender)) + math.log2(stored_hashes)
    if pin_used:
        bits += pin_length * math.log2(10)
    return bits
