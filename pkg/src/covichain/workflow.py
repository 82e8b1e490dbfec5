"""Enrollment and lookup at a vaccination centre.

A presentation hashes the iris template, finds stored scan hashes within the
threshold, and re-derives a candidate ID from each one (nearest first). The
first candidate ID that owns records identifies the user. Identity is always
anchored to the hash already on chain, never the fresh one, so a user's ID
stays stable across re-scans.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Protocol, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import lsh
from .identity import PersonalInfo, UserId, derive_id
from .ledger import (
    MAX_RECORD_PAYLOAD,
    AnonScanHash,
    Block,
    ChainStore,
    StoredRecord,
    Transaction,
    VaccinationRecord,
    lookup_records,
    scan_hash_candidates,
)
from .lsh import LshParams, ScanHash
from .templates import FeatureVector, MaskVector


class WorkflowError(ValueError):
    pass


@dataclass(frozen=True)
class Register:
    payload: bytes

    def __post_init__(self):
        if len(self.payload) > MAX_RECORD_PAYLOAD:
            raise WorkflowError(
                f"record payload is {len(self.payload)} bytes; limit is {MAX_RECORD_PAYLOAD}"
            )


@dataclass(frozen=True)
class Lookup:
    pass


Intent = Union[Register, Lookup]


@dataclass(frozen=True)
class PresentationRequest:
    fv: FeatureVector
    mask: MaskVector
    info: PersonalInfo
    intent: Intent = Lookup()


class Status(str, enum.Enum):
    NEW_USER_ENROLLED = "NewUserEnrolled"
    EXISTING_USER_RECORD_ADDED = "ExistingUserRecordAdded"
    RECORDS_FOUND = "RecordsFound"
    NOT_FOUND = "NotFound"


@dataclass(frozen=True)
class PresentationOutcome:
    status: Status
    records: tuple[StoredRecord, ...] = ()
    matched_scan_hash: ScanHash | None = None
    user_id: UserId | None = None
    submitted: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.status is Status.RECORDS_FOUND and not self.records:
            raise ValueError("RecordsFound needs at least one record")

    def to_json(self) -> dict:
        return {
            "status": self.status.value,
            "user_id": self.user_id.hex() if self.user_id else None,
            "matched_scan_hash": self.matched_scan_hash.hex() if self.matched_scan_hash else None,
            "records": [
                {"height": r.height, "position": r.position, "txid": r.tx.txid.hex(),
                 "payload": r.payload.decode("utf-8", errors="replace")}
                for r in self.records
            ],
            "submitted_txids": [t.hex() for t in self.submitted],
        }


# -- submission sinks -------------------------------------------------------


class Submitter(Protocol):
    def submit_pair(self, anon: Transaction, record: Transaction) -> None: ...

    def submit(self, tx: Transaction) -> None: ...


class SimSubmitter:
    """Hands transactions to a running :class:`~covichain.sim.Simulation`."""

    def __init__(self, sim, label: str | None = None):
        self.sim = sim
        self.label = label

    def submit_pair(self, anon: Transaction, record: Transaction) -> None:
        self.sim.submit_user_pair(anon, record, label=self.label)

    def submit(self, tx: Transaction) -> None:
        self.sim.submit(tx)


class LocalChain:
    """Single-authority chain that seals every transaction in its own block.

    One transaction per block keeps a user's two enrollment transactions in
    different blocks without needing a clock.
    """

    def __init__(self, store: ChainStore, name: str, key: Ed25519PrivateKey,
                 block_interval: float = 15.0):
        self.store = store
        self.name = name
        self.key = key
        self.block_interval = block_interval

    def _seal(self, tx: Transaction) -> None:
        tip = self.store.tip
        ts = tip.timestamp_us + round(self.block_interval * 1e6)
        self.store.append(Block.create(tip.height + 1, tip.block_hash, ts, self.name, [tx], self.key))

    def submit_pair(self, anon: Transaction, record: Transaction) -> None:
        self._seal(anon)
        self._seal(record)

    def submit(self, tx: Transaction) -> None:
        self._seal(tx)


# -- the algorithm ----------------------------------------------------------


@dataclass
class CenterConfig:
    """A vaccination centre: the authority that signs what it submits."""

    name: str
    key: Ed25519PrivateKey
    params: LshParams = field(default_factory=LshParams)
    threshold: float = lsh.DEFAULT_THRESHOLD
    next_nonce: int = 0

    def sign(self, body) -> Transaction:
        tx = Transaction.create(body, self.name, self.next_nonce, self.key)
        self.next_nonce += 1
        return tx


@dataclass(frozen=True)
class Resolution:
    user_id: UserId
    scan_hash: ScanHash
    records: list[StoredRecord]


def resolve(scan_hash: ScanHash, info: PersonalInfo, store: ChainStore,
            threshold: float = lsh.DEFAULT_THRESHOLD) -> Resolution | None:
    """First candidate hash (nearest first) whose re-derived ID has records."""
    seen = set()
    for candidate, _ in scan_hash_candidates(store, scan_hash, threshold):
        if candidate.value in seen:
            continue
        seen.add(candidate.value)
        uid = derive_id(info, candidate)
        records = lookup_records(store, uid)
        if records:
            return Resolution(uid, candidate, records)
    return None


def present(req: PresentationRequest, store: ChainStore, cfg: CenterConfig,
            submitter: Submitter | None = None) -> PresentationOutcome:
    fresh = lsh.simhash(req.fv, req.mask, cfg.params)
    hit = resolve(fresh, req.info, store, cfg.threshold)

    if isinstance(req.intent, Lookup):
        if hit is None:
            return PresentationOutcome(Status.NOT_FOUND)
        return PresentationOutcome(Status.RECORDS_FOUND, tuple(hit.records),
                                   hit.scan_hash, hit.user_id)

    if submitter is None:
        raise WorkflowError("registration needs a submitter")
    payload = req.intent.payload
    if hit is not None:
        tx = cfg.sign(VaccinationRecord(hit.user_id, payload))
        submitter.submit(tx)
        return PresentationOutcome(Status.EXISTING_USER_RECORD_ADDED, (), hit.scan_hash,
                                   hit.user_id, (tx.txid,))

    uid = derive_id(req.info, fresh)
    anon = cfg.sign(AnonScanHash(fresh))
    record = cfg.sign(VaccinationRecord(uid, payload))
    submitter.submit_pair(anon, record)
    return PresentationOutcome(Status.NEW_USER_ENROLLED, (), fresh, uid,
                               (anon.txid, record.txid))


def add_booster(req: PresentationRequest, store: ChainStore, cfg: CenterConfig,
                submitter: Submitter) -> PresentationOutcome:
    """Register a further dose. An unmatched user is enrolled afresh, as in ``present``."""
    if not isinstance(req.intent, Register):
        raise WorkflowError("a booster needs a Register intent")
    return present(req, store, cfg, submitter)


def timed_resolve(scan_hash: ScanHash, info: PersonalInfo, store: ChainStore,
                  threshold: float = lsh.DEFAULT_THRESHOLD) -> tuple[Resolution | None, float]:
    start = time.perf_counter()
    out = resolve(scan_hash, info, store, threshold)
    return out, time.perf_counter() - start
