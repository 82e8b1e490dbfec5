"""Permissioned append-only ledger.

Canonical encodings use length-prefixed fields (u32 big-endian length) in
declared order and big-endian integers. Transaction ids and block hashes are
SHA-256 over those encodings, so they are platform independent.

Transaction (signed encoding)::

    u8 kind | lp(author utf-8) | u64 nonce | lp(body) | lp(signature)

The signature covers everything before ``lp(signature)``.

Block::

    u64 height | prev_hash[32] | u64 timestamp_us | lp(proposer) | u32 count
    | lp(tx) * count | lp(proposer_signature)

``block_hash`` is SHA-256 over everything before the proposer signature; the
proposer signs ``block_hash``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import lsh
from .identity import UserId
from .lsh import MatchSet, PackedHashes, ScanHash

MAX_RECORD_PAYLOAD = 150
ZERO_HASH = bytes(32)
FILE_MAGIC = b"CVCH"
FILE_VERSION = 1


class LedgerViolation(Exception):
    """A transaction or block broke a ledger rule. ``rule`` names which."""

    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"{rule}: {detail}" if detail else rule)
        self.rule = rule
        self.detail = detail


class ChainCorruption(Exception):
    def __init__(self, height: int, detail: str):
        super().__init__(f"corrupt block at height {height}: {detail}")
        self.height = height


# -- encoding helpers -------------------------------------------------------


def lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ValueError(f"truncated input at offset {self.pos}")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self):
        if self.pos != len(self.data):
            raise ValueError(f"{len(self.data) - self.pos} trailing bytes")


def public_key_bytes(key: Ed25519PrivateKey | Ed25519PublicKey) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- transactions -----------------------------------------------------------


class TxKind(enum.IntEnum):
    AUTHORITY_CERT = 1
    ANON_SCAN_HASH = 2
    VACCINATION_RECORD = 3


@dataclass(frozen=True)
class AuthorityCert:
    name: str
    public_key: bytes

    kind = TxKind.AUTHORITY_CERT

    def encode(self) -> bytes:
        return lp(self.name.encode("utf-8")) + lp(self.public_key)


@dataclass(frozen=True)
class AnonScanHash:
    scan_hash: ScanHash

    kind = TxKind.ANON_SCAN_HASH

    def encode(self) -> bytes:
        return struct.pack(">H", self.scan_hash.k) + self.scan_hash.value


@dataclass(frozen=True)
class VaccinationRecord:
    """``payload`` is opaque to the ledger; only its length is enforced."""

    user_id: UserId
    payload: bytes

    kind = TxKind.VACCINATION_RECORD

    def encode(self) -> bytes:
        return self.user_id.value + lp(self.payload)


Body = Union[AuthorityCert, AnonScanHash, VaccinationRecord]


def _decode_body(kind: TxKind, raw: bytes) -> Body:
    r = _Reader(raw)
    if kind is TxKind.AUTHORITY_CERT:
        body = AuthorityCert(r.lp().decode("utf-8"), r.lp())
    elif kind is TxKind.ANON_SCAN_HASH:
        k = struct.unpack(">H", r.take(2))[0]
        body = AnonScanHash(ScanHash(r.take(32), k))
    else:
        body = VaccinationRecord(UserId(r.take(32)), r.lp())
    r.done()
    return body


@dataclass(frozen=True)
class Transaction:
    body: Body
    author: str
    nonce: int
    signature: bytes
    txid: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if not self.txid:
            object.__setattr__(self, "txid", hashlib.sha256(self.encode()).digest())

    @property
    def kind(self) -> TxKind:
        return self.body.kind

    def signing_bytes(self) -> bytes:
        return (
            bytes([self.kind])
            + lp(self.author.encode("utf-8"))
            + struct.pack(">Q", self.nonce)
            + lp(self.body.encode())
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + lp(self.signature)

    def computed_txid(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    @classmethod
    def create(cls, body: Body, author: str, nonce: int, key: Ed25519PrivateKey) -> "Transaction":
        unsigned = cls(body, author, nonce, b"", txid=b"\0")
        return cls(body, author, nonce, key.sign(unsigned.signing_bytes()))

    @classmethod
    def decode(cls, raw: bytes) -> "Transaction":
        r = _Reader(raw)
        kind = TxKind(r.u8())
        author = r.lp().decode("utf-8")
        nonce = r.u64()
        body = _decode_body(kind, r.lp())
        signature = r.lp()
        r.done()
        return cls(body, author, nonce, signature)

    def to_json(self) -> dict:
        out = {"txid": self.txid.hex(), "kind": self.kind.name, "author": self.author,
               "nonce": self.nonce}
        b = self.body
        if isinstance(b, AuthorityCert):
            out.update(name=b.name, public_key=b.public_key.hex())
        elif isinstance(b, AnonScanHash):
            out.update(scan_hash=b.scan_hash.hex(), k=b.scan_hash.k)
        else:
            out.update(user_id=b.user_id.hex(), payload=b.payload.hex())
        out["signature"] = self.signature.hex()
        return out


# -- authority registry -----------------------------------------------------


class Authority(NamedTuple):
    name: str
    public_key: bytes
    registered_at: int


class AuthorityRegistry:
    """Authorities in registration order. Genesis authorities register at height 0."""

    def __init__(self, entries: list[Authority] | None = None):
        self._entries: list[Authority] = list(entries or [])
        self._by_name = {a.name: a for a in self._entries}

    def register(self, name: str, public_key: bytes, height: int) -> None:
        if name in self._by_name:
            raise LedgerViolation("duplicate-authority", name)
        entry = Authority(name, public_key, height)
        self._entries.append(entry)
        self._by_name[name] = entry

    def copy(self) -> "AuthorityRegistry":
        return AuthorityRegistry(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def get(self, name: str) -> Authority | None:
        return self._by_name.get(name)

    def active_at(self, height: int) -> list[Authority]:
        """Authorities allowed to act in the block at ``height``."""
        if height == 0:
            return [a for a in self._entries if a.registered_at == 0]
        return [a for a in self._entries if a.registered_at < height]

    def key_at(self, name: str, height: int) -> bytes | None:
        a = self._by_name.get(name)
        if a is None:
            return None
        if height > 0 and a.registered_at >= height:
            return None
        return a.public_key

    def designated_proposer(self, height: int) -> str:
        active = self.active_at(height)
        if not active:
            raise LedgerViolation("no-authorities", f"no authority active at height {height}")
        return active[height % len(active)].name


def validate_transaction(tx: Transaction, registry: AuthorityRegistry, height: int) -> None:
    """Raise :class:`LedgerViolation` for the first rule ``tx`` breaks at ``height``."""
    key = registry.key_at(tx.author, height)
    if key is None:
        raise LedgerViolation("unknown-author", tx.author)
    if not verify_signature(key, tx.signature, tx.signing_bytes()):
        raise LedgerViolation("bad-signature", tx.txid.hex())
    if isinstance(tx.body, VaccinationRecord) and len(tx.body.payload) > MAX_RECORD_PAYLOAD:
        raise LedgerViolation(
            "oversize-payload", f"{len(tx.body.payload)} > {MAX_RECORD_PAYLOAD} bytes"
        )
    if tx.txid != tx.computed_txid():
        raise LedgerViolation("txid-mismatch", tx.txid.hex())


# -- blocks -----------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp_us: int
    proposer: str
    transactions: tuple[Transaction, ...]
    proposer_signature: bytes
    block_hash: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if not self.block_hash:
            object.__setattr__(self, "block_hash", self.computed_hash())

    @property
    def timestamp(self) -> float:
        return self.timestamp_us / 1e6

    def body_bytes(self) -> bytes:
        parts = [
            struct.pack(">Q", self.height),
            self.prev_hash,
            struct.pack(">Q", self.timestamp_us),
            lp(self.proposer.encode("utf-8")),
            struct.pack(">I", len(self.transactions)),
        ]
        parts += [lp(tx.encode()) for tx in self.transactions]
        return b"".join(parts)

    def computed_hash(self) -> bytes:
        return hashlib.sha256(self.body_bytes()).digest()

    def encode(self) -> bytes:
        return self.body_bytes() + lp(self.proposer_signature)

    @classmethod
    def create(cls, height: int, prev_hash: bytes, timestamp_us: int, proposer: str,
               transactions, key: Ed25519PrivateKey) -> "Block":
        unsigned = cls(height, prev_hash, timestamp_us, proposer, tuple(transactions), b"")
        return cls(height, prev_hash, timestamp_us, proposer, unsigned.transactions,
                   key.sign(unsigned.block_hash))

    @classmethod
    def decode(cls, raw: bytes) -> "Block":
        r = _Reader(raw)
        height = r.u64()
        prev_hash = r.take(32)
        ts = r.u64()
        proposer = r.lp().decode("utf-8")
        txs = tuple(Transaction.decode(r.lp()) for _ in range(r.u32()))
        sig = r.lp()
        r.done()
        return cls(height, prev_hash, ts, proposer, txs, sig)

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "block_hash": self.block_hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "timestamp": self.timestamp,
            "proposer": self.proposer,
            "proposer_signature": self.proposer_signature.hex(),
            "transactions": [tx.to_json() for tx in self.transactions],
        }


def make_genesis(authorities: list[tuple[str, Ed25519PrivateKey]], timestamp_us: int = 0) -> Block:
    """Genesis block: one self-signed certificate per initial authority.

    The first authority proposes it (height 0 mod N is index 0).
    """
    certs = [
        Transaction.create(AuthorityCert(name, public_key_bytes(key)), name, 0, key)
        for name, key in authorities
    ]
    name, key = authorities[0]
    return Block.create(0, ZERO_HASH, timestamp_us, name, certs, key)


# -- chain store ------------------------------------------------------------


class TxLocation(NamedTuple):
    height: int
    position: int


class StoredRecord(NamedTuple):
    height: int
    position: int
    tx: Transaction

    @property
    def user_id(self) -> UserId:
        return self.tx.body.user_id

    @property
    def payload(self) -> bytes:
        return self.tx.body.payload


@dataclass
class ChainIndices:
    scan_hashes: list[ScanHash] = field(default_factory=list)
    by_user: dict[bytes, list[TxLocation]] = field(default_factory=dict)
    txids: dict[bytes, TxLocation] = field(default_factory=dict)

    def add_block(self, block: Block) -> None:
        for pos, tx in enumerate(block.transactions):
            loc = TxLocation(block.height, pos)
            self.txids[tx.txid] = loc
            if isinstance(tx.body, AnonScanHash):
                self.scan_hashes.append(tx.body.scan_hash)
            elif isinstance(tx.body, VaccinationRecord):
                # newest-first: later blocks and later positions go to the front
                self.by_user.setdefault(tx.body.user_id.value, []).insert(0, loc)


class ChainStore:
    """Blocks plus derived query indices.

    One writer at a time; readers never observe a half-applied block because
    every public method runs under the same lock.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._blocks: list[Block] = []
        self._registry = AuthorityRegistry()
        self._indices = ChainIndices()
        self._hash_bytes = bytearray()
        self._packed: PackedHashes | None = None
        self._hash_k: int | None = None

    # queries

    def __len__(self):
        return len(self._blocks)

    @property
    def blocks(self) -> tuple[Block, ...]:
        with self._lock:
            return tuple(self._blocks)

    @property
    def tip(self) -> Block | None:
        with self._lock:
            return self._blocks[-1] if self._blocks else None

    @property
    def height(self) -> int:
        """Height of the tip, -1 for an empty chain."""
        return len(self._blocks) - 1

    @property
    def registry(self) -> AuthorityRegistry:
        with self._lock:
            return self._registry.copy()

    def contains_tx(self, txid: bytes) -> bool:
        with self._lock:
            return txid in self._indices.txids

    def locate(self, txid: bytes) -> TxLocation | None:
        with self._lock:
            return self._indices.txids.get(txid)

    def packed_scan_hashes(self) -> PackedHashes:
        with self._lock:
            if self._packed is None:
                self._packed = PackedHashes.from_bytes(
                    bytes(self._hash_bytes), self._hash_k or lsh.DEFAULT_K
                )
            return self._packed

    def scan_hashes(self) -> list[ScanHash]:
        with self._lock:
            return list(self._indices.scan_hashes)

    def records_for(self, user_id: UserId) -> list[StoredRecord]:
        with self._lock:
            locs = list(self._indices.by_user.get(user_id.value, ()))
            return [StoredRecord(h, p, self._blocks[h].transactions[p]) for h, p in locs]

    def indices(self) -> ChainIndices:
        """Snapshot of the incrementally maintained indices."""
        with self._lock:
            return ChainIndices(
                list(self._indices.scan_hashes),
                {u: list(v) for u, v in self._indices.by_user.items()},
                dict(self._indices.txids),
            )

    def rebuild_indices(self) -> ChainIndices:
        fresh = ChainIndices()
        for block in self.blocks:
            fresh.add_block(block)
        return fresh

    # writes

    def append(self, block: Block) -> None:
        with self._lock:
            registry = self._check_block(block)
            self._blocks.append(block)
            self._registry = registry
            self._indices.add_block(block)
            for tx in block.transactions:
                if isinstance(tx.body, AnonScanHash):
                    self._hash_bytes += tx.body.scan_hash.value
                    self._hash_k = self._hash_k or tx.body.scan_hash.k
            self._packed = None

    def _check_block(self, block: Block) -> AuthorityRegistry:
        expected_height = len(self._blocks)
        if block.height != expected_height:
            raise LedgerViolation(
                "chain-link", f"block height {block.height}, expected {expected_height}"
            )
        prev = self._blocks[-1].block_hash if self._blocks else ZERO_HASH
        if block.prev_hash != prev:
            raise LedgerViolation("chain-link", f"prev_hash mismatch at height {block.height}")
        if block.block_hash != block.computed_hash():
            raise LedgerViolation("bad-block-hash", f"height {block.height}")

        registry = self._registry.copy()
        if block.height == 0:
            # genesis bootstraps the registry from its own self-signed certificates
            for tx in block.transactions:
                if not isinstance(tx.body, AuthorityCert) or tx.body.name != tx.author:
                    raise LedgerViolation("bad-genesis", "genesis holds only self-signed certificates")
                registry.register(tx.author, tx.body.public_key, 0)

        designated = registry.designated_proposer(block.height)
        if block.proposer != designated:
            raise LedgerViolation(
                "wrong-proposer",
                f"height {block.height} proposed by {block.proposer}, expected {designated}",
            )
        key = registry.key_at(block.proposer, block.height)
        if key is None or not verify_signature(key, block.proposer_signature, block.block_hash):
            raise LedgerViolation("bad-proposer-signature", f"height {block.height}")

        seen: set[bytes] = set()
        for tx in block.transactions:
            validate_transaction(tx, registry, block.height)
            if tx.txid in seen or tx.txid in self._indices.txids:
                raise LedgerViolation("duplicate-txid", tx.txid.hex())
            seen.add(tx.txid)
        if block.height > 0:
            for tx in block.transactions:
                if isinstance(tx.body, AuthorityCert):
                    registry.register(tx.body.name, tx.body.public_key, block.height)
        return registry

    def __repr__(self):
        tip = self.tip
        return f"ChainStore(height={self.height}, tip={tip.block_hash.hex()[:12] if tip else None})"


def append_block(store: ChainStore, block: Block) -> None:
    store.append(block)


def scan_hash_candidates(
    store: ChainStore, query: ScanHash, threshold: float = lsh.DEFAULT_THRESHOLD
) -> MatchSet:
    return lsh.find_candidates(query, store.packed_scan_hashes(), threshold)


def lookup_records(store: ChainStore, user_id: UserId) -> list[StoredRecord]:
    """Vaccination records for ``user_id``, newest (highest block, last position) first."""
    return store.records_for(user_id)


# -- persistence ------------------------------------------------------------


def _file_record(block: Block) -> bytes:
    raw = block.encode()
    return struct.pack(">I", len(raw) + 32) + block.block_hash + raw


def encode_chain(store: ChainStore) -> bytes:
    parts = [FILE_MAGIC, struct.pack(">H", FILE_VERSION)]
    parts += [_file_record(block) for block in store.blocks]
    return b"".join(parts)


def persist(store: ChainStore, path: str | os.PathLike) -> None:
    """Write ``store`` to ``path``, appending only blocks the file lacks.

    A new file is written whole via a temporary file and rename. An existing
    file must hold a prefix of ``store``; its bytes are never rewritten.
    """
    path = Path(path)
    blocks = store.blocks
    if not path.exists():
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(encode_chain(store))
        os.replace(tmp, path)
        return
    on_disk = load(path)
    h = on_disk.height
    if h > store.height or (h >= 0 and on_disk.tip.block_hash != blocks[h].block_hash):
        raise ValueError(f"{path} holds a chain that is not a prefix of this store")
    with open(path, "ab") as fh:
        fh.write(b"".join(_file_record(b) for b in blocks[h + 1:]))
        fh.flush()
        os.fsync(fh.fileno())


def decode_chain(data: bytes) -> ChainStore:
    if data[:4] != FILE_MAGIC:
        raise ChainCorruption(-1, "bad file magic")
    if len(data) < 6 or struct.unpack(">H", data[4:6])[0] != FILE_VERSION:
        raise ChainCorruption(-1, "unsupported file version")
    store = ChainStore()
    pos, height = 6, 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ChainCorruption(height, "truncated record length")
        size = struct.unpack(">I", data[pos:pos + 4])[0]
        record = data[pos + 4:pos + 4 + size]
        if len(record) != size or size < 32:
            raise ChainCorruption(height, "truncated record")
        stored_hash, raw = record[:32], record[32:]
        try:
            block = Block.decode(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ChainCorruption(height, f"undecodable block: {exc}") from None
        if block.block_hash != stored_hash:
            raise ChainCorruption(height, "block hash does not match contents")
        if block.height != height:
            raise ChainCorruption(height, f"block claims height {block.height}")
        try:
            store.append(block)
        except LedgerViolation as exc:
            raise ChainCorruption(height, str(exc)) from None
        pos += 4 + size
        height += 1
    return store


def load(path: str | os.PathLike) -> ChainStore:
    return decode_chain(Path(path).read_bytes())


def dump_json(store: ChainStore) -> str:
    return json.dumps([b.to_json() for b in store.blocks], indent=2)
