"""Deterministic discrete-event simulation of round-robin proof-of-authority nodes.

Everything runs in virtual seconds off one event queue ordered by
``(time, sequence)``. Given a config and a workload, every run produces the
same chains bit for bit.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .ledger import (
    Block,
    ChainStore,
    LedgerViolation,
    Transaction,
    make_genesis,
    validate_transaction,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    num_nodes: int = 6
    block_interval: float = 15.0
    network_delay: tuple[float, float] = (0.01, 0.5)
    unlink_delay: float = 600.0
    # None -> block_interval + worst-case network delay; see schedule_user_submission
    min_separation: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be at least 1")
        if self.block_interval <= 0:
            raise ValueError("block_interval must be positive")
        lo, hi = self.network_delay
        if not 0 <= lo <= hi:
            raise ValueError("network_delay must satisfy 0 <= min <= max")
        if hi >= self.block_interval:
            raise ValueError("network delay must stay below the block interval")
        if self.unlink_delay < 0:
            raise ValueError("unlink_delay must be non-negative")
        if self.separation < self.block_interval:
            raise ValueError("min_separation must be at least block_interval")
        if self.separation > self.unlink_delay:
            raise ValueError("unlink_delay window is narrower than the required separation")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    @property
    def separation(self) -> float:
        if self.min_separation is not None:
            return self.min_separation
        return self.block_interval + self.network_delay[1]


def designated_proposer(height: int, n: int) -> int:
    if n < 1:
        raise ValueError("need at least one authority")
    return height % n


def _us(t: float) -> int:
    return round(t * 1_000_000)


# -- events -----------------------------------------------------------------


@dataclass(frozen=True)
class SubmitTx:
    tx: Transaction


@dataclass(frozen=True)
class DeliverTx:
    node: int
    tx: Transaction


@dataclass(frozen=True)
class ProposeBlock:
    height: int


@dataclass(frozen=True)
class DeliverBlock:
    node: int
    block: Block


Payload = Union[SubmitTx, DeliverTx, ProposeBlock, DeliverBlock]


@dataclass(order=True)
class SimEvent:
    at: float
    sequence: int
    payload: Payload = field(compare=False)


class SimulationHalt(RuntimeError):
    """An honest node produced or received a block that fails validation."""


def schedule_user_submission(
    tx_pair: tuple[Transaction, Transaction],
    now: float,
    cfg: SimConfig,
    rng: random.Random,
) -> tuple[SimEvent, SimEvent]:
    """Pick two submission times at least ``cfg.separation`` apart.

    Returns events with ``sequence`` left at 0; the simulation assigns real
    sequence numbers when it enqueues them.
    """
    d1 = rng.uniform(0.0, cfg.unlink_delay)
    d2 = rng.uniform(0.0, cfg.unlink_delay)
    while abs(d1 - d2) < cfg.separation:
        d2 = rng.uniform(0.0, cfg.unlink_delay)
    anon, record = tx_pair
    return SimEvent(now + d1, 0, SubmitTx(anon)), SimEvent(now + d2, 0, SubmitTx(record))


# -- nodes ------------------------------------------------------------------


@dataclass
class Node:
    index: int
    name: str
    key: Ed25519PrivateKey
    store: ChainStore
    mempool: dict[bytes, tuple[float, Transaction]] = field(default_factory=dict)
    drop_block_heights: set[int] = field(default_factory=set)
    skipped_blocks: list[int] = field(default_factory=list)

    def prune(self, block: Block) -> None:
        for tx in block.transactions:
            self.mempool.pop(tx.txid, None)


def authority_key(seed: int, index: int) -> Ed25519PrivateKey:
    material = hashlib.sha256(
        b"covichain/sim/authority" + seed.to_bytes(8, "big") + index.to_bytes(4, "big")
    ).digest()
    return Ed25519PrivateKey.from_private_bytes(material)


@dataclass
class AgreementReport:
    ok: bool
    heights: dict[str, int]
    tips: dict[str, str]
    divergent: list[dict]

    def to_json(self) -> dict:
        return {"ok": self.ok, "heights": self.heights, "tips": self.tips,
                "divergent": self.divergent}


class Simulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.rng_seed)
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._in_flight = 0  # queued events other than ProposeBlock
        self.event_counts: Counter[str] = Counter()
        self.dropped: list[tuple[int, str, str]] = []
        self.user_pairs: dict[str, tuple[bytes, bytes]] = {}
        self.submitted: list[bytes] = []

        authorities = [(f"authority-{i}", authority_key(cfg.rng_seed, i))
                       for i in range(cfg.num_nodes)]
        self.genesis = make_genesis(authorities)
        self.nodes: list[Node] = []
        for i, (name, key) in enumerate(authorities):
            store = ChainStore()
            store.append(self.genesis)
            self.nodes.append(Node(i, name, key, store))
        self._push(self.cfg.block_interval, ProposeBlock(1))

    # queue plumbing

    def _push(self, at: float, payload: Payload) -> None:
        heapq.heappush(self._queue, SimEvent(at, self._seq, payload))
        self._seq += 1
        if not isinstance(payload, ProposeBlock):
            self._in_flight += 1

    def _delay(self) -> float:
        lo, hi = self.cfg.network_delay
        return self.rng.uniform(lo, hi)

    def pending(self) -> int:
        return len(self._queue)

    # workload injection

    def submit(self, tx: Transaction, at: float | None = None) -> None:
        at = self.now if at is None else at
        if at < self.now:
            raise ValueError("cannot submit in the past")
        self._push(at, SubmitTx(tx))

    def submit_user_pair(self, anon: Transaction, record: Transaction,
                         now: float | None = None, label: str | None = None) -> tuple[float, float]:
        now = self.now if now is None else now
        e1, e2 = schedule_user_submission((anon, record), now, self.cfg, self.rng)
        self._push(e1.at, e1.payload)
        self._push(e2.at, e2.payload)
        self.user_pairs[label or anon.txid.hex()] = (anon.txid, record.txid)
        return e1.at, e2.at

    # execution

    def step(self) -> SimEvent | None:
        if not self._queue:
            return None
        event = heapq.heappop(self._queue)
        self.now = event.at
        p = event.payload
        if not isinstance(p, ProposeBlock):
            self._in_flight -= 1
        self.event_counts[type(p).__name__] += 1
        if isinstance(p, SubmitTx):
            self._on_submit(p)
        elif isinstance(p, DeliverTx):
            self._on_deliver_tx(p)
        elif isinstance(p, ProposeBlock):
            self._on_propose(p)
        else:
            self._on_deliver_block(p)
        return event

    def run_until(self, t_end: float) -> None:
        """Apply every event strictly before ``t_end``."""
        while self._queue and self._queue[0].at < t_end:
            self.step()
        self.now = max(self.now, t_end)

    def run_to_quiescence(self, max_idle_rounds: int | None = None) -> None:
        """Run until nothing is in flight and every mempool is empty.

        Stops early if the chain makes no progress for ``max_idle_rounds``
        proposal slots while work remains (only possible under fault injection).
        """
        idle_limit = max_idle_rounds or 2 * self.cfg.num_nodes + 2
        idle = 0
        while self._queue:
            if not self._in_flight and not any(n.mempool for n in self.nodes):
                break
            event = self.step()
            if isinstance(event.payload, ProposeBlock):
                heights = max(n.store.height for n in self.nodes)
                idle = 0 if heights >= event.payload.height else idle + 1
                if idle > idle_limit:
                    log.warning("chain stalled at t=%.3f; stopping", self.now)
                    break

    # handlers

    def _on_submit(self, p: SubmitTx) -> None:
        self.submitted.append(p.tx.txid)
        for node in self.nodes:
            self._push(self.now + self._delay(), DeliverTx(node.index, p.tx))

    def _on_deliver_tx(self, p: DeliverTx) -> None:
        node = self.nodes[p.node]
        tx = p.tx
        if tx.txid in node.mempool or node.store.contains_tx(tx.txid):
            return
        try:
            validate_transaction(tx, node.store.registry, node.store.height + 1)
        except LedgerViolation as exc:
            log.info("node %s dropped tx %s: %s", node.name, tx.txid.hex()[:12], exc)
            self.dropped.append((node.index, tx.txid.hex(), exc.rule))
            return
        node.mempool[tx.txid] = (self.now, tx)

    def _on_propose(self, p: ProposeBlock) -> None:
        h = p.height
        self._push((h + 1) * self.cfg.block_interval, ProposeBlock(h + 1))
        proposer = self.nodes[designated_proposer(h, self.cfg.num_nodes)]
        if proposer.store.height != h - 1:
            log.warning("proposer %s is at height %d, cannot propose %d",
                        proposer.name, proposer.store.height, h)
            return
        txs = [tx for _, tx in sorted(proposer.mempool.values(),
                                      key=lambda item: (item[0], item[1].txid))]
        block = Block.create(h, proposer.store.tip.block_hash, _us(self.now),
                             proposer.name, txs, proposer.key)
        self._apply(proposer, block)
        for node in self.nodes:
            if node is not proposer:
                self._push(self.now + self._delay(), DeliverBlock(node.index, block))

    def _on_deliver_block(self, p: DeliverBlock) -> None:
        node = self.nodes[p.node]
        block = p.block
        if block.height in node.drop_block_heights:
            node.skipped_blocks.append(block.height)
            return
        if block.height != node.store.height + 1:
            node.skipped_blocks.append(block.height)
            log.warning("node %s at height %d ignored block %d",
                        node.name, node.store.height, block.height)
            return
        self._apply(node, block)

    def _apply(self, node: Node, block: Block) -> None:
        try:
            node.store.append(block)
        except LedgerViolation as exc:
            raise SimulationHalt(f"node {node.name} rejected block {block.height}: {exc}") from exc
        node.prune(block)

    # reporting

    def block_placements(self, node: int = 0) -> dict[str, tuple[int | None, int | None]]:
        store = self.nodes[node].store
        out = {}
        for label, (a, r) in self.user_pairs.items():
            la, lr = store.locate(a), store.locate(r)
            out[label] = (la.height if la else None, lr.height if lr else None)
        return out

    def report(self) -> dict:
        agreement = replica_agreement(self)
        store = self.nodes[0].store
        return {
            "config": {
                "num_nodes": self.cfg.num_nodes,
                "block_interval": self.cfg.block_interval,
                "network_delay": list(self.cfg.network_delay),
                "unlink_delay": self.cfg.unlink_delay,
                "min_separation": self.cfg.separation,
                "rng_seed": self.cfg.rng_seed,
            },
            "virtual_time": self.now,
            "blocks": [
                {"height": b.height, "proposer": b.proposer, "tx_count": len(b.transactions),
                 "block_hash": b.block_hash.hex()}
                for b in store.blocks
            ],
            "user_placements": {k: list(v) for k, v in self.block_placements().items()},
            "agreement": agreement.to_json(),
            "event_counts": dict(sorted(self.event_counts.items())),
            "dropped_transactions": len(self.dropped),
        }


def replica_agreement(sim: Simulation) -> AgreementReport:
    """Compare every replica's block sequence with the longest one."""
    chains = {n.name: n.store.blocks for n in sim.nodes}
    reference = max(chains.values(), key=len)
    divergent = []
    for name, blocks in chains.items():
        for h, ref in enumerate(reference):
            if h >= len(blocks) or blocks[h].block_hash != ref.block_hash:
                divergent.append({"node": name, "height": h,
                                  "reason": "missing block" if h >= len(blocks) else "hash mismatch"})
                break
    return AgreementReport(
        ok=not divergent,
        heights={name: len(blocks) - 1 for name, blocks in chains.items()},
        tips={name: blocks[-1].block_hash.hex() for name, blocks in chains.items()},
        divergent=divergent,
    )
