"""Benchmarks: matching accuracy, storage growth, hash census and search latency."""

from __future__ import annotations

import datetime as dt
import json
import random
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import lsh
from .identity import Gender, PersonalInfo, UserId, derive_id
from .ledger import (
    AnonScanHash,
    Block,
    ChainStore,
    Transaction,
    VaccinationRecord,
    make_genesis,
)
from .lsh import LshParams, ScanHash
from .sim import SimConfig, Simulation, authority_key
from .templates import FeatureVector, MaskVector, PopulationSpec, generate_population_arrays
from .workflow import (
    CenterConfig,
    PresentationRequest,
    Register,
    SimSubmitter,
    Status,
    present,
    resolve,
)

SECONDS_PER_DAY = 86_400
MB = 1e6
GB = 1e9


# -- storage ----------------------------------------------------------------


@dataclass(frozen=True)
class StorageModel:
    """Byte sizes default to measurements taken on an Ethereum deployment."""

    empty_block_bytes: float = 606
    iris_tx_bytes: float = 191.4         # 5742-byte block / 30 hash transactions
    record_tx_bytes: float = 388.5385    # 10102-byte block / 26 record transactions
    block_interval_s: float = 15
    horizon_days: float = 365
    num_users: int = 1_000_000

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")


def per_tx_bytes(block_bytes: float, tx_count: int) -> float:
    return block_bytes / tx_count


def estimate_storage(m: StorageModel) -> dict[str, float]:
    blocks_per_day = SECONDS_PER_DAY / m.block_interval_s
    baseline_day = blocks_per_day * m.empty_block_bytes
    baseline_horizon = baseline_day * m.horizon_days
    iris = m.num_users * m.iris_tx_bytes
    records = m.num_users * m.record_tx_bytes
    return {
        "blocks_per_day": blocks_per_day,
        "blocks_in_horizon": blocks_per_day * m.horizon_days,
        "baseline_bytes_per_day": baseline_day,
        "baseline_bytes_per_year": baseline_horizon,
        "iris_bytes": iris,
        "record_bytes": records,
        "user_bytes": iris + records,
        "total_year_bytes": baseline_horizon + iris + records,
    }


def measured_tx_sizes() -> dict[str, int]:
    """Sizes of our own canonical encodings, for comparison with the model."""
    key = authority_key(0, 0)
    scan = ScanHash(bytes(range(32)))
    uid = UserId(bytes(32))
    payload = make_payload(random.Random(0), 1)
    anon = Transaction.create(AnonScanHash(scan), "authority-0", 0, key)
    record = Transaction.create(VaccinationRecord(uid, payload), "authority-0", 1, key)
    genesis = make_genesis([("authority-0", key)])
    empty = Block.create(1, genesis.block_hash, 15_000_000, "authority-0", [], key)
    return {
        "empty_block_bytes": len(empty.encode()),
        "iris_tx_bytes": len(anon.encode()) + 4,
        "record_tx_bytes": len(record.encode()) + 4,
        "record_payload_bytes": len(payload),
    }


# -- synthetic users --------------------------------------------------------

_DOB_START = dt.date(1920, 1, 1)
_DOB_DAYS = (dt.date(2005, 12, 31) - _DOB_START).days + 1
_VACCINES = ("EU/1/20/1528", "EU/1/20/1507", "EU/1/21/1529", "EU/1/20/1525")


def random_personal_info(rng: random.Random, pin_length: int | None = None) -> PersonalInfo:
    dob = _DOB_START + dt.timedelta(days=rng.randrange(_DOB_DAYS))
    gender = rng.choice(list(Gender))
    pin = None
    if pin_length:
        pin = "".join(rng.choice("0123456789") for _ in range(pin_length))
    return PersonalInfo(dob, gender, pin)


def make_payload(rng: random.Random, dose: int) -> bytes:
    """Compact JSON vaccination record: product, dose, date, batch."""
    date = dt.date(2021, 1, 1) + dt.timedelta(days=rng.randrange(365))
    batch = "".join(rng.choice("ABCDEFGHJKLMNPQRSTUVWXYZ") for _ in range(2)) + \
        "".join(rng.choice("0123456789") for _ in range(4))
    record = {"v": rng.choice(_VACCINES), "dose": dose, "date": date.isoformat(), "batch": batch}
    return json.dumps(record, separators=(",", ":"), sort_keys=True).encode("ascii")


@dataclass
class SyntheticUser:
    subject: int
    info: PersonalInfo
    user_id: UserId
    scan_hash: ScanHash
    payload: bytes
    arrival: float


def enroll_population(
    sim: Simulation,
    templates: np.ndarray,
    masks: np.ndarray,
    infos: list[PersonalInfo],
    rng: random.Random,
    params: LshParams | None = None,
    threshold: float = lsh.DEFAULT_THRESHOLD,
    arrival_window: float = 3600.0,
) -> list[SyntheticUser]:
    """Present every template for registration at a random centre and time.

    Each centre is one simulated authority node and looks up candidates in
    its own replica at the moment the user arrives. Runs the simulation to
    quiescence before returning.
    """
    params = params or LshParams(n=templates.shape[1])
    centers = [CenterConfig(n.name, n.key, params, threshold) for n in sim.nodes]
    arrivals = sorted((rng.uniform(0, arrival_window), i) for i in range(len(templates)))
    users: list[SyntheticUser | None] = [None] * len(templates)
    for at, i in arrivals:
        sim.run_until(at)
        node = rng.randrange(len(sim.nodes))
        payload = make_payload(rng, 1)
        req = PresentationRequest(FeatureVector(templates[i]), MaskVector(masks[i]),
                                  infos[i], Register(payload))
        outcome = present(req, sim.nodes[node].store, centers[node],
                          SimSubmitter(sim, label=f"user-{i}"))
        users[i] = SyntheticUser(i, infos[i], outcome.user_id, outcome.matched_scan_hash,
                                 payload, at)
        if outcome.status is not Status.NEW_USER_ENROLLED:
            # Only happens if two synthetic subjects collide on hash and personal info.
            users[i].scan_hash = None
    sim.run_to_quiescence()
    return users


def simulate_enrollments(cfg: SimConfig, num_users: int, *, seed: int | None = None,
                         n: int = 9600, pin_length: int | None = None,
                         arrival_window: float = 3600.0) -> tuple[Simulation, list[SyntheticUser]]:
    seed = cfg.rng_seed if seed is None else seed
    spec = PopulationSpec(num_subjects=num_users, scans_per_subject=1, seed=seed, n=n)
    pop = generate_population_arrays(spec)
    rng = random.Random(seed)
    infos = [random_personal_info(rng, pin_length) for _ in range(num_users)]
    sim = Simulation(cfg)
    users = enroll_population(sim, pop.templates, pop.masks, infos, rng,
                              LshParams(n=n), arrival_window=arrival_window)
    return sim, users


# -- accuracy ---------------------------------------------------------------


@dataclass
class AccuracyReport:
    records_stored: int
    searches_performed: int
    genuine_probes: int
    genuine_matches: int
    matching_accuracy: float
    impostor_probes: int
    false_accepts: int
    far: float
    frr: float
    mean_search_time_s: float
    threshold: float

    def to_json(self) -> dict:
        return asdict(self)


def run_accuracy(
    spec: PopulationSpec,
    threshold: float = lsh.DEFAULT_THRESHOLD,
    sim_cfg: SimConfig | None = None,
    impostor_probes: int = 10_000,
    params: LshParams | None = None,
) -> AccuracyReport:
    """Enroll scan 0 of every subject, then probe with genuine and impostor scans.

    Genuine probes: every later scan of a subject with that subject's own
    personal info. Impostor probes: a random subject's scan presented with a
    different random subject's personal info. A false accept is any lookup
    that returns records belonging to someone other than the scanned subject.
    Matching accuracy is per genuine probe.
    """
    if spec.scans_per_subject < 2:
        raise ValueError("need at least two scans per subject (enroll + probe)")
    params = params or LshParams(n=spec.n)
    sim_cfg = sim_cfg or SimConfig(rng_seed=spec.seed)
    pop = generate_population_arrays(spec)
    rng = random.Random(spec.seed)
    infos = [random_personal_info(rng) for _ in range(spec.num_subjects)]

    enroll_rows = np.flatnonzero(pop.scans == 0)
    sim = Simulation(sim_cfg)
    users = enroll_population(sim, pop.templates[enroll_rows], pop.masks[enroll_rows], infos,
                              rng, params, threshold,
                              arrival_window=max(3600.0, 5.0 * spec.num_subjects))
    store = sim.nodes[0].store
    owner = {u.user_id.value: u.subject for u in users}

    hashes = lsh.simhash_batch(pop.templates, pop.masks, params)
    row_of = {(int(s), int(c)): r for r, (s, c) in enumerate(zip(pop.subjects, pop.scans))}

    def probe(subject: int, scan: int, info: PersonalInfo) -> tuple[int | None, float]:
        q = ScanHash(hashes[row_of[subject, scan]].tobytes(), params.k)
        start = time.perf_counter()
        hit = resolve(q, info, store, threshold)
        elapsed = time.perf_counter() - start
        return (owner.get(hit.user_id.value, -1) if hit else None), elapsed

    timings = []
    genuine = matches = false_accepts = 0
    for s in range(spec.num_subjects):
        for c in range(1, spec.scans_per_subject):
            who, t = probe(s, c, infos[s])
            timings.append(t)
            genuine += 1
            if who == s:
                matches += 1
            elif who is not None:
                false_accepts += 1

    prng = random.Random(spec.seed ^ 0x5EED_1A7E)
    impostor_false = 0
    for _ in range(impostor_probes):
        b = prng.randrange(spec.num_subjects)
        a = prng.randrange(spec.num_subjects - 1)
        a += a >= b
        scan = prng.randrange(1, spec.scans_per_subject)
        who, t = probe(b, scan, infos[a])
        timings.append(t)
        if who is not None and who != b:
            impostor_false += 1

    records = sum(1 for b in store.blocks for tx in b.transactions
                  if isinstance(tx.body, VaccinationRecord))
    return AccuracyReport(
        records_stored=records,
        searches_performed=len(timings),
        genuine_probes=genuine,
        genuine_matches=matches,
        matching_accuracy=matches / genuine,
        impostor_probes=impostor_probes,
        false_accepts=false_accepts + impostor_false,
        far=impostor_false / impostor_probes if impostor_probes else 0.0,
        frr=1 - matches / genuine,
        mean_search_time_s=statistics.fmean(timings),
        threshold=threshold,
    )


# -- census -----------------------------------------------------------------


def collision_census(spec: PopulationSpec, params: LshParams | None = None,
                     prefix_bits: int = 16) -> dict:
    """Many-to-one statistics of the hash over a whole synthetic population."""
    params = params or LshParams(n=spec.n)
    pop = generate_population_arrays(spec)
    hashes = lsh.simhash_batch(pop.templates, pop.masks, params)
    inputs = {pop.templates[r].tobytes() + pop.masks[r].tobytes() for r in range(len(pop))}
    buckets = Counter(h.tobytes() for h in hashes)
    bits = np.unpackbits(hashes, axis=1)[:, : params.k]
    ones = bits.mean(axis=0)
    prefixes = Counter(int.from_bytes(h[:4].tobytes(), "big") >> (32 - prefix_bits)
                       for h in hashes)
    return {
        "distinct_inputs": len(inputs),
        "distinct_hashes": len(buckets),
        "max_preimage_bucket": max(buckets.values()),
        "prefix_bits": prefix_bits,
        "distinct_prefixes": len(prefixes),
        "max_prefix_bucket": max(prefixes.values()),
        "bit_one_fraction_min": float(ones.min()),
        "bit_one_fraction_max": float(ones.max()),
        "bit_one_fraction": ones.tolist(),
    }


# -- timing -----------------------------------------------------------------


def build_store(size: int, seed: int = 0, per_block: int = 500,
                k: int = lsh.DEFAULT_K) -> tuple[ChainStore, list[tuple[ScanHash, PersonalInfo]]]:
    """Single-authority chain holding ``size`` users (scan hash + one record each)."""
    rng = random.Random(seed)
    key = authority_key(seed, 0)
    store = ChainStore()
    store.append(make_genesis([("authority-0", key)]))
    users = []
    txs = []
    for i in range(size):
        scan = ScanHash(rng.randbytes(k // 8) + bytes(32 - k // 8), k)
        info = random_personal_info(rng)
        users.append((scan, info))
        txs.append(Transaction.create(AnonScanHash(scan), "authority-0", 2 * i, key))
        txs.append(Transaction.create(
            VaccinationRecord(derive_id(info, scan), make_payload(rng, 1)), "authority-0", 2 * i + 1, key))
    for start in range(0, len(txs), per_block):
        tip = store.tip
        store.append(Block.create(tip.height + 1, tip.block_hash, tip.timestamp_us + 15_000_000,
                                  "authority-0", txs[start:start + per_block], key))
    return store, users


def _perturb(scan: ScanHash, rng: random.Random, flips: int) -> ScanHash:
    value = int.from_bytes(scan.value, "big")
    for pos in rng.sample(range(scan.k), flips):
        value ^= 1 << (255 - pos)
    return ScanHash(value.to_bytes(32, "big"), scan.k)


def time_search(sizes: list[int], seed: int = 0, probes: int = 200,
                threshold: float = lsh.DEFAULT_THRESHOLD) -> dict[int, float]:
    """Mean seconds per candidate search + record lookup at each store size.

    Probes are stored users re-scanned with ~20% of hash bits flipped, so each
    lookup exercises both the scan and the ID match.
    """
    out = {}
    for size in sizes:
        store, users = build_store(size, seed)
        rng = random.Random(seed + size)
        queries = []
        for _ in range(probes):
            if users:
                scan, info = rng.choice(users)
                queries.append((_perturb(scan, rng, scan.k // 5), info))
            else:
                queries.append((ScanHash(rng.randbytes(32)), random_personal_info(rng)))
        resolve(*queries[0], store, threshold)  # warm caches
        start = time.perf_counter()
        for q, info in queries:
            resolve(q, info, store, threshold)
        out[size] = (time.perf_counter() - start) / probes
    return out
