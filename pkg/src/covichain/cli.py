"""Command line entry point: ``covichain <command> ...``."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat

from . import bench, ledger, lsh
from .identity import IdentityError, PersonalInfo
from .ledger import ChainStore, make_genesis
from .lsh import LshParams
from .sim import SimConfig, replica_agreement
from .templates import (
    PopulationSpec,
    TemplateError,
    generate_population_arrays,
    parse_template,
    write_template,
)
from .workflow import (
    CenterConfig,
    LocalChain,
    Lookup,
    PresentationRequest,
    Register,
    Status,
    WorkflowError,
    present,
)

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_NOT_FOUND = 3
DEFAULT_CHAIN = "covichain.cvch"


class CliError(Exception):
    pass


# -- configuration ----------------------------------------------------------


def load_node_config(path: str | None) -> tuple[LshParams, float]:
    """Read ``[lsh] k, n, seed (hex), threshold`` from an INI-style node config."""
    if path is None:
        return LshParams(), lsh.DEFAULT_THRESHOLD
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise CliError(f"cannot read config {path}")
    sec = cp["lsh"] if cp.has_section("lsh") else {}
    params = LshParams(
        k=int(sec.get("k", lsh.DEFAULT_K)),
        n=int(sec.get("n", 9600)),
        seed=bytes.fromhex(sec["seed"]) if "seed" in sec else lsh.DEFAULT_SEED,
    )
    return params, float(sec.get("threshold", lsh.DEFAULT_THRESHOLD))


def _key_path(chain: Path) -> Path:
    return chain.with_name(chain.name + ".key")


def _write_key(path: Path, key: Ed25519PrivateKey, name: str) -> None:
    raw = key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump({"name": name, "private_key": raw.hex()}, fh)


def _read_key(path: Path) -> tuple[str, Ed25519PrivateKey]:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"authority key {path} not found") from None
    return data["name"], Ed25519PrivateKey.from_private_bytes(bytes.fromhex(data["private_key"]))


def init_chain(chain: Path, name: str = "center-0") -> None:
    if chain.exists():
        raise CliError(f"{chain} already exists")
    key = Ed25519PrivateKey.generate()
    store = ChainStore()
    store.append(make_genesis([(name, key)]))
    _write_key(_key_path(chain), key, name)
    ledger.persist(store, chain)


def _open_chain(chain: Path, create: bool) -> ChainStore:
    if not chain.exists():
        if not create:
            raise CliError(f"chain file {chain} not found")
        init_chain(chain)
    return ledger.load(chain)


def _read_record(path: str) -> bytes:
    record = json.loads(Path(path).read_text())
    return json.dumps(record, separators=(",", ":"), sort_keys=True).encode("utf-8")


# -- commands ---------------------------------------------------------------


def cmd_enroll(args) -> int:
    params, threshold = load_node_config(args.config)
    chain = Path(args.chain)
    store = _open_chain(chain, create=True)
    name, key = _read_key(_key_path(chain))
    if store.registry.get(name) is None:
        raise CliError(f"authority {name} is not registered on {chain}")
    fv, mask = parse_template(args.template)
    info = PersonalInfo.parse(args.dob, args.gender, args.pin)
    nonce = sum(len(b.transactions) for b in store.blocks)
    center = CenterConfig(name, key, params, threshold, next_nonce=nonce)
    req = PresentationRequest(fv, mask, info, Register(_read_record(args.record)))
    outcome = present(req, store, center, LocalChain(store, name, key))
    ledger.persist(store, chain)
    print(json.dumps(outcome.to_json(), indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    params, threshold = load_node_config(args.config)
    store = _open_chain(Path(args.chain), create=False)
    fv, mask = parse_template(args.template)
    info = PersonalInfo.parse(args.dob, args.gender, args.pin)
    center = CenterConfig("verifier", Ed25519PrivateKey.generate(), params, threshold)
    outcome = present(PresentationRequest(fv, mask, info, Lookup()), store, center)
    print(json.dumps(outcome.to_json(), indent=2))
    return EXIT_OK if outcome.status is Status.RECORDS_FOUND else EXIT_NOT_FOUND


def cmd_chain_init(args) -> int:
    init_chain(Path(args.chain), args.name)
    print(json.dumps({"chain": args.chain, "key": str(_key_path(Path(args.chain)))}))
    return EXIT_OK


def cmd_chain_dump(args) -> int:
    store = _open_chain(Path(args.chain), create=False)
    if args.json:
        print(ledger.dump_json(store))
    else:
        for b in store.blocks:
            print(f"{b.height:6d} {b.block_hash.hex()} {b.proposer} txs={len(b.transactions)}")
    return EXIT_OK


def cmd_template_synth(args) -> int:
    spec = PopulationSpec(num_subjects=args.subject + 1, scans_per_subject=args.scan + 1,
                          intra_flip_rate=args.intra, mask_occlusion_rate=args.occlusion,
                          seed=args.seed, n=args.n)
    pop = generate_population_arrays(spec)
    for subject, scan, fv, mask in pop.rows():
        if subject == args.subject and scan == args.scan:
            write_template(fv, mask, args.out, binary=args.binary)
            return EXIT_OK
    raise CliError("requested scan not generated")


def _emit(report, out: str | None, rows: list[dict] | None = None, as_csv: bool = False) -> None:
    if as_csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps(report, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_sim_run(args) -> int:
    cfg = SimConfig(num_nodes=args.nodes, block_interval=args.block_interval,
                    rng_seed=args.seed, unlink_delay=args.unlink_delay)
    sim, _ = bench.simulate_enrollments(cfg, args.users, n=args.n,
                                        arrival_window=args.arrival_window)
    report = sim.report()
    if args.chain_out:
        ledger.persist(sim.nodes[0].store, args.chain_out)
    _emit(report, args.out)
    return EXIT_OK if replica_agreement(sim).ok else 1


def cmd_bench(args) -> int:
    if args.what == "storage":
        model = bench.StorageModel(num_users=args.users or 1_000_000,
                                   block_interval_s=args.block_interval)
        est = bench.estimate_storage(model)
        report = {"model": dataclasses.asdict(model),
                  "estimate": est,
                  "measured_encoding_bytes": bench.measured_tx_sizes()}
        row = {"num_users": model.num_users, "block_interval_s": model.block_interval_s, **est}
        _emit(report, args.out, [row], args.csv)
    elif args.what == "accuracy":
        spec = PopulationSpec(num_subjects=args.users or 500, scans_per_subject=args.scans,
                              intra_flip_rate=args.intra, seed=args.seed)
        rep = bench.run_accuracy(spec, args.threshold, SimConfig(rng_seed=args.seed),
                                 impostor_probes=args.impostors)
        row = {"num_subjects": spec.num_subjects, "intra_flip_rate": spec.intra_flip_rate,
               **rep.to_json()}
        _emit(row, args.out, [row], args.csv)
    elif args.what == "census":
        spec = PopulationSpec(num_subjects=args.users or 10_000, scans_per_subject=1,
                              seed=args.seed)
        rep = bench.collision_census(spec)
        row = {k: v for k, v in rep.items() if k != "bit_one_fraction"}
        _emit(rep, args.out, [row], args.csv)
    else:
        sizes = args.sizes or [100, 1000, 10000]
        res = bench.time_search(sizes, seed=args.seed)
        rows = [{"store_size": s, "mean_search_s": t} for s, t in res.items()]
        _emit({"timings": rows}, args.out, rows, args.csv)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _person_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--template", required=True, help="template file (text or binary)")
    p.add_argument("--dob", required=True, help="date of birth, dd/mm/yyyy")
    p.add_argument("--gender", required=True, help="M, F or O")
    p.add_argument("--pin", help="optional 4-12 digit PIN")
    p.add_argument("--chain", default=DEFAULT_CHAIN)
    p.add_argument("--config", help="node config with an [lsh] section")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covichain")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enroll", help="register a vaccination record")
    _person_args(p)
    p.add_argument("--record", required=True, help="JSON vaccination record (<=150 bytes compact)")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", help="look up a user's vaccination records")
    _person_args(p)
    p.set_defaults(func=cmd_verify)

    chain = sub.add_parser("chain").add_subparsers(dest="chain_command", required=True)
    p = chain.add_parser("init")
    p.add_argument("--chain", default=DEFAULT_CHAIN)
    p.add_argument("--name", default="center-0")
    p.set_defaults(func=cmd_chain_init)
    p = chain.add_parser("dump")
    p.add_argument("--chain", default=DEFAULT_CHAIN)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_chain_dump)

    tpl = sub.add_parser("template").add_subparsers(dest="template_command", required=True)
    p = tpl.add_parser("synth", help="write one scan of a synthetic population")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--scan", type=int, default=0)
    p.add_argument("--n", type=int, default=9600)
    p.add_argument("--intra", type=float, default=0.15)
    p.add_argument("--occlusion", type=float, default=0.1)
    p.add_argument("--binary", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_template_synth)

    simp = sub.add_parser("sim").add_subparsers(dest="sim_command", required=True)
    p = simp.add_parser("run")
    p.add_argument("--nodes", type=int, default=6)
    p.add_argument("--block-interval", type=float, default=15.0)
    p.add_argument("--unlink-delay", type=float, default=600.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--n", type=int, default=9600)
    p.add_argument("--arrival-window", type=float, default=3600.0)
    p.add_argument("--out")
    p.add_argument("--chain-out", help="persist node 0's chain here")
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("bench")
    p.add_argument("what", choices=["accuracy", "storage", "census", "timing"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--users", type=int)
    p.add_argument("--scans", type=int, default=4)
    p.add_argument("--intra", type=float, default=0.15)
    p.add_argument("--threshold", type=float, default=lsh.DEFAULT_THRESHOLD)
    p.add_argument("--impostors", type=int, default=10_000)
    p.add_argument("--block-interval", type=float, default=15.0)
    p.add_argument("--sizes", type=int, nargs="*")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, TemplateError, IdentityError, WorkflowError,
            ledger.LedgerViolation, ledger.ChainCorruption, ValueError) as exc:
        print(f"covichain: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
