import json
import os
import subprocess
import sys

import pytest

from covichain.cli import EXIT_ERROR, EXIT_NOT_FOUND, EXIT_OK, main


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workspace(tmp_path, capsys):
    for scan in range(3):
        assert _run(capsys, "template", "synth", "--seed", "4", "--subject", "0", "--scan", str(scan),
                    "--out", str(tmp_path / f"s{scan}.tpl"))[0] == EXIT_OK
    _run(capsys, "template", "synth", "--seed", "4", "--subject", "1", "--scan", "0",
         "--binary", "--out", str(tmp_path / "other.tplb"))
    (tmp_path / "dose1.json").write_text(json.dumps({"v": "EU/1/20/1528", "dose": 1}))
    (tmp_path / "dose2.json").write_text(json.dumps({"v": "EU/1/20/1528", "dose": 2}))
    return tmp_path


def _person(ws, tpl, dob="01/01/1990", gender="M"):
    return ["--template", str(ws / tpl), "--dob", dob, "--gender", gender,
            "--chain", str(ws / "c.cvch")]


def test_enroll_verify_booster(workspace, capsys):
    ws = workspace
    code, out, _ = _run(capsys, "enroll", *_person(ws, "s0.tpl"), "--record", str(ws / "dose1.json"))
    assert code == EXIT_OK
    enrolled = json.loads(out)
    assert enrolled["status"] == "NewUserEnrolled"
    assert oct(os.stat(ws / "c.cvch.key").st_mode & 0o777) == "0o600"

    code, out, _ = _run(capsys, "verify", *_person(ws, "s1.tpl"))
    assert code == EXIT_OK
    found = json.loads(out)
    assert found["status"] == "RecordsFound" and found["user_id"] == enrolled["user_id"]

    code, out, _ = _run(capsys, "enroll", *_person(ws, "s2.tpl"), "--record", str(ws / "dose2.json"))
    assert json.loads(out)["status"] == "ExistingUserRecordAdded"
    code, out, _ = _run(capsys, "verify", *_person(ws, "s0.tpl"))
    assert [json.loads(r["payload"])["dose"] for r in json.loads(out)["records"]] == [2, 1]


def test_verify_not_found(workspace, capsys):
    ws = workspace
    _run(capsys, "enroll", *_person(ws, "s0.tpl"), "--record", str(ws / "dose1.json"))
    code, out, _ = _run(capsys, "verify", *_person(ws, "other.tplb"))
    assert code == EXIT_NOT_FOUND
    assert json.loads(out)["status"] == "NotFound"
    code, _, _ = _run(capsys, "verify", *_person(ws, "s1.tpl", dob="02/01/1990"))
    assert code == EXIT_NOT_FOUND


def test_errors_exit_two(workspace, capsys):
    ws = workspace
    code, _, err = _run(capsys, "verify", *_person(ws, "s0.tpl"))
    assert code == EXIT_ERROR and "not found" in err
    code, _, err = _run(capsys, "enroll", *_person(ws, "s0.tpl", dob="31/02/1990"),
                        "--record", str(ws / "dose1.json"))
    assert code == EXIT_ERROR
    (ws / "big.json").write_text(json.dumps({"note": "x" * 200}))
    code, _, err = _run(capsys, "enroll", *_person(ws, "s0.tpl"), "--record", str(ws / "big.json"))
    assert code == EXIT_ERROR and "150" in err
    (ws / "bad.tpl").write_text("COVICHAIN-TPL v1\nn=4\n10x0\n1111\n")
    code, _, err = _run(capsys, "verify", *_person(ws, "bad.tpl"))
    assert code == EXIT_ERROR and "offset" in err


def test_chain_init_and_dump(tmp_path, capsys):
    chain = str(tmp_path / "c.cvch")
    assert _run(capsys, "chain", "init", "--chain", chain, "--name", "clinic")[0] == EXIT_OK
    assert _run(capsys, "chain", "init", "--chain", chain)[0] == EXIT_ERROR
    code, out, _ = _run(capsys, "chain", "dump", "--chain", chain, "--json")
    blocks = json.loads(out)
    assert code == EXIT_OK and len(blocks) == 1
    assert blocks[0]["prev_hash"] == "0" * 64 and blocks[0]["proposer"] == "clinic"
    assert blocks[0]["transactions"][0]["kind"] == "AUTHORITY_CERT"
    code, out, _ = _run(capsys, "chain", "dump", "--chain", chain)
    assert out.split()[0] == "0"


def test_config_file(workspace, capsys):
    ws = workspace
    (ws / "node.ini").write_text("[lsh]\nk = 128\nthreshold = 0.35\n")
    args = _person(ws, "s0.tpl") + ["--config", str(ws / "node.ini")]
    code, out, _ = _run(capsys, "enroll", *args, "--record", str(ws / "dose1.json"))
    assert code == EXIT_OK
    scan = json.loads(out)["matched_scan_hash"]
    assert scan.endswith("0" * 32)
    code, _, _ = _run(capsys, "verify", *args)
    assert code == EXIT_OK


def test_sim_run_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    code, _, _ = _run(capsys, "sim", "run", "--nodes", "6", "--block-interval", "15", "--seed", "2",
                      "--users", "12", "--arrival-window", "300", "--out", str(out),
                      "--chain-out", str(tmp_path / "sim.cvch"))
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert report["agreement"]["ok"]
    assert len(report["user_placements"]) == 12
    assert all(a != b for a, b in report["user_placements"].values())
    assert {"SubmitTx", "DeliverTx", "ProposeBlock", "DeliverBlock"} <= set(report["event_counts"])
    assert _run(capsys, "chain", "dump", "--chain", str(tmp_path / "sim.cvch"))[0] == EXIT_OK


def test_bench_storage_json_and_csv(capsys):
    code, out, _ = _run(capsys, "bench", "storage")
    rep = json.loads(out)
    assert code == EXIT_OK and rep["estimate"]["blocks_per_day"] == 5760
    code, out, _ = _run(capsys, "bench", "storage", "--csv")
    header, row = out.strip().splitlines()
    assert header.startswith("num_users,block_interval_s,blocks_per_day")
    assert row.split(",")[2] == "5760.0"


def test_bench_accuracy_small(capsys):
    code, out, _ = _run(capsys, "bench", "accuracy", "--users", "20", "--scans", "2",
                        "--impostors", "50")
    rep = json.loads(out)
    assert code == EXIT_OK and rep["genuine_probes"] == 20 and "false_accepts" in rep


def test_bench_timing_csv(capsys):
    code, out, _ = _run(capsys, "bench", "timing", "--sizes", "0", "50", "--csv")
    lines = out.strip().splitlines()
    assert code == EXIT_OK and lines[0] == "store_size,mean_search_s" and len(lines) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "covichain", "bench", "storage"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["estimate"]["blocks_per_day"] == 5760
