import csv
import json
import socket
import threading
import time

import pytest

from smtpflow.cli import main, udp_batches
from smtpflow.model import FLOW_FIELDS, FlowRecord
from smtpflow.netflow import NetflowV5Header, serialize_v5

HEADER = ",".join(FLOW_FIELDS)
REPRESENTATIVE_ROWS = [
    "10.0.0.1,10.0.0.2,4021,25,6,0,1000,3,250,2",
    "10.0.0.1,10.0.0.2,4022,25,6,0,1000,7,600,27",
    "10.0.0.1,10.0.0.2,4023,25,6,0,1000,15,5000,27",
]


def write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def fixture_prefix(tmp_path_factory):
    prefix = tmp_path_factory.mktemp("synth") / "run"
    assert main(["synth", "--output", str(prefix), "--seed", "0"]) == 0
    return prefix


def test_classify_representative_rows(tmp_path):
    out = tmp_path / "out.csv"
    src = write(tmp_path / "in.csv", [HEADER] + REPRESENTATIVE_ROWS)
    assert main(["classify", "--input", src, "--output", str(out)]) == 0
    rows = read_rows(out)
    assert [r["class"] for r in rows] == ["failed", "rejected", "accepted"]
    assert [r["bpp_vote"] for r in rows] == ["rejected", "rejected", "accepted"]
    assert rows[1]["bytes"] == "600"


def test_classify_missing_input(tmp_path, capsys):
    code = main(["classify", "--input", str(tmp_path / "nope.csv"), "--output", str(tmp_path / "o")])
    assert code == 2
    assert "no such file" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_classify_header_only(tmp_path):
    out = tmp_path / "out.csv"
    assert main(["classify", "--input", write(tmp_path / "in.csv", [HEADER]),
                 "--output", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1


def test_malformed_rows_lenient_and_strict(tmp_path, capsys):
    src = write(tmp_path / "in.csv", [HEADER, REPRESENTATIVE_ROWS[0], "10.0.0.1,10.0.0.2,1,25,6,0,1,7,abc,0"])
    out = tmp_path / "out.csv"
    assert main(["classify", "--input", src, "--output", str(out)]) == 0
    assert "line 3" in capsys.readouterr().err
    assert len(read_rows(out)) == 1
    strict = tmp_path / "strict.csv"
    assert main(["classify", "--input", src, "--output", str(strict), "--strict"]) == 2
    assert not strict.exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".tmp")] == []


def test_missing_header_is_bad_input(tmp_path):
    src = write(tmp_path / "in.csv", REPRESENTATIVE_ROWS)
    assert main(["classify", "--input", src, "--output", str(tmp_path / "o.csv")]) == 2


def test_classify_with_thresholds_file(tmp_path):
    src = write(tmp_path / "in.csv", [HEADER] + REPRESENTATIVE_ROWS)
    conf = write(tmp_path / "t.conf", ["# tighter", "byte_lo = 200", "byte_hi=1000"])
    out = tmp_path / "out.csv"
    assert main(["classify", "--input", src, "--output", str(out), "--thresholds", conf]) == 0
    assert [r["bytes_vote"] for r in read_rows(out)] == ["rejected", "rejected", "accepted"]
    bad = write(tmp_path / "bad.conf", ["byte_low=3"])
    assert main(["classify", "--input", src, "--output", str(out), "--thresholds", bad]) == 2


def v5_datagram():
    flows = [FlowRecord("10.0.0.1", "10.0.0.2", 4021, 25, 6, 1_203_296_400_000 + 1000,
                        1_203_296_400_000 + 2000, 7, 600, 27)]
    header = NetflowV5Header(count=1, sys_uptime_ms=3_600_000, unix_secs=1_203_300_000)
    return serialize_v5(header, flows)


def test_classify_binary_v5(tmp_path):
    src = tmp_path / "flows.v5"
    src.write_bytes(v5_datagram() * 3)
    out = tmp_path / "out.csv"
    assert main(["classify", "--input", str(src), "--output", str(out)]) == 0
    assert [r["class"] for r in read_rows(out)] == ["rejected"] * 3


def test_label_from_log(tmp_path):
    flows = write(tmp_path / "f.csv", [HEADER,
                                       "10.0.0.9,10.0.0.2,1,25,6,100000,100100,7,600,27",
                                       "10.0.0.9,10.0.0.2,2,25,6,300000,300100,2,120,2"])
    log = write(tmp_path / "mail.log", ["100500 10.0.0.9 10.0.0.2 REJECT:DNSBL"])
    out = tmp_path / "labeled.csv"
    assert main(["label", "--input", flows, "--log", log, "--output", str(out)]) == 0
    rows = read_rows(out)
    assert [(r["label"], r["reason"], r["label_source"]) for r in rows] == [
        ("rejected", "DNSBL", "server_log"), ("failed", "", "server_log")]


def test_label_from_lists(tmp_path):
    flows = write(tmp_path / "f.csv", [HEADER,
                                       "192.0.2.1,10.0.0.2,1,25,6,0,1,7,600,27",
                                       "198.51.100.1,10.0.0.2,1,25,6,0,1,20,9000,27",
                                       "203.0.113.1,10.0.0.2,1,25,6,0,1,20,9000,27"])
    black = write(tmp_path / "black.txt", ["192.0.2.0/24"])
    white = write(tmp_path / "white.txt", ["198.51.100.1"])
    out = tmp_path / "labeled.csv"
    assert main(["label", "--input", flows, "--black", black, "--white", white,
                 "--output", str(out)]) == 0
    assert [r["label"] for r in read_rows(out)] == ["rejected", "accepted"]


def test_label_source_rules(tmp_path, capsys):
    flows = write(tmp_path / "f.csv", [HEADER])
    log = write(tmp_path / "mail.log", ["1 10.0.0.9 10.0.0.2 ACCEPT"])
    out = str(tmp_path / "o.csv")
    assert main(["label", "--input", flows, "--log", log, "--black", log, "--output", out]) == 2
    assert "BothSourcesGiven" in capsys.readouterr().err
    assert main(["label", "--input", flows, "--output", out]) == 2
    assert "NoSourceGiven" in capsys.readouterr().err


def test_synth_outputs(fixture_prefix):
    for suffix in ("flows.csv", "log", "truth.csv", "labeled.csv", "black.txt", "white.txt"):
        assert (fixture_prefix.parent / f"run.{suffix}").stat().st_size > 0
    truth = read_rows(f"{fixture_prefix}.truth.csv")
    assert len(truth) == 100_000
    assert truth[0].keys() == {"flow_id", "true_class", "reason"}


def test_report_on_synthetic_fixture(fixture_prefix, tmp_path):
    out = tmp_path / "report.json"
    assert main(["report", "--input", f"{fixture_prefix}.labeled.csv", "--output", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["reject_rate"] == pytest.approx(0.783, abs=0.003)
    (server,) = report["servers"]
    assert server["diurnal_offset_hours"] is not None
    assert 0 < server["rating"] < 1
    for cls in ("failed", "rejected", "accepted"):
        assert (tmp_path / f"report.{cls}.cdf.csv").exists()


def test_report_partial_fields(tmp_path, capsys):
    labeled = tmp_path / "l.csv"
    rows = ["10.0.0.9,10.0.0.2,1,25,6,0,1,20,9000,27,accepted,,synthetic"] * 3
    write(labeled, [HEADER + ",label,reason,label_source"] + rows)
    out = tmp_path / "report.json"
    assert main(["report", "--input", str(labeled), "--output", str(out)]) == 0
    (server,) = json.loads(out.read_text())["servers"]
    assert server["diurnal_offset_hours"] is None
    assert server["sharpness"] is None
    assert server["rating"] == 1.0
    assert "note:" in capsys.readouterr().err


def accuracy(capsys):
    out = capsys.readouterr().out
    return float(out.strip().splitlines()[-1].split()[-1])


def test_eval_and_calibrate(fixture_prefix, tmp_path, capsys):
    labeled = f"{fixture_prefix}.labeled.csv"
    assert main(["eval", "--input", labeled]) == 0
    default_acc = accuracy(capsys)
    assert default_acc >= 0.94
    thresholds = tmp_path / "fit.conf"
    assert main(["calibrate", "--input", labeled, "--output", str(thresholds)]) == 0
    assert "byte_lo=" in thresholds.read_text()
    assert main(["eval", "--input", labeled, "--thresholds", str(thresholds)]) == 0
    assert accuracy(capsys) >= default_acc - 0.005


def test_eval_empty_input(tmp_path):
    labeled = write(tmp_path / "l.csv", [HEADER + ",label,reason,label_source"])
    assert main(["eval", "--input", labeled]) != 0


def test_label_with_synthetic_log_matches_truth(fixture_prefix, tmp_path):
    out = tmp_path / "relabeled.csv"
    assert main(["label", "--input", f"{fixture_prefix}.flows.csv", "--log", f"{fixture_prefix}.log",
                 "--output", str(out)]) == 0
    got = [r["label"] for r in read_rows(out)]
    truth = [r["true_class"] for r in read_rows(f"{fixture_prefix}.truth.csv")]
    assert got == truth


def test_outputs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for prefix in (a, b):
        assert main(["synth", "--output", str(prefix), "--seed", "7", "--sessions", "3000"]) == 0
    for suffix in ("flows.csv", "log", "labeled.csv", "black.txt"):
        assert (tmp_path / f"a.{suffix}").read_bytes() == (tmp_path / f"b.{suffix}").read_bytes()
    for name in ("ca.csv", "cb.csv"):
        assert main(["classify", "--input", f"{a}.flows.csv", "--output", str(tmp_path / name)]) == 0
    assert (tmp_path / "ca.csv").read_bytes() == (tmp_path / "cb.csv").read_bytes()
    for name in ("ra.json", "rb.json"):
        assert main(["report", "--input", f"{a}.labeled.csv", "--output", str(tmp_path / name)]) == 0
    assert (tmp_path / "ra.json").read_bytes() == (tmp_path / "rb.json").read_bytes()


def test_synth_config_file(tmp_path):
    conf = write(tmp_path / "s.conf", ["n_sessions = 500", "p_connect_fail = 0.2",
                                       "servers = 10.1.0.25:2, 10.2.0.25:1", "reason.DNSBL = 1"])
    assert main(["synth", "--config", conf, "--output", str(tmp_path / "s")]) == 0
    truth = read_rows(tmp_path / "s.truth.csv")
    assert len(truth) == 500
    assert {r["reason"] for r in truth} <= {"", "DNSBL"}
    bad = write(tmp_path / "bad.conf", ["p_connect_fail = 2"])
    assert main(["synth", "--config", bad, "--output", str(tmp_path / "x")]) == 2


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["--help"]) == 0


def test_udp_batches_in_order():
    ready = threading.Event()
    addr = {}

    def on_ready(sockname):
        addr["value"] = sockname
        ready.set()

    out = []

    def consume():
        out.extend(udp_batches("127.0.0.1", 0, max_packets=3, timeout=5, ready=on_ready))

    thread = threading.Thread(target=consume)
    thread.start()
    assert ready.wait(5)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as tx:
        tx.sendto(v5_datagram(), addr["value"])
        tx.sendto(b"junk", addr["value"])
        tx.sendto(v5_datagram(), addr["value"])
    thread.join(10)
    assert [len(batch) for batch in out] == [1, 1]


def test_collect_writes_csv(tmp_path):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    out = tmp_path / "collected.csv"
    result = {}
    thread = threading.Thread(target=lambda: result.setdefault("code", main(
        ["collect", "--listen", f"127.0.0.1:{port}", "--output", str(out),
         "--max-packets", "2", "--timeout", "10"])))
    thread.start()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as tx:
        deadline = time.monotonic() + 10
        while thread.is_alive() and time.monotonic() < deadline:
            tx.sendto(v5_datagram(), ("127.0.0.1", port))
            time.sleep(0.05)
    thread.join(10)
    assert result["code"] == 0
    rows = read_rows(out)
    assert len(rows) == 2
    assert rows[0]["bytes"] == "600"
