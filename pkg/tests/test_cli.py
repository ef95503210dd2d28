import csv
import json
import math
import signal
import subprocess
import sys
import urllib.request

import pytest

from supcascade.cli import SWEEP_COLUMNS, main
from supcascade.remote import RemoteClient
from supcascade.trace import ModelObservation, PredictionTarget, TraceDataset, TraceRecord, save_trace, synthesize_trace, without_remote


@pytest.fixture(scope="module")
def trace_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "trace.jsonl"
    save_trace(synthesize_trace(400, 0.7, 0.9, seed=7), path)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class TestRac:
    def test_smoke(self, trace_path, tmp_path):
        assert run("rac", "--trace", trace_path, "--out", tmp_path) == 0
        rows = (tmp_path / "rac.csv").read_text().splitlines()
        assert rows[0] == "r,accuracy"
        assert len(rows) == 401 + 1
        summary = read_json(tmp_path / "summary.json")["rac"]
        assert -0.1 <= summary["auc"] <= 1.1
        assert summary["acc_local"] == 0.7

    def test_random_baseline_and_rerun_identical(self, trace_path, tmp_path):
        for name in ("a", "b"):
            assert run("rac", "--trace", trace_path, "--out", tmp_path / name, "--repeats", 200, "--seed", 5) == 0
        for f in ("rac.csv", "summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert read_json(tmp_path / "a" / "summary.json")["random_baseline"]["repeats"] == 200

    def test_gini_orders_like_max_softmax_for_two_classes(self, trace_path, tmp_path):
        run("rac", "--trace", trace_path, "--out", tmp_path / "msp")
        run("rac", "--trace", trace_path, "--out", tmp_path / "gini", "--quantifier-local", "gini")
        assert (tmp_path / "msp" / "rac.csv").read_text() == (tmp_path / "gini" / "rac.csv").read_text()

    def test_missing_remote_names_id(self, tmp_path, capsys):
        path = tmp_path / "local.jsonl"
        save_trace(without_remote(synthesize_trace(5, 0.6, 0.8, seed=1)), path)
        assert run("rac", "--trace", path, "--out", tmp_path / "o") != 0
        assert "'r0'" in capsys.readouterr().err
        assert not (tmp_path / "o" / "rac.csv").exists()


class TestCalibrate:
    def test_remote_fraction_recheck(self, tmp_path):
        path = tmp_path / "ten.jsonl"
        save_trace(synthesize_trace(10, 0.6, 0.9, seed=2), path)
        out = tmp_path / "th.json"
        assert run("calibrate", "--trace", path, "--target-remote-fraction", 0.5, "--target-fpr", 0.1, "--out", out) == 0
        th = read_json(out)
        assert set(th) == {"threshold_local", "threshold_remote", "achieved"}
        assert run("replay", "--trace", path, "--thresholds", out, "--out", tmp_path / "rep") == 0
        assert read_json(tmp_path / "rep" / "report.json")["remote_fraction"] == 0.5

    def test_monotone_in_fpr(self, trace_path, tmp_path):
        values = []
        for fpr in (0.01, 0.05, 0.10):
            out = tmp_path / f"t{fpr}.json"
            assert run("calibrate", "--trace", trace_path, "--target-fpr", fpr, "--target-remote-fraction", 0.5,
                       "--out", out) == 0
            values.append(read_json(out)["threshold_remote"])
        values = [-math.inf if v == "-inf" else v for v in values]
        assert values == sorted(values)

    def test_contradictory_is_usage_error(self, trace_path, tmp_path):
        with pytest.raises(SystemExit) as info:
            run("calibrate", "--trace", trace_path, "--threshold-local", 0.8, "--target-remote-fraction", 0.3,
                "--target-fpr", 0.1, "--out", tmp_path / "x.json")
        assert info.value.code == 2


def four_record_trace(path):
    def obs(conf, ok):
        p = conf if ok else 1 - conf
        return ModelObservation(prediction=0 if ok else 1, softmax=(p, 1 - p))

    rows = [(0.9, True, 0.95, True), (0.6, False, 0.9, True), (0.8, True, 0.7, False), (0.55, False, 0.6, True)]
    recs = tuple(
        TraceRecord(f"q{i}", PredictionTarget("class", label=0), obs(cl, ol), obs(cr, orr))
        for i, (cl, ol, cr, orr) in enumerate(rows)
    )
    save_trace(TraceDataset(recs), path)
    return path


class TestEvaluate:
    def test_accept_everything(self, trace_path, tmp_path):
        out = tmp_path / "r.json"
        assert run("evaluate", "--trace", trace_path, "--threshold-local=-inf", "--threshold-remote=-inf",
                   "--out", out) == 0
        sup = read_json(out)["supervised"]
        assert sup["delta"] == 1
        assert sup["supervised_accuracy"] == 0.7

    def test_hand_counts(self, tmp_path):
        path = four_record_trace(tmp_path / "four.jsonl")
        out = tmp_path / "r.json"
        assert run("evaluate", "--trace", path, "--threshold-local", 0.7, "--threshold-remote", 0.8,
                   "--latency-local", 0.05, "--latency-remote", 0.32, "--cost-per-call", 0.01, "--out", out) == 0
        rep = read_json(out)
        # q0 local, q1 remote (correct), q2 local, q3 rejected (its remote answer was right)
        sup = rep["supervised"]
        assert sup["delta"] == 0.75
        assert sup["supervised_accuracy"] == 1.0
        assert sup["fpr_achieved"] == 0.25
        assert sup["remote_fraction"] == 0.5
        assert rep["cost"] == {"remote_calls": 2, "total_cost": 0.02, "saved_fraction": 0.5}
        assert rep["latency"]["mean_s"] == pytest.approx(0.05 + 0.5 * 0.32)
        assert set(rep) >= {"rac", "supervised", "latency", "cost"}
        assert set(sup["s_beta"]) == {"0.5", "1", "2"}

    def test_baseline_mode(self, tmp_path):
        path = four_record_trace(tmp_path / "four.jsonl")
        out = tmp_path / "r.json"
        assert run("evaluate", "--trace", path, "--baseline", "--threshold-local", 0.7, "--out", out) == 0
        rep = read_json(out)
        assert rep["mode"] == "baseline"
        assert rep["supervised"]["delta"] == 0.5
        assert rep["supervised"]["remote_fraction"] == 0
        assert rep["thresholds"]["threshold_remote"] is None

    def test_config_file_and_precedence(self, trace_path, tmp_path, monkeypatch):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'trace = "{trace_path}"\nthreshold_local = "-inf"\nthreshold_remote = 0.99\n')
        monkeypatch.setenv("CASCADE_CONFIG", str(cfg))
        assert run("evaluate", "--threshold-remote=-inf", "--out", tmp_path / "a.json") == 0
        assert read_json(tmp_path / "a.json")["supervised"]["delta"] == 1

    def test_unknown_config_key(self, trace_path, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"trace": trace_path, "thresold_local": 0.5}))
        with pytest.raises(SystemExit) as info:
            run("evaluate", "--config", cfg, "--out", tmp_path / "a.json")
        assert info.value.code == 2


class TestSweep:
    def test_grid_matches_individual_runs(self, trace_path, tmp_path):
        out = tmp_path / "s.csv"
        assert run("sweep", "--trace", trace_path, "--target-fpr", 0.01, 0.05, 0.1,
                   "--target-remote-fraction", 0.3, 0.5, 0.7, "--out", out) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 9
        assert list(rows[0]) == list(SWEEP_COLUMNS)
        row = rows[4]
        single = tmp_path / "one.json"
        run("evaluate", "--trace", trace_path, "--target-fpr", row["target_fpr"],
            "--target-remote-fraction", row["target_remote_fraction"], "--out", single)
        sup = read_json(single)["supervised"]
        assert float(row["delta"]) == sup["delta"]
        assert float(row["s_1"]) == sup["s_beta"]["1"]

    def test_baseline_rows(self, trace_path, tmp_path):
        out = tmp_path / "s.csv"
        assert run("sweep", "--trace", trace_path, "--target-fpr", 0.05, "--target-remote-fraction", 0.5,
                   "--include-baseline", "--out", out) == 0
        with open(out, newline="") as fh:
            modes = [r["mode"] for r in csv.DictReader(fh)]
        assert modes == ["baseline", "cascade"]

    def test_empty_targets(self, trace_path, tmp_path):
        with pytest.raises(SystemExit) as info:
            run("sweep", "--trace", trace_path, "--target-fpr", 0.05, "--out", tmp_path / "s.csv")
        assert info.value.code == 2


class TestReplay:
    def test_outcomes_in_order(self, trace_path, tmp_path):
        assert run("replay", "--trace", trace_path, "--threshold-local", 0.8, "--threshold-remote", 0.7,
                   "--out", tmp_path) == 0
        lines = (tmp_path / "outcomes.jsonl").read_text().splitlines()
        assert [json.loads(l)["id"] for l in lines] == [f"r{i:03d}" for i in range(400)]

    def test_latency_model(self, trace_path, tmp_path):
        # pick the local threshold that forwards exactly 55%
        assert run("replay", "--trace", trace_path, "--target-remote-fraction", 0.55, "--threshold-remote=-inf",
                   "--latency-local", 0.05, "--latency-remote", 0.32, "--out", tmp_path) == 0
        rep = read_json(tmp_path / "report.json")
        assert rep["remote_fraction"] == 0.55
        assert rep["latency"]["mean_s"] == pytest.approx(0.226)

    def test_fallback_with_stub_down(self, trace_path, tmp_path):
        assert run("replay", "--trace", trace_path, "--threshold-local", "inf", "--threshold-remote", 0.5,
                   "--remote-url", "http://127.0.0.1:9", "--timeout", 1, "--fallback", "serve-local",
                   "--out", tmp_path) == 0
        outcomes = [json.loads(l) for l in (tmp_path / "outcomes.jsonl").read_text().splitlines()]
        assert all(o["decision"] == "local_accept" and o["degraded"] for o in outcomes)

    def test_stub_down_without_fallback_fails(self, trace_path, tmp_path, capsys):
        assert run("replay", "--trace", trace_path, "--threshold-local", "inf", "--threshold-remote", 0.5,
                   "--remote-url", "http://127.0.0.1:9", "--timeout", 1, "--out", tmp_path) == 1
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "outcomes.jsonl").exists()


def _start_stub(trace_path, *extra):
    proc = subprocess.Popen(
        [sys.executable, "-m", "supcascade", "serve-stub", "--trace", trace_path, "--port", "0", *extra],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    assert "http://" in line, proc.stderr.read()
    return proc, line.strip().rsplit(" ", 1)[-1]


class TestServeStub:
    def test_health_and_clean_exit(self, trace_path):
        proc, url = _start_stub(trace_path)
        try:
            with urllib.request.urlopen(url + "/healthz", timeout=5) as resp:
                assert resp.status == 200
        finally:
            proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0

    def test_injected_latency_and_wire_replay(self, trace_path, tmp_path):
        proc, url = _start_stub(trace_path, "--latency-ms", "50")
        try:
            assert RemoteClient(url).predict("r000").latency_s >= 0.05
            assert run("replay", "--trace", trace_path, "--threshold-local", 0.8, "--threshold-remote", 0.7,
                       "--remote-url", url, "--workers", 8, "--out", tmp_path / "http") == 0
        finally:
            proc.send_signal(signal.SIGINT)
        assert proc.wait(timeout=10) == 0
        run("replay", "--trace", trace_path, "--threshold-local", 0.8, "--threshold-remote", 0.7,
            "--out", tmp_path / "local")

        def decisions(d):
            return [json.loads(l)["decision"] for l in (tmp_path / d / "outcomes.jsonl").read_text().splitlines()]

        assert decisions("http") == decisions("local")

    def test_bad_port(self, trace_path):
        res = subprocess.run(
            [sys.executable, "-m", "supcascade", "serve-stub", "--trace", trace_path, "--port", "99999"],
            capture_output=True, text=True, timeout=30,
        )
        assert res.returncode != 0
        assert "port" in res.stderr
