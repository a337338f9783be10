import csv
import json
import subprocess
import sys

import pytest

from diwse import cli

RATE_HEADER = "n,mu,delta,eps,d,h,grad_norm,vbar,lambda,n_tilde,hmax_bound,alice_abort_bound,bob_threshold,min_n"


def write_config(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def small_rates(tmp_path):
    return write_config(tmp_path, {"sweep": {"n": [1000, 10**6], "mu": [0.1], "delta": [0.8], "eps": [0.05], "d": [1]}})


class TestOutputs:
    def test_rates_csv_header(self, tmp_path):
        out = tmp_path / "rates.csv"
        assert cli.main(["rates", "--config", small_rates(tmp_path), "--out", str(out)]) == 0
        text = out.read_bytes()
        assert b"\r" not in text
        lines = text.decode().splitlines()
        assert lines[0] == RATE_HEADER
        assert len(lines) == 3
        meta = json.loads((tmp_path / "rates.csv.meta.json").read_text())
        assert meta["command"] == "rates" and meta["seed"] == 0
        assert "smallest_n_with_positive_lambda" in meta

    def test_rates_values_match_library(self, tmp_path):
        from diwse import bounds
        from diwse.params import WseParams

        out = tmp_path / "r.csv"
        cli.main(["rates", "--config", small_rates(tmp_path), "--out", str(out)])
        row = next(csv.DictReader(out.open()))
        rep = bounds.lambda_rate(WseParams(1000, 0.1, 0.8, 0.05, 1))
        assert float(row["lambda"]) == pytest.approx(rep.lambda_, rel=1e-11)
        assert int(row["min_n"]) == rep.min_n_correctness

    def test_simulate_wse_json(self, tmp_path):
        cfg = write_config(tmp_path, {"params": {"n": 300}})
        out = tmp_path / "w.json"
        assert cli.main(["simulate-wse", "--config", cfg, "--runs", "5", "--out", str(out)]) == 0
        d = json.loads(out.read_text())
        assert set(d) == {"command", "version", "seed", "config", "results"}
        assert len(d["results"]["runs"]) == 5
        assert "output" not in d["config"] and "workers" not in d["config"]
        assert d["config"]["params"]["n"] == 300

    def test_simulate_wse_csv_with_sidecar(self, tmp_path):
        cfg = write_config(tmp_path, {"params": {"n": 200}})
        out = tmp_path / "w.csv"
        assert cli.main(["simulate-wse", "--config", cfg, "--runs", "3", "--format", "csv", "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["run"] for r in rows] == ["0", "1", "2"]
        assert "aggregate" in json.loads((tmp_path / "w.csv.meta.json").read_text())

    def test_stdout(self, capsys):
        assert cli.main(["check-bounds"]) == 0
        d = json.loads(capsys.readouterr().out)
        assert d["results"]["all_passed"] is True
        assert len(d["results"]["checks"]) >= 9

    def test_attack_demo(self, tmp_path):
        out = tmp_path / "a.json"
        assert cli.main(["attack-demo", "--runs", "10", "--out", str(out)]) == 0
        agg = json.loads(out.read_text())["results"]["aggregate"]
        assert agg["max_stored_qubits"] == 1

    def test_simulate_pv(self, tmp_path):
        out = tmp_path / "p.json"
        assert cli.main(["simulate-pv", "--runs", "50", "--out", str(out)]) == 0
        res = json.loads(out.read_text())["results"]
        assert set(res["cheats"]) == {"measure-immediately", "random-guess"}
        assert res["honest"]["acceptance_among_completed"] == 1.0


class TestExitCodes:
    @pytest.mark.parametrize(
        "command, config",
        [
            ("simulate-wse", {"params": {"delta": 0.9}}),
            ("simulate-wse", {"params": {"mu": 0}}),
            ("simulate-wse", {"colour": "blue"}),
            ("simulate-wse", {"params": {"n": 10, "q": 1}}),
            ("simulate-wse", {"strategy": {"name": "quantum-bob"}}),
            ("simulate-wse", {"seed": -1}),
            ("simulate-wse", {"engine": "gpu"}),
            ("rates", {"sweep": {"delta": [0.9]}}),
            ("rates", {"scenario": {}}),
            ("simulate-pv", {"cheats": ["teleport"]}),
            ("simulate-pv", {"scenario": {"x_v1": 0.0, "x_p": 1.0, "x_v2": 2.0, "delta_t": 1.5}}),
            ("simulate-pv", {"scenario": {"x_v1": 3.0}}),
            ("simulate-pv", {"format": "csv"}),
            ("check-bounds", {"faults": {"melt": True}}),
            ("attack-demo", {"command": "rates"}),
        ],
    )
    def test_bad_config_exits_2(self, tmp_path, capsys, command, config):
        assert cli.main([command, "--config", write_config(tmp_path, config), "--runs" if command not in ("rates", "check-bounds") else "--seed", "2"]) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_message_names_field(self, tmp_path, capsys):
        cli.main(["simulate-wse", "--config", write_config(tmp_path, {"params": {"delta": 0.9}})])
        err = capsys.readouterr().err
        assert "delta" in err and "0.75" in err

    def test_light_cone_message(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"scenario": {"delta_t": 1.0}})
        assert cli.main(["simulate-pv", "--config", cfg]) == 2
        assert "round trip" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["simulate-wse", "--config", str(p)]) == 2

    def test_missing_file(self, tmp_path):
        assert cli.main(["simulate-wse", "--config", str(tmp_path / "nope.json")]) == 2

    def test_runs_rejected_for_rates(self):
        assert cli.main(["rates", "--runs", "3"]) == 2

    def test_failed_self_check_exits_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"faults": {"swap_test_bases": True}})
        assert cli.main(["check-bounds", "--config", cfg]) == 3
        assert "calibration" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["teleport"])
        assert info.value.code == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "r.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "diwse", "rates", "--config", small_rates(tmp_path), "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().splitlines()[0] == RATE_HEADER
