import json

import numpy as np
import pytest

from swimrl.agents import load_agent
from swimrl.cli import ResultRecord, export_csv, format_value, read_csv, run

SMALL = {
    "flow": {"type": "bk", "D": 0.04, "d": 3, "kappa": 1e-4},
    "integrator": {"dt": 0.01},
    "episode": {"horizon": 0.5, "beta": 0.1, "episodes": 3, "eval_episodes": 10, "curve_every": 1,
                "curve_episodes": 4},
    "baseline": {"phi": 0.574166, "d_tilde": 0.4},
    "agent": {"kind": "ap", "hidden": [8, 8]},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def outputs(out, suffix):
    return sorted(p for p in out.iterdir() if p.name.endswith(suffix))


def test_missing_config_exits_1(tmp_path, capsys):
    assert run(["eval", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run(["train"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_exits_1(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["episode"]["horizn"] = 1.0
    assert run(["eval", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 1
    assert "episode.horizn" in capsys.readouterr().err


def test_train_is_deterministic_and_checkpoints(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--config", cfg, "--seed", "7", "--out", str(a), "--quiet"]) == 0
    assert run(["train", "--config", cfg, "--seed", "7", "--out", str(b), "--quiet"]) == 0
    csv_a, csv_b = outputs(a, ".csv"), outputs(b, ".csv")
    assert [p.name for p in csv_a] == [p.name for p in csv_b]
    assert csv_a[0].read_bytes() == csv_b[0].read_bytes()
    agent_files = outputs(a, "-agent.json")
    assert agent_files[0].read_bytes() == outputs(b, "-agent.json")[0].read_bytes()
    # a different seed is a different configuration
    c = tmp_path / "c"
    assert run(["train", "--config", cfg, "--seed", "8", "--out", str(c), "--quiet"]) == 0
    assert outputs(c, ".csv")[0].name != csv_a[0].name

    # the checkpoint evaluates through `eval`
    doc = json.loads(json.dumps(SMALL))
    doc["agent"]["checkpoint"] = str(agent_files[0])
    assert load_agent(agent_files[0]).policy.theta.size > 0
    assert run(["eval", "--config", write_config(tmp_path, doc, "ev.json"), "--out", str(tmp_path / "e"),
                "--quiet"]) == 0
    summary = json.loads(outputs(tmp_path / "e", ".json")[0].read_text())
    assert summary["metrics"]["controller"].startswith("agent:")


def test_eval_summary_and_compare_tabulation(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "pc"
    assert run(["eval", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    [summary] = outputs(out, ".json")
    doc = json.loads(summary.read_text())
    assert doc["metrics"]["controller"] == "pc:0.574166"
    assert len(doc["config_hash"]) == 64 and doc["provenance"].startswith("swimrl")
    header, rows = read_csv(outputs(out, ".csv")[0])
    assert header == ["episode", "return"] and len(rows) == 10
    assert doc["metrics"]["mean_return"] == pytest.approx(np.mean([r[1] for r in rows]), rel=1e-10)

    other = json.loads(json.dumps(SMALL))
    other["baseline"]["phi"] = 0.9
    out2 = tmp_path / "pc2"
    assert run(["eval", "--config", write_config(tmp_path, other, "o.json"), "--out", str(out2), "--quiet"]) == 0
    tab = tmp_path / "tab"
    files = [str(summary), str(outputs(out2, ".json")[0])]
    assert run(["compare", "--results", *files, "--out", str(tab), "--quiet"]) == 0
    text = outputs(tab, ".csv")[0].read_text().splitlines()
    assert text[0] == "controller,mean_return,median_return,stderr" and len(text) == 3

    # a different environment cannot be tabulated with these
    diff = json.loads(json.dumps(SMALL))
    diff["episode"]["beta"] = 0.2
    out3 = tmp_path / "pc3"
    assert run(["eval", "--config", write_config(tmp_path, diff, "d.json"), "--out", str(out3), "--quiet"]) == 0
    assert run(["compare", "--results", str(summary), str(outputs(out3, ".json")[0]),
                "--out", str(tab), "--quiet"]) == 1


def test_hybrid_eval_with_horizons(tmp_path):
    doc = json.loads(json.dumps(SMALL))
    doc["hybrid"] = {"n": 5, "threshold": 0.0, "episodes": 6}
    doc["horizons"] = {"values": [0.1, 0.2], "episodes": 4, "phis": [0.9]}
    out = tmp_path / "h"
    assert run(["hybrid-eval", "--config", write_config(tmp_path, doc), "--out", str(out), "--quiet"]) == 0
    metrics = json.loads(outputs(out, ".json")[0].read_text())["metrics"]
    assert {"AP_median", "PC_median", "hybrid_median"} <= set(metrics)
    assert "horizon_0.1_PC_0.9_mean" in metrics and "horizon_0.2_AP_mean" in metrics
    header = outputs(out, ".csv")[0].read_text().splitlines()[0]
    assert header == "episode,AP_return,PC_return,hybrid_return"


def test_export_csv_header_only_and_round_trip(tmp_path):
    rec = ResultRecord("x", "h", "e", ["a", "b"])
    path = export_csv(rec, tmp_path / "empty.csv")
    assert path.read_bytes() == b"a,b\r\n"
    values = [1 / 3, -2.718281828459045e-9, 6.02214076e23, 0.574166]
    rec = ResultRecord("x", "h", "e", ["v", "i"], [[v, i] for i, v in enumerate(values)])
    _, rows = read_csv(export_csv(rec, tmp_path / "vals.csv"))
    for (back, _), v in zip(rows, values):
        assert back == pytest.approx(v, rel=1e-11)
    text = (tmp_path / "vals.csv").read_text()
    assert "e" not in text.replace("v,i", "")
    with pytest.raises(OSError, match="cannot write"):
        export_csv(rec, tmp_path / "missing" / "x.csv")


def test_format_value():
    assert format_value(0.1) == "0.1"
    assert format_value(1 / 3) == "0.333333333333"
    assert format_value(7) == "7" and format_value(True) == "1"
    assert format_value(float("nan")) == "nan"
