import json
from types import SimpleNamespace

import pytest
import yaml

from fedgnids import cli

SYNTH = {"n_nodes": 60, "T": 10, "anomaly_count": 8, "anomaly_window": [9, 10], "p_intra": 0.2, "seed": 2}


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return str(path)


def config(tmp_path, name="exp.yaml", **over):
    doc = {
        "data": {"source": "data/events.csv", "window_seconds": 1800},
        "model": {"d_h": 8, "d_z": 4},
        "federation": {"K": 3, "R": 3, "m_ba": 2},
        "output_dir": "runs/entente",
    }
    doc.update(over)
    return write_yaml(tmp_path / name, doc)


@pytest.fixture
def workspace(tmp_path):
    spec = write_yaml(tmp_path / "synth.yaml", SYNTH)
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def test_synth_outputs(workspace):
    d = workspace / "data"
    assert (d / "events.csv").read_text().startswith("src,dst,timestamp,label\n")
    assert (d / "blocks.csv").read_text().startswith("node_id,block\n")
    assert json.loads((d / "synth.json").read_text())["n_nodes"] == 60


def test_full_pipeline(workspace, capsys):
    cfg = config(workspace)
    assert cli.main(["partition", "--config", cfg]) == 0
    assert (workspace / "runs/entente/partition.csv").read_text().startswith("node_id,client_id\n")
    assert cli.main(["train", "--config", cfg]) == 0
    run = workspace / "runs/entente"
    for name in ("model.bin", "model.json", "weights.csv", "history.json"):
        assert (run / name).is_file()
    assert cli.main(["eval", "--config", cfg]) == 0
    doc = json.loads((run / "metrics.json").read_text())
    assert {"ap", "auc", "precision", "recall", "tau", "scheme"} <= set(doc)
    assert (run / "pr_curve.csv").read_text().startswith("threshold,precision,recall\n")

    assert cli.main(["train", "--config", cfg, "--scheme", "fedavg", "--out", str(workspace / "runs/fedavg")]) == 0
    assert cli.main(["eval", "--config", cfg, "--out", str(workspace / "runs/fedavg")]) == 0
    assert json.loads((workspace / "runs/fedavg/metrics.json").read_text())["scheme"] == "fedavg"

    capsys.readouterr()
    table = workspace / "table.txt"
    assert cli.main(["report", str(run), str(workspace / "runs/fedavg"), "--output", str(table)]) == 0
    out = capsys.readouterr().out
    assert out == table.read_text()
    header, rule, *rows = out.splitlines()
    assert header.split() == ["run", "scheme", "ap", "auc", "precision", "recall", "fpr_printed", "fpr_conventional", "sr", "epm"]
    assert [r.split()[:2] for r in rows] == [["entente", "entente"], ["fedavg", "fedavg"]]
    # percent with two decimals
    assert rows[0].split()[2] == f"{100 * doc['ap']:.2f}"


def test_attack_subcommand(workspace):
    cfg = config(workspace)
    out = workspace / "runs/attack"
    args = ["attack", "--config", cfg, "--malicious", "2", "--p", "1.0", "--gamma", "100", "--out", str(out)]
    assert cli.main(args) == 0
    hist = json.loads((out / "history.json").read_text())
    assert hist["config"]["attack"]["gamma"] == 100.0 and hist["epm"] is not None
    assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == 0
    assert "sr" in json.loads((out / "metrics.json").read_text())


def test_attack_requires_malicious_clients(workspace, capsys):
    assert cli.main(["attack", "--config", config(workspace)]) == 1
    assert "malicious" in capsys.readouterr().err


def test_train_byte_identical_across_runs_and_workers(workspace):
    cfg = config(workspace)
    outs = []
    for i, workers in enumerate((1, 1, 8, 8)):
        out = workspace / f"runs/det{i}"
        assert cli.main(["train", "--config", cfg, "--workers", str(workers), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("weights.csv", "history.json", "model.bin"):
        assert len({(o / name).read_bytes() for o in outs}) == 1


def test_seed_flag_changes_run(workspace):
    cfg = config(workspace)
    a, b = workspace / "runs/s1", workspace / "runs/s2"
    assert cli.main(["train", "--config", cfg, "--seed", "1", "--out", str(a)]) == 0
    assert cli.main(["train", "--config", cfg, "--seed", "2", "--out", str(b)]) == 0
    assert (a / "weights.csv").read_bytes() != (b / "weights.csv").read_bytes()


def test_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["train"], ["train", "--config", "x", "--bogus"], []):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert "config file not found" in capsys.readouterr().err
    bad = write_yaml(tmp_path / "bad.yaml", {"federation": {"scheme": "nope"}})
    assert cli.main(["train", "--config", bad]) == 1
    assert "unknown scheme" in capsys.readouterr().err
    assert cli.main(["eval", "--config", config(tmp_path)]) == 1
    assert "run train first" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path)]) == 1


def test_divergence_exit_code(workspace, monkeypatch, capsys):
    fake = SimpleNamespace(diverged=True, state=SimpleNamespace(diagnosis="NaN: global model became non-finite", history=[]))
    monkeypatch.setattr(cli.pipeline, "train", lambda cfg, prep: fake)
    monkeypatch.setattr(cli, "_write_training", lambda cfg, result: workspace)
    assert cli.main(["train", "--config", config(workspace)]) == cli.EXIT_DIVERGED
    assert "NaN" in capsys.readouterr().err


def test_report_marks_aborted_runs():
    text = cli.render_report([{"scheme": "entente_ub", "aborted": True}, {"scheme": "entente", "ap": 0.5, "epm": 3.0}])
    lines = text.splitlines()
    assert lines[2].split()[2:] == ["NaN"] * len(cli.REPORT_COLUMNS)
    assert lines[3].split()[2] == "50.00" and lines[3].split()[-1] == "3.00"
