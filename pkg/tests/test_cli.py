import csv
import json

import pytest

from satnoma import cli
from satnoma.config import load_config, tiny_cache_config, NetworkConfig, TrainConfig
from satnoma.maddpg import METRIC_FIELDS


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    net = tiny_cache_config()
    from satnoma.config import resolved_dict
    data = resolved_dict(net, TrainConfig(episodes=3, steps=12, hidden=(8, 8)))
    path.write_text(json.dumps(data))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_metrics_sink(tmp_path):
    with cli.MetricsSink(tmp_path / "m.csv") as sink:
        for ep in range(4):
            cli.emit_metrics(sink, {"episode": ep, "mean_reward": 0.1 + ep, "hit_rate": 1 / 3,
                                    "actor_loss": -2.0, "critic_loss": 1e-300, "noise_scale": 0.3})
    rows = read_rows(tmp_path / "m.csv")
    assert rows[0] == list(METRIC_FIELDS)
    assert sum(r == list(METRIC_FIELDS) for r in rows) == 1
    assert len(rows) == 5 and sink.rows == 4
    assert float(rows[1][2]) == 1 / 3 and float(rows[1][4]) == 1e-300
    assert rows[2][0] == "1"


def test_train_resource_outputs(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert cli.main(["train-resource", "--config", str(tiny_config), "--out", str(out), "--seed", "3"]) == 0
    seed_dir = out / "seed_3"
    rows = read_rows(seed_dir / "metrics.csv")
    assert len(rows) == 1 + 3
    resolved = json.loads((seed_dir / "config.resolved.json").read_text())
    assert set(resolved["network"]) == set(NetworkConfig.__dataclass_fields__)
    assert resolved["train"]["seed"] == 3
    assert (seed_dir / "checkpoint" / "manifest.txt").exists()
    summary = json.loads((seed_dir / "summary.json").read_text())
    assert summary["episodes"] == 3 and summary["violations"] == 0
    net, tc = load_config(seed_dir / "config.resolved.json")
    assert net == tiny_cache_config() and tc.episodes == 3


def test_metrics_byte_identical(tmp_path, tiny_config):
    blobs = []
    for name in ("a", "b"):
        cli.main(["train-resource", "--config", str(tiny_config), "--out", str(tmp_path / name)])
        blobs.append((tmp_path / name / "seed_0" / "metrics.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_overrides_and_seeds(tmp_path, tiny_config):
    out = tmp_path / "run"
    code = cli.main(["eval", "--config", str(tiny_config), "--out", str(out), "--seed", "1", "--seed", "2",
                     "--episodes", "2", "--steps", "5", "--sic", "--extended-obs"])
    assert code == 0
    for s in (1, 2):
        resolved = json.loads((out / f"seed_{s}" / "config.resolved.json").read_text())
        assert resolved["network"]["sic_mode"] and resolved["network"]["extended_obs"]
        assert len(read_rows(out / f"seed_{s}" / "metrics.csv")) == 3


def test_parallel_workers_match_sequential(tmp_path, tiny_config):
    args = ["train-resource", "--config", str(tiny_config), "--seed", "0", "--seed", "1"]
    cli.main(args + ["--out", str(tmp_path / "seq")])
    cli.main(args + ["--out", str(tmp_path / "par"), "--workers", "2"])
    for s in (0, 1):
        assert ((tmp_path / "seq" / f"seed_{s}" / "metrics.csv").read_bytes()
                == (tmp_path / "par" / f"seed_{s}" / "metrics.csv").read_bytes())


def test_train_cache_and_eval_checkpoint(tmp_path, tiny_config):
    out = tmp_path / "cache"
    assert cli.main(["train-cache", "--config", str(tiny_config), "--out", str(out)]) == 0
    seed_dir = out / "seed_0"
    assert len(read_rows(seed_dir / "metrics.csv")) == 4
    assert len(read_rows(seed_dir / "resource_metrics.csv")) == 4
    summary = json.loads((seed_dir / "summary.json").read_text())
    assert len(summary["pools"]) == 2 and all(len(p) == 2 for p in summary["pools"])
    code = cli.main(["eval", "--config", str(tiny_config), "--out", str(tmp_path / "ev"), "--policy",
                     "checkpoint", "--checkpoint", str(seed_dir / "resource_checkpoint")])
    assert code == 0
    code = cli.main(["train-cache", "--config", str(tiny_config), "--out", str(tmp_path / "again"),
                     "--resource-from", str(seed_dir / "resource_checkpoint")])
    assert code == 0
    assert not (tmp_path / "again" / "seed_0" / "resource_metrics.csv").exists()


def test_oracle_compare_prints_gap(tmp_path, tiny_config, capsys):
    assert cli.main(["oracle-compare", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "learned" in text and "oracle" in text and "gap" in text
    summary = json.loads((tmp_path / "seed_0" / "summary.json").read_text())
    assert summary["oracle_value"] >= summary["learned_value"]
    assert len(read_rows(tmp_path / "seed_0" / "oracle.csv")) == 1 + 100


def test_gradcheck_exit_codes(tmp_path, tiny_config, monkeypatch):
    assert cli.main(["gradcheck", "--config", str(tiny_config)]) == 0
    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    assert cli.main(["gradcheck", "--config", str(tiny_config)]) == 1


def test_selfcheck():
    assert cli.main(["selfcheck"]) == 0


@pytest.mark.parametrize("content,needle", [
    ({"network": {"p_bs_max": 0}}, "p_bs_max"),
    ({"network": {"bs_cache_capacity": 40}}, "cache"),
    ({"train": {"gamma": 2}}, "gamma"),
    ({"network": {"no_such_key": 1}}, "no_such_key"),
])
def test_bad_config_exits_nonzero(tmp_path, capsys, content, needle):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(content))
    assert cli.main(["train-resource", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_missing_config_and_bad_flags(tmp_path, capsys):
    assert cli.main(["eval", "--config", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["eval", "--policy", "checkpoint", "--out", str(tmp_path), "--episodes", "1"]) == 2
    assert "checkpoint" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["fly"])
