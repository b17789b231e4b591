import json
import subprocess
import sys

import pytest

from streamcl import runner
from streamcl.cli import run_cli
from streamcl.config import ConfigError, load_config
from streamcl.dataset import Dataset, gen_synthetic, write_dataset
from streamcl.ordering import OrderingKind
from streamcl.trainer import LearnerKind

FAST = ["--hidden", "8,8"]


@pytest.fixture
def ds_path(tmp_path):
    p = tmp_path / "d.bin"
    assert run_cli(["gen-synthetic", "--classes", "4", "--instances", "2", "--frames", "15",
                    "--dim", "6", "--out", str(p)]) == 0
    return p


def write_config(tmp_path, ds_path, **extra):
    lines = ["[data]", f'dataset = "{ds_path}"', "[hyperparams]", "base_epochs = 5", "offline_epochs = 10",
             "hidden_dims = [8, 8]", "buffer_capacity = 10"]
    lines += ["[run]", f'out = "{tmp_path / "r.jsonl"}"', "workers = 1"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in extra.items()]
    p = tmp_path / "c.toml"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_config_defaults_and_overrides(tmp_path, ds_path):
    cfg = load_config(write_config(tmp_path, ds_path), {"lambda2": 0.0, "kinds": "iid,class-instance",
                                                       "seeds": 3, "policy": None})
    assert cfg.hp.lambda2 == 0.0 and cfg.hp.lambda1 == 1.0 and cfg.hp.hidden_dims == (8, 8)
    assert cfg.kinds == [OrderingKind.IID, OrderingKind.CLASS_INSTANCE]
    assert cfg.seeds == [0, 1, 2] and cfg.learners == [LearnerKind.CIOSL]
    assert cfg.hp.policy.value == "lawrrr"


def test_config_errors(tmp_path, ds_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, {"dataset": str(ds_path), "lamda1": 1})
    with pytest.raises(ConfigError, match="not found"):
        load_config(None, {"dataset": str(tmp_path / "missing.bin")})
    with pytest.raises(ConfigError):
        load_config(None, {"dataset": str(ds_path), "sampling": "bogus"})
    bad = tmp_path / "bad.toml"
    bad.write_text("[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match="section"):
        load_config(bad)


def test_run_with_config_and_seeds(tmp_path, ds_path, capsys):
    cfg = write_config(tmp_path, ds_path, learners=["ciosl", "finetune", "offline"])
    assert run_cli(["run", "--config", str(cfg), "--seeds", "3"]) == 0
    out = tmp_path / "r.jsonl"
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    summary = lines[-1]
    assert summary["type"] == "summary" and summary["seeds"] == [0, 1, 2]
    assert all(x["type"] == "event" for x in lines[:-1])
    assert len(summary["omega_all"]["ciosl"]["class-iid"]["per_seed"]) == 3
    assert summary["omega_all"]["offline"]["class-iid"]["mean"] == 1.0
    assert set(summary["plan_digests"]["class-iid"]) == {"0", "1", "2"}
    assert summary["config"]["hyperparams"]["lambda2"] == 0.3
    assert not (tmp_path / "r.jsonl.partial").exists()
    assert "Offline-hat" in capsys.readouterr().out

    assert run_cli(["report", str(out)]) == 0
    assert "CIOSL" in capsys.readouterr().out


def test_gen_then_run_end_to_end(tmp_path):
    d, t = tmp_path / "tr.bin", tmp_path / "te.bin"
    assert run_cli(["gen-synthetic", "--classes", "10", "--dim", "32", "--frames", "12", "--test-frames", "3",
                    "--test-out", str(t), "--out", str(d)]) == 0
    out = tmp_path / "res.jsonl"
    assert run_cli(["run", "--dataset", str(d), "--test-dataset", str(t), "--ordering", "class-instance",
                    "--policy", "lawcbr", "--sampling", "lapn", "--lambda1", "0.5", "--lambda2", "0.1",
                    "--capacity", "30", "--out", str(out), "--workers", "1", *FAST]) == 0
    summary = runner.read_summary(out)
    assert summary["config"]["hyperparams"]["policy"] == "lawcbr"
    assert summary["buffer"]["class-instance"]["0"]["capacity"] == 30


def test_instance_ordering_without_metadata(tmp_path, capsys):
    ds = gen_synthetic(4, 2, 10, 4, 0.1, seed=0)
    p = tmp_path / "nometa.bin"
    write_dataset(p, Dataset(ds.records, ds.n_classes, has_metadata=False))
    out = tmp_path / "r.jsonl"
    code = run_cli(["run", "--dataset", str(p), "--ordering", "instance", "--out", str(out), *FAST])
    assert code != 0
    assert "metadata" in capsys.readouterr().err
    assert not out.exists() and not (tmp_path / "r.jsonl.partial").exists()


def test_usage_errors(tmp_path, ds_path):
    with pytest.raises(SystemExit) as e:
        run_cli(["run", "--dataset", str(ds_path), "--bogus-flag"])
    assert e.value.code != 0
    with pytest.raises(SystemExit):
        run_cli(["run", "--dataset", str(ds_path), "--policy", "random"])
    with pytest.raises(SystemExit):
        run_cli(["run", "--dataset", str(ds_path), "--ordering", "sideways"])
    assert run_cli(["run", "--dataset", str(tmp_path / "nope.bin")]) != 0


def test_csv_import_cli(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("label,f0,f1\n0,1,2\n1,3,4\n")
    assert run_cli(["import-csv", str(csv), "--out", str(tmp_path / "x.bin")]) == 0
    assert (tmp_path / "x.bin").exists()


def test_byte_equal_summary(tmp_path, ds_path):
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = tmp_path / name
        assert run_cli(["run", "--dataset", str(ds_path), "--seeds", "2", "--ordering", "iid", "--out", str(out),
                        "--workers", "1", *FAST]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]


def test_worker_pool_matches_serial(tmp_path, ds_path):
    texts = []
    for workers in ("1", "2"):
        out = tmp_path / f"w{workers}.jsonl"
        assert run_cli(["run", "--dataset", str(ds_path), "--seeds", "2", "--out", str(out),
                        "--workers", workers, *FAST]) == 0
        texts.append(out.read_text().splitlines()[-1])
    assert texts[0] == texts[1]


def test_resume_from_partial(tmp_path, ds_path, monkeypatch):
    cfg = load_config(write_config(tmp_path, ds_path), {"seeds": 3})
    real = runner.run_job
    calls = []

    def flaky(kind, seed, emit=None):
        calls.append(seed)
        if seed == 2 and len(calls) == 3:
            raise RuntimeError("simulated crash")
        return real(kind, seed, emit)

    monkeypatch.setattr(runner, "run_job", flaky)
    with pytest.raises(RuntimeError):
        runner.run(cfg)
    partial = tmp_path / "r.jsonl.partial"
    assert partial.exists() and json.loads(partial.read_text().splitlines()[0])["partial"] is True
    assert not (tmp_path / "r.jsonl").exists()

    resumed = runner.run(cfg)
    assert calls == [0, 1, 2, 2]
    assert not partial.exists()

    monkeypatch.setattr(runner, "run_job", real)
    (tmp_path / "r.jsonl").rename(tmp_path / "first.jsonl")
    fresh = runner.run(cfg)
    assert json.dumps(fresh, sort_keys=True) == json.dumps(resumed, sort_keys=True)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "streamcl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-synthetic" in res.stdout
