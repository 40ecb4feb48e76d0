import csv
import json

import jsonschema
import numpy as np
import pytest
from referencing import Registry, Resource

from evifed import harness
from evifed.cli import main
from evifed.federation import FedConfig, run_isolated
from evifed.harness import SCHEMA_DIR

TINY = "T = 3\nrounds = 2\nstep_l = 2\nstep_c = 2\nper_client_n = 40\n"


def _registry():
    resources = [(p.name, Resource.from_contents(json.loads(p.read_text())))
                 for p in SCHEMA_DIR.glob("*.json")]
    return Registry().with_resources(resources)


def validate(name, instance):
    jsonschema.Draft202012Validator(harness.schema(name), registry=_registry()).validate(instance)


def validate_csv(path, prefix=()):
    row_schema = harness.schema("rounds_csv")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == tuple(prefix) + tuple(row_schema["columns"])
        rows = list(reader)
    for row in rows:
        typed = {}
        for k, v in row.items():
            if v == "":
                typed[k] = None
            elif k in ("round", "client", "seed"):
                typed[k] = int(v)
            elif k == "variant":
                typed[k] = v
            else:
                typed[k] = float(v)
        jsonschema.validate(typed, row_schema)
    return rows


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture
def run_dir(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["run", "--config", str(tiny_cfg), "--out-dir", str(out), "--deterministic"]) == 0
    return out


def test_missing_T_exits_2_naming_field(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("rounds = 2\n")
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    assert "T: missing required field" in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path):
    assert main(["run", "--seed-data", "zero"]) == 2
    assert main(["sweep-mu", "--values", "0.1", "--out-dir", str(tmp_path)]) == 2
    assert main(["stress", "--T", "10", "--out-dir", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, tiny_cfg, monkeypatch):
    def boom(cfg):
        raise RuntimeError("simulated crash")

    monkeypatch.setattr(harness, "run_one", boom)
    assert main(["run", "--config", str(tiny_cfg), "--out-dir", str(tmp_path)]) == 1


def test_run_outputs(run_dir):
    rows = validate_csv(run_dir / "rounds.csv")
    assert len(rows) == 2 * 3
    run = json.loads((run_dir / "run.json").read_text())
    validate("run", run)
    manifest = json.loads((run_dir / "manifest.run.json").read_text())
    validate("manifest", manifest)
    assert manifest["started"] is None and manifest["finished"] is None
    assert set(manifest["outputs"]) >= {"rounds.csv", "run.json"}
    assert len(list((run_dir / "checkpoints").iterdir())) == 3
    assert all(log["duration"] is None for log in run["round_logs"])


def test_run_is_byte_identical_on_repeat(tmp_path, tiny_cfg, run_dir):
    again = tmp_path / "again"
    assert main(["run", "--config", str(tiny_cfg), "--out-dir", str(again),
                 "--deterministic"]) == 0
    for path in run_dir.rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (again / path.relative_to(run_dir)).read_bytes(), path


def test_seed_flags_override_and_change_hash(tmp_path, tiny_cfg, run_dir):
    other = tmp_path / "other"
    assert main(["run", "--config", str(tiny_cfg), "--out-dir", str(other), "--deterministic",
                 "--seed-data", "5", "--seed-init", "6", "--seed-shuffle", "7"]) == 0
    m0 = json.loads((run_dir / "manifest.run.json").read_text())
    m1 = json.loads((other / "manifest.run.json").read_text())
    assert (m1["config"]["seed_data"], m1["config"]["seed_init"],
            m1["config"]["seed_shuffle"]) == (5, 6, 7)
    assert m0["input_hash"] != m1["input_hash"]


def test_out_dir_from_environment(tmp_path, tiny_cfg, monkeypatch):
    monkeypatch.setenv("EVIFED_OUT_DIR", str(tmp_path / "envdir"))
    assert main(["run", "--config", str(tiny_cfg), "--deterministic"]) == 0
    assert (tmp_path / "envdir" / "rounds.csv").is_file()


def test_git_style_hash():
    # `printf 'hello\n' | git hash-object --stdin`
    assert harness.git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_export_plots(run_dir):
    assert main(["export-plots", str(run_dir), "--deterministic"]) == 0
    plots = run_dir / "plots"
    heat = list(csv.reader(open(plots / "weights_round_001.csv")))
    W = np.array([[float(v) for v in r[1:]] for r in heat[1:]])
    assert W.shape == (3, 3) and np.all(np.diag(W) == 0)
    ce = list(csv.reader(open(plots / "cross_eval.csv")))
    assert len(ce) - 1 == 3 and len(ce[0]) - 1 == 3
    series = list(csv.DictReader(open(plots / "accuracy_series.csv")))
    assert len(series) == 2
    validate("manifest", json.loads((run_dir / "manifest.export-plots.json").read_text()))


def test_export_plots_missing_artifacts(tmp_path):
    assert main(["export-plots", str(tmp_path / "nothing")]) == 2


def test_cross_eval_from_checkpoints_matches_run(tmp_path, run_dir):
    out = tmp_path / "ce"
    assert main(["cross-eval", "--run-dir", str(run_dir), "--out-dir", str(out),
                 "--deterministic"]) == 0
    summary = json.loads((out / "cross_eval.json").read_text())
    validate("cross_eval", summary)
    run = json.loads((run_dir / "run.json").read_text())
    assert summary["matrix"] == run["cross_eval"]


def test_ablate_variants(tmp_path, tiny_cfg):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(tiny_cfg), "--out-dir", str(out), "--seeds", "2",
                 "--deterministic"]) == 0
    summary = json.loads((out / "ablation.json").read_text())
    validate("ablation", summary)
    assert set(summary["variants"]) == set(harness.ABLATION_VARIANTS)
    assert len(summary["deltas"]["full_minus_no_dluc"]["per_seed"]) == 2
    rows = validate_csv(out / "ablation.csv", ("variant", "seed"))
    assert {r["variant"] for r in rows} == set(harness.ABLATION_VARIANTS)


def test_no_server_variant_equals_isolated_runs():
    cfg = FedConfig(T=3, rounds=2, step_l=2, step_c=2, per_client_n=40, deterministic=True)
    data = harness.make_data(cfg)
    res = harness.run_variant(cfg, "no_server", data)
    for t in range(3):
        iso = run_isolated(cfg.replace(mu=0.0), data, t)
        assert [c.accuracy for c in iso] == [log.clients[t].accuracy for log in res.logs]


def test_no_dluc_variant_uses_uniform_weights():
    cfg = FedConfig(T=4, rounds=2, step_l=2, step_c=2, per_client_n=40, deterministic=True)
    res = harness.run_variant(cfg, "no_dluc")
    for log in res.logs:
        W = np.array(log.weights)
        off = W[~np.eye(4, dtype=bool)]
        assert np.all(off == 1.0 / 3.0) and np.all(np.diag(W) == 0)


def test_sweep_groups_and_mu_zero_equals_no_server(tmp_path, tiny_cfg):
    out = tmp_path / "sweep"
    assert main(["sweep-mu", "--config", str(tiny_cfg), "--values", "0,0.1,1.0",
                 "--out-dir", str(out), "--deterministic"]) == 0
    summary = json.loads((out / "sweep_mu.json").read_text())
    validate("sweep_mu", summary)
    assert [g["mu"] for g in summary["groups"]] == [0.0, 0.1, 1.0]
    rows = list(csv.DictReader(open(out / "sweep_mu.csv")))
    assert {r["mu"] for r in rows} == {"0.0", "0.1", "1.0"}
    cfg = FedConfig(T=3, rounds=2, step_l=2, step_c=2, per_client_n=40, deterministic=True)
    ns = harness.run_variant(cfg, "no_server")
    assert summary["groups"][0]["per_seed"] == [ns.final_accuracy]


def test_expected_trainable_matches_model():
    cfg = FedConfig(T=2)
    e = harness.expected_trainable(cfg)
    assert e == {"prompt": 2048, "head": 4680, "total": 6728}
    f = harness.run_one(cfg.replace(rounds=1, step_l=1, step_c=1, per_client_n=30),
                        cross_eval=False).federation
    assert all(c.trainable_count() == e["total"] for c in f.clients)


def test_manifest_hash_is_stable():
    a = harness.RunManifest("run", FedConfig(T=3).to_dict(), {})
    b = harness.RunManifest("run", FedConfig(T=3).to_dict(), {})
    c = harness.RunManifest("run", FedConfig(T=4).to_dict(), {})
    assert a.input_hash == b.input_hash != c.input_hash
    assert a.run_id.startswith("run-")
