"""Experiment recipes and artifact writers behind the command line.

Every command writes into one output directory:

* ``rounds.csv``: one row per (round, client), see ``schemas/rounds_csv.json``
* a JSON summary per command (``run.json``, ``ablation.json``, ...)
* ``manifest.<command>.json``: config echo, input hash and output digests

Multi-seed recipes offset the whole seed triple: seed ``i`` runs with
``(seed_data + i, seed_init + i, seed_shuffle + i)``.  Wall-clock fields are
written as ``null`` when ``deterministic`` is set so that repeated commands
produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import resource
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from evifed import checkpoint
from evifed.errors import ConfigError, InvalidInputError
from evifed.federation import (FedConfig, Federation, RoundLog, cross_evaluate,
                               final_accuracies, make_client, run_pooled)
from evifed.messages import ClientPublish
from evifed.model import build_backbone
from evifed.synthdata import ANSWERS, generate

SCHEMA_DIR = Path(__file__).parent / "schemas"
ROUND_COLUMNS = ("round", "client", "accuracy", "closed_acc", "open_acc", "mean_u",
                 "eval_accuracy")
ABLATION_VARIANTS = ("full", "no_client", "no_server", "no_dluc")
DEFAULT_MU_VALUES = (0.0, 0.05, 0.2, 1.0, 5.0)
MIN_STRESS_CLIENTS = 100


# -- small helpers --------------------------------------------------------------


def seeded(cfg: FedConfig, offset: int) -> FedConfig:
    return cfg.replace(seed_data=cfg.seed_data + offset, seed_init=cfg.seed_init + offset,
                       seed_shuffle=cfg.seed_shuffle + offset)


def make_data(cfg: FedConfig, cycle: bool = False):
    return generate(cfg.T, cfg.per_client_n, cfg.seed_data, cycle=cycle)


def git_hash(payload: bytes) -> str:
    """sha1 over a git blob header plus the payload, as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _volatile(cfg: FedConfig, value):
    return None if cfg.deterministic else value


def now_stamp(cfg: FedConfig):
    return _volatile(cfg, datetime.now(timezone.utc).isoformat(timespec="seconds"))


def peak_rss_bytes() -> int:
    # ru_maxrss is in KiB on Linux
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_from_logs(logs: list[RoundLog]) -> list[dict]:
    rows = []
    for log in logs:
        for c in log.clients:
            rows.append({"round": log.round, "client": c.client, "accuracy": c.accuracy,
                         "closed_acc": c.closed_acc, "open_acc": c.open_acc, "mean_u": c.mean_u,
                         "eval_accuracy": c.eval_accuracy})
    return rows


def write_csv(path: Path, rows: list[dict], columns) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def log_to_dict(log: RoundLog, cfg: FedConfig) -> dict:
    return {"round": log.round, "weights": log.weights, "objective": log.objective,
            "duration": _volatile(cfg, log.duration),
            "clients": [asdict(c) for c in log.clients]}


# -- manifest -----------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    arguments: dict
    input_hash: str = ""
    run_id: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    started: str | None = None
    finished: str | None = None

    def __post_init__(self) -> None:
        if not self.input_hash:
            payload = canonical_json({"command": self.command, "config": self.config,
                                      "arguments": self.arguments}).encode("utf-8")
            self.input_hash = git_hash(payload)
        if not self.run_id:
            self.run_id = f"{self.command}-{self.input_hash[:12]}"

    def record(self, out_dir: Path, names) -> None:
        for name in sorted(names):
            self.outputs[name] = hashlib.sha256((out_dir / name).read_bytes()).hexdigest()

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest.{self.command}.json"
        path.write_text(canonical_json(asdict(self)), encoding="utf-8")
        return path


# -- recipes ------------------------------------------------------------------------


@dataclass
class RunResult:
    cfg: FedConfig
    logs: list[RoundLog]
    cross_eval: np.ndarray | None
    federation: Federation | None = None

    @property
    def final_accuracy(self) -> float:
        return float(final_accuracies(self.logs).mean())


def run_one(cfg: FedConfig, data=None, bus=None, cross_eval: bool = True) -> RunResult:
    data = data if data is not None else make_data(cfg)
    fed = Federation(cfg, data, bus)
    logs = fed.run()
    ce = fed.cross_evaluate() if cross_eval else None
    return RunResult(cfg, logs, ce, fed)


def run_variant(cfg: FedConfig, variant: str, data=None) -> RunResult:
    """One ablation variant on one seed triple."""
    data = data if data is not None else make_data(cfg)
    if variant == "full":
        return run_one(cfg, data)
    if variant == "no_server":
        return run_one(cfg.replace(mu=0.0), data)
    if variant == "no_dluc":
        return run_one(cfg.replace(weighting="equal"), data)
    if variant == "no_client":
        return RunResult(cfg, run_pooled(cfg, data), None)
    raise ConfigError(f"variant: unknown ablation variant {variant!r}")


def _spread(values) -> dict:
    arr = np.asarray(values, dtype=float)
    var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "variance": var, "per_seed": [float(v) for v in arr]}


def _split_means(logs: list[RoundLog]) -> tuple[float | None, float | None]:
    last = logs[-1].clients
    closed = [c.closed_acc for c in last if c.closed_acc is not None]
    opened = [c.open_acc for c in last if c.open_acc is not None]
    return (float(np.mean(closed)) if closed else None,
            float(np.mean(opened)) if opened else None)


def ablate(cfg: FedConfig, seeds: int = 1, variants=ABLATION_VARIANTS):
    """Returns (csv rows, summary) over ``seeds`` seed triples."""
    if seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    rows, finals = [], {v: [] for v in variants}
    splits = {v: [] for v in variants}
    for s in range(seeds):
        scfg = seeded(cfg, s)
        data = make_data(scfg)
        for v in variants:
            res = run_variant(scfg, v, data)
            finals[v].append(res.final_accuracy)
            splits[v].append(_split_means(res.logs))
            for row in rows_from_logs(res.logs):
                rows.append({"variant": v, "seed": s, **row})
    table = {}
    for v in variants:
        closed = [c for c, _ in splits[v] if c is not None]
        opened = [o for _, o in splits[v] if o is not None]
        table[v] = {**_spread(finals[v]),
                    "closed_acc": float(np.mean(closed)) if closed else None,
                    "open_acc": float(np.mean(opened)) if opened else None}
    deltas = {}
    if "full" in variants:
        for other in variants:
            if other != "full":
                diff = np.subtract(finals["full"], finals[other])
                deltas[f"full_minus_{other}"] = _spread(diff)
    return rows, {"seeds": seeds, "variants": table, "deltas": deltas}


def sweep_mu(cfg: FedConfig, values, seeds: int = 1):
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ConfigError("values: need at least two aggregation rates")
    if any(v < 0 for v in values):
        raise ConfigError("values: aggregation rates must be >= 0")
    if seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    rows, finals = [], {v: [] for v in values}
    for s in range(seeds):
        scfg = seeded(cfg, s)
        data = make_data(scfg)
        for mu in values:
            res = run_one(scfg.replace(mu=mu), data, cross_eval=False)
            finals[mu].append(res.final_accuracy)
            for row in rows_from_logs(res.logs):
                rows.append({"mu": mu, "seed": s, **row})
    groups = [{"mu": mu, **_spread(finals[mu])} for mu in values]
    means = [g["mean"] for g in groups]
    best = int(np.argmax(means))
    order = np.argsort(values)
    interior = best not in (int(order[0]), int(order[-1]))
    return rows, {"seeds": seeds, "groups": groups, "best_mu": values[best],
                  "interior_best": bool(interior)}


def expected_trainable(cfg: FedConfig) -> dict:
    """Closed-form per-client counts, independent of the model code."""
    prompt = 2 * len(cfg.prompted_blocks) * cfg.prompt_len * cfg.hidden_dim
    feat, hid, J = 2 * cfg.hidden_dim, cfg.head_hidden, len(ANSWERS)
    head = feat * hid + hid + hid * J + J
    return {"prompt": prompt, "head": head, "total": prompt + head}


def stress(cfg: FedConfig):
    if cfg.T < MIN_STRESS_CLIENTS:
        raise ConfigError(f"T: stress needs at least {MIN_STRESS_CLIENTS} clients, got {cfg.T}")
    start = time.perf_counter()
    data = make_data(cfg, cycle=True)
    fed = Federation(cfg, data)
    round_times = []
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        fed.run_round()
        round_times.append(time.perf_counter() - t0)
    wall = time.perf_counter() - start
    expect = expected_trainable(cfg)
    counts = [c.trainable_count() for c in fed.clients]
    prompt_counts = [c.prompts.n_scalars for c in fed.clients]
    payload = [sum(np.asarray(v).size for v in ClientPublish.build(
        c.client_id, c.prompts.named_arrays(), c.last_mean_u, c.last_eval_acc
    ).prompt_arrays().values()) for c in fed.clients]
    summary = {
        "T": cfg.T, "rounds": cfg.rounds,
        "per_client_trainable": counts[0] if len(set(counts)) == 1 else None,
        "expected_per_client": expect,
        "counts_match": all(c == expect["total"] for c in counts)
        and all(p == expect["prompt"] for p in prompt_counts),
        "total_trainable": int(sum(counts)),
        "expected_total": cfg.T * expect["total"],
        "prompt_payload_scalars": payload[0] if len(set(payload)) == 1 else None,
        "round_seconds": _volatile(cfg, round_times),
        "wall_seconds": _volatile(cfg, wall),
        "peak_rss_bytes": _volatile(cfg, peak_rss_bytes()),
    }
    return fed.logs, summary, {"wall_seconds": wall, "peak_rss_bytes": peak_rss_bytes()}


# -- artifacts ------------------------------------------------------------------------


def write_run_artifacts(out_dir: Path, result: RunResult) -> list[str]:
    cfg = result.cfg
    write_csv(out_dir / "rounds.csv", rows_from_logs(result.logs), ROUND_COLUMNS)
    summary = {"config": cfg.to_dict(), "T": cfg.T, "rounds": len(result.logs),
               "final_accuracy": result.final_accuracy,
               "round_logs": [log_to_dict(log, cfg) for log in result.logs],
               "cross_eval": result.cross_eval.tolist() if result.cross_eval is not None else None,
               "trainable_per_client": expected_trainable(cfg)}
    (out_dir / "run.json").write_text(canonical_json(summary), encoding="utf-8")
    names = ["rounds.csv", "run.json"]
    if result.federation is not None:
        ckpt = out_dir / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for c in result.federation.clients:
            name = f"checkpoints/client_{c.client_id:03d}.arrays"
            checkpoint.save_client(out_dir / name, c, cfg.seed_init)
            names.append(name)
    return names


def load_run(run_dir: Path) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.is_file():
        raise InvalidInputError(f"missing run artifact {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not valid JSON ({exc})") from exc


def config_from_run(run: dict) -> FedConfig:
    d = dict(run["config"])
    d["prompted_blocks"] = tuple(d["prompted_blocks"])
    return FedConfig(**d)


def cross_eval_from_checkpoints(run_dir: Path, split: str = "test") -> np.ndarray:
    """Rebuild clients from a finished run's checkpoints and cross-evaluate them."""
    run_dir = Path(run_dir)
    cfg = config_from_run(load_run(run_dir))
    data = make_data(cfg, cycle=cfg.T > 64)
    backbone = build_backbone(cfg.backbone_config())
    clients = []
    for t, d in enumerate(data):
        path = run_dir / "checkpoints" / f"client_{t:03d}.arrays"
        if not path.is_file():
            raise InvalidInputError(f"missing checkpoint {path}")
        client = make_client(cfg, t, d, backbone)
        meta = checkpoint.load_client_into(path, client)
        if meta.get("backbone_seed") != cfg.seed_init:
            raise InvalidInputError(f"{path}: backbone seed does not match the run config")
        clients.append(client)
    return cross_evaluate(clients, split)


def export_plots(run_dir: Path) -> list[str]:
    """Plot-ready CSV files under ``run_dir/plots``; returns paths relative to run_dir."""
    run_dir = Path(run_dir)
    run = load_run(run_dir)
    if not (run_dir / "rounds.csv").is_file():
        raise InvalidInputError(f"missing run artifact {run_dir / 'rounds.csv'}")
    T = int(run["T"])
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    names = []
    for log in run["round_logs"]:
        if not log["weights"]:
            continue
        W = np.asarray(log["weights"], dtype=float)
        if W.shape != (T, T):
            raise InvalidInputError(f"round {log['round']}: weight matrix shape {W.shape}")
        name = f"plots/weights_round_{log['round']:03d}.csv"
        matrix_csv(run_dir / name, W)
        names.append(name)
    if run.get("cross_eval") is not None:
        matrix_csv(run_dir / "plots/cross_eval.csv", np.asarray(run["cross_eval"], dtype=float))
        names.append("plots/cross_eval.csv")
    series = []
    for log in run["round_logs"]:
        accs = [c["accuracy"] for c in log["clients"]]
        series.append({"round": log["round"], "mean_accuracy": float(np.mean(accs)),
                       **{f"client_{i}": a for i, a in enumerate(accs)}})
    cols = ["round", "mean_accuracy"] + [f"client_{i}" for i in range(T)]
    write_csv(run_dir / "plots/accuracy_series.csv", series, cols)
    names.append("plots/accuracy_series.csv")
    return names


def matrix_csv(path: Path, M: np.ndarray) -> None:
    rows = [{"row": i, **{f"col_{j}": float(M[i, j]) for j in range(M.shape[1])}}
            for i in range(M.shape[0])]
    write_csv(path, rows, ["row"] + [f"col_{j}" for j in range(M.shape[1])])


def schema(name: str) -> dict:
    return json.loads((SCHEMA_DIR / f"{name}.json").read_text(encoding="utf-8"))



def off_diagonal_mean(M: np.ndarray) -> float | None:
    T = M.shape[0]
    if T < 2:
        return None
    return float(M[~np.eye(T, dtype=bool)].mean())
