"""Acceptance gate: one test per criterion, each at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed in the terminal summary.  The
experiment criteria (8 to 11) share one cache of runs: 10 seeds, every
aggregation rate of the sweep plus the equal-weights variant.  Each of those
criteria is timed as the sum of the runs it needs on its own.
"""
import json
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from evifed import evidential as ev
from evifed import harness
from evifed.autodiff import Tensor, multihead_prefix_attention
from evifed.cli import main
from evifed.federation import FedConfig, run_isolated
from evifed.gradcheck import op_cases, run_case
from evifed.messages import SCHEMA_FIELDS, MessageBus, audit
from evifed.model import attention, prefix_attention
from simplex_oracle import expected_cross_entropy, kl_to_uniform

SEEDS = 10
MU_VALUES = harness.DEFAULT_MU_VALUES


def _within(start: float, budget: float) -> tuple[bool, float]:
    took = time.perf_counter() - start
    return took < budget, took


# -- 1 to 5: numerics ------------------------------------------------------------------


def test_criterion_01_closed_form_losses(criterion):
    start = time.perf_counter()
    unc = ev.unc_loss([2.0, 2.0], [1.0, 0.0]).item()
    kl21 = ev.kl_regularizer([2.0, 1.0]).item()
    kl_ones = [ev.kl_regularizer(np.ones(J)).item() for J in range(2, 9)]
    fast, took = _within(start, 1.0)
    ok = (abs(unc - 5.0 / 6.0) <= 1e-10 and abs(kl21 - (math.log(2.0) - 0.5)) <= 1e-10
          and all(v == 0.0 for v in kl_ones) and fast)
    criterion(1, ok, f"unc={unc!r} kl([2,1])={kl21!r} kl(ones) zero={all(v == 0.0 for v in kl_ones)} "
                     f"in {took:.3f}s")
    assert ok


def test_criterion_02_gradient_suite(criterion):
    names = sorted(op_cases())
    assert {"unc_loss", "kl_regularizer"} <= set(names)
    start = time.perf_counter()
    worst, worst_name = 0.0, None
    for i in range(100):
        name = names[i % len(names)]
        err = run_case(name, seed=1000 + i)
        if err > worst:
            worst, worst_name = err, name
    fast, took = _within(start, 30.0)
    ok = worst < 1e-5 and fast
    criterion(2, ok, f"100 cases over {len(names)} ops, worst rel err {worst:.2e} ({worst_name}) "
                     f"in {took:.1f}s")
    assert ok


def test_criterion_03_evidential_identities(criterion):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_sum, worst_u = 0.0, 0.0
    for _ in range(10_000):
        J = int(rng.integers(2, 9))
        z = rng.normal(0.0, 3.0, J)
        out = ev.evidential_output(z)
        worst_sum = max(worst_sum, abs(out.belief.sum() + out.uncertainty - 1.0))
        worst_u = max(worst_u, abs(out.uncertainty - J / out.alpha.sum()))
    fast, took = _within(start, 5.0)
    ok = worst_sum <= 1e-12 and worst_u <= 1e-12 and fast
    criterion(3, ok, f"max |sum b + u - 1| {worst_sum:.1e}, max |u - J/S| {worst_u:.1e} "
                     f"in {took:.2f}s")
    assert ok


def test_criterion_04_simplex_oracle(criterion):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = 0.0
    for case in range(20):
        J = 2 if case % 2 == 0 else 3
        a = rng.uniform(1.0, 5.0, J)
        k = int(rng.integers(0, J))
        worst = max(worst,
                    abs(expected_cross_entropy(a, k) - ev.unc_loss(a, ev.one_hot(k, J)).item()),
                    abs(kl_to_uniform(a) - ev.kl_regularizer(a).item()))
    fast, took = _within(start, 60.0)
    ok = worst < 1e-3 and fast
    criterion(4, ok, f"20 alphas (J=2,3), worst |quadrature - closed form| {worst:.1e} in {took:.1f}s")
    assert ok


def test_criterion_05_prefix_correctness(criterion):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    identical = 0
    for _ in range(100):
        L, w = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        Q, K, V = (Tensor(rng.normal(size=(int(rng.integers(1, 6)) if i == 0 else L, w)))
                   for i in range(3))
        empty = Tensor(np.zeros((0, w)))
        a = prefix_attention(Q, K, V, empty, empty).data
        b = attention(Q, K, V).data
        heads = int(rng.choice([1, 2, 4]))
        qkv = Tensor(rng.normal(size=(2, L, 3 * 4 * heads)))
        c = multihead_prefix_attention(qkv, Tensor(np.zeros((0, 4 * heads))),
                                       Tensor(np.zeros((0, 4 * heads))), heads).data
        d = multihead_prefix_attention(qkv, None, None, heads).data
        identical += int(np.array_equal(a, b) and np.array_equal(c, d))
    rows_ok = True
    Q = Tensor(rng.normal(size=(5, 4)))
    K, V = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    for d in (0, 2, 8):
        out = prefix_attention(Q, K, V, Tensor(rng.normal(size=(d, 4))), Tensor(rng.normal(size=(d, 4))))
        rows_ok &= out.shape[0] == 5
    fast, took = _within(start, 5.0)
    ok = identical == 100 and rows_ok and fast
    criterion(5, ok, f"{identical}/100 bit-identical, rows invariant for d in (0,2,8): {rows_ok}, "
                     f"in {took:.2f}s")
    assert ok


# -- 6, 7: protocol ----------------------------------------------------------------------


def test_criterion_06_mu_zero_equals_isolated(criterion, tmp_path):
    start = time.perf_counter()
    cfg = FedConfig(T=3, rounds=3, mu=0.0, deterministic=True)
    data = harness.make_data(cfg)
    fed_logs = harness.run_one(cfg, data, cross_eval=False).logs
    iso = [run_isolated(cfg, data, t) for t in range(cfg.T)]
    iso_rows = [{"round": r, **{k: getattr(iso[t][r], k) for k in
                                ("client", "accuracy", "closed_acc", "open_acc", "mean_u",
                                 "eval_accuracy")}}
                for r in range(cfg.rounds) for t in range(cfg.T)]
    harness.write_csv(tmp_path / "federated.csv", harness.rows_from_logs(fed_logs),
                      harness.ROUND_COLUMNS)
    harness.write_csv(tmp_path / "isolated.csv", iso_rows, harness.ROUND_COLUMNS)
    fed_bytes = (tmp_path / "federated.csv").read_bytes()
    same = fed_bytes == (tmp_path / "isolated.csv").read_bytes()
    fast, took = _within(start, 120.0)
    ok = same and fast
    criterion(6, ok, f"mu=0 federated log vs 3 isolated runs byte-identical: {same} "
                     f"({len(fed_bytes)} bytes) in {took:.1f}s")
    assert ok


def _data_fingerprints(data) -> set[str]:
    marks = set()
    for client in data:
        for batch in client.splits().values():
            for v in batch.images.ravel()[:64]:
                text = repr(float(v))
                if len(text) > 10:
                    marks.add(text)
    return marks


def test_criterion_07_privacy_audit(criterion):
    start = time.perf_counter()
    cfg = FedConfig(deterministic=True)
    data = harness.make_data(cfg)
    bus = MessageBus()
    harness.run_one(cfg, data, bus=bus, cross_eval=False)
    problems = audit(bus.lines)
    kinds = {json.loads(line)["type"] for line in bus.lines}
    marks = _data_fingerprints(data)
    leaks = sum(1 for line in bus.lines for m in marks if m in line)
    fast, took = _within(start, 120.0)
    ok = bool(bus.lines) and not problems and kinds <= set(SCHEMA_FIELDS) and leaks == 0 and fast
    criterion(7, ok, f"{len(bus.lines)} messages of types {sorted(kinds)}, {len(problems)} schema "
                     f"violations, {leaks} dataset values found, in {took:.1f}s")
    assert ok, problems[:5]


# -- 8 to 11: experiments ---------------------------------------------------------------


class _Experiments:
    """Runs shared by the directional criteria; built once on first use."""

    def __init__(self):
        self.base = FedConfig(deterministic=True)
        self.mus = sorted(set(MU_VALUES) | {self.base.mu})
        self.acc = {key: [] for key in [*self.mus, "equal"]}
        self.secs = {key: 0.0 for key in self.acc}
        self.cross_eval = []
        self.weights = []
        for s in range(SEEDS):
            cfg = harness.seeded(self.base, s)
            data = harness.make_data(cfg)
            for mu in self.mus:
                default = mu == self.base.mu
                t0 = time.perf_counter()
                res = harness.run_one(cfg.replace(mu=mu), data, cross_eval=default)
                self.secs[mu] += time.perf_counter() - t0
                self.acc[mu].append(res.final_accuracy)
                if default:
                    self.cross_eval.append(res.cross_eval)
                    self.weights.append(np.array(res.logs[-1].weights))
            t0 = time.perf_counter()
            res = harness.run_variant(cfg, "no_dluc", data)
            self.secs["equal"] += time.perf_counter() - t0
            self.acc["equal"].append(res.final_accuracy)

    def full(self):
        return np.array(self.acc[self.base.mu])


@pytest.fixture(scope="module")
def experiments():
    return _Experiments()


def test_criterion_08_dluc_benefit(criterion, experiments):
    ex = experiments
    full, equal, no_server = ex.full(), np.array(ex.acc["equal"]), np.array(ex.acc[0.0])
    d_equal, d_server = full - equal, full - no_server
    took = ex.secs[ex.base.mu] + ex.secs["equal"] + ex.secs[0.0]
    ok = d_equal.mean() >= 0 and d_server.mean() >= 0 and took < 30 * 60
    criterion(8, ok, f"full {full.mean():.4f} (var {full.var(ddof=1):.2e}), "
                     f"equal {equal.mean():.4f} (var {equal.var(ddof=1):.2e}), "
                     f"no-server {no_server.mean():.4f} (var {no_server.var(ddof=1):.2e}); "
                     f"margins {d_equal.mean():+.4f} / {d_server.mean():+.4f}; {took / 60:.1f} min")
    print("per-seed full - equal:", np.round(d_equal, 4).tolist())
    print("per-seed full - no-server:", np.round(d_server, 4).tolist())
    assert ok


def test_criterion_09_cross_eval_drop(criterion, experiments):
    ex = experiments
    diag = float(np.mean([np.diag(M).mean() for M in ex.cross_eval]))
    off = float(np.mean([harness.off_diagonal_mean(M) for M in ex.cross_eval]))
    took = ex.secs[ex.base.mu]
    ok = diag > off and took < 15 * 60
    criterion(9, ok, f"mean diagonal {diag:.4f} vs off-diagonal {off:.4f} over {SEEDS} seeds; "
                     f"{took / 60:.1f} min")
    assert ok


def test_criterion_10_weight_relatedness(criterion, experiments):
    ex = experiments
    wins = 0
    for W in ex.weights:
        pair = (W[0, 1] + W[1, 0]) / 2
        unrelated = (W[0, 2:].mean() + W[1, 2:].mean()) / 2
        wins += int(pair > unrelated)
    took = ex.secs[ex.base.mu]
    ok = wins >= 7 and took < 15 * 60
    criterion(10, ok, f"pair weight > mean unrelated weight in {wins}/{SEEDS} seeds; "
                      f"{took / 60:.1f} min")
    assert ok


def test_criterion_11_mu_sweep_shape(criterion, experiments):
    ex = experiments
    means = {mu: float(np.mean(ex.acc[mu])) for mu in MU_VALUES}
    best = max(means.values())
    winners = [mu for mu, m in means.items() if m == best]
    extremes = (min(MU_VALUES), max(MU_VALUES))
    took = sum(ex.secs[mu] for mu in MU_VALUES)
    ok = not any(mu in extremes for mu in winners) and took < 45 * 60
    shape = ", ".join(f"{mu:g}: {m:.4f}" for mu, m in means.items())
    criterion(11, ok, f"mean accuracy by mu {{{shape}}}, best {winners}; {took / 60:.1f} min")
    assert ok


# -- 12, 13: scale and determinism ---------------------------------------------------------


def test_criterion_12_stress(criterion, tmp_path):
    out = tmp_path / "stress"
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "evifed", "stress", "--T", "100", "--rounds", "2",
                           "--out-dir", str(out)], capture_output=True, text=True)
    took = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((out / "stress.json").read_text())
    cfg = FedConfig()
    m, h, d = cfg.hidden_dim, cfg.head_hidden, cfg.prompt_len
    J = cfg.backbone_config().answer_count
    formula = 2 * len(cfg.prompted_blocks) * d * m + (2 * m * h + h) + (h * J + J)
    peak = summary["peak_rss_bytes"]
    ok = (summary["counts_match"] and summary["per_client_trainable"] == formula
          and took < 600 and peak < 2 * 1024 ** 3)
    criterion(12, ok, f"T=100, 2 rounds in {took:.0f}s, peak RSS {peak / 2 ** 20:.0f} MiB, "
                      f"per-client trainable {summary['per_client_trainable']} vs formula {formula}")
    assert ok


TINY = "T = 3\nrounds = 2\nstep_l = 2\nstep_c = 2\nper_client_n = 40\n"
STRESS_TINY = "T = 100\nstep_l = 1\nstep_c = 1\nper_client_n = 30\n"


def _all_commands(root: Path) -> None:
    (root / "tiny.ini").write_text(TINY)
    (root / "stress.ini").write_text(STRESS_TINY)
    tiny = ["--config", str(root / "tiny.ini"), "--deterministic"]
    commands = [
        ["run", *tiny, "--out-dir", str(root / "run")],
        ["cross-eval", "--deterministic", "--run-dir", str(root / "run"), "--out-dir", str(root / "ce")],
        ["export-plots", str(root / "run"), "--deterministic"],
        ["ablate", *tiny, "--seeds", "2", "--out-dir", str(root / "ablate")],
        ["sweep-mu", *tiny, "--values", "0,0.2,1", "--seeds", "2",
         "--out-dir", str(root / "sweep")],
        ["stress", "--config", str(root / "stress.ini"), "--deterministic", "--rounds", "1",
         "--out-dir", str(root / "stress")],
    ]
    for argv in commands:
        assert main(argv) == 0, argv


def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_13_determinism(criterion, tmp_path):
    root = tmp_path / "work"
    root.mkdir()
    _all_commands(root)
    first = _snapshot(root)
    shutil.rmtree(root)
    root.mkdir()
    _all_commands(root)
    second = _snapshot(root)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differing and len(first) > 10
    criterion(13, ok, f"6 commands run twice, {len(first)} files, {len(differing)} differ")
    assert ok, differing
