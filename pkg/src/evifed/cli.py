"""``evifed`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
failure (including missing input artifacts).
"""
from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

from evifed import harness
from evifed.config import load_config
from evifed.errors import ConfigError, DimensionError, InvalidInputError
from evifed.federation import FedConfig

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT_DIR = "evifed-out"


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="key = value config file (T is required)")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-init", type=int)
    p.add_argument("--seed-shuffle", type=int)
    p.add_argument("--out-dir", help="output directory (default: $EVIFED_OUT_DIR or "
                                     f"./{DEFAULT_OUT_DIR})")
    p.add_argument("--deterministic", action="store_true",
                   help="disable dropout and write null for wall-clock fields")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evifed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("run", help="one federated run"))

    p = sub.add_parser("ablate", help="full / no-client / no-server / no-DLUC variants")
    _common(p)
    p.add_argument("--seeds", type=int, default=1, help="number of seed triples")

    p = sub.add_parser("sweep-mu", help="one run per aggregation rate")
    _common(p)
    p.add_argument("--values", default=",".join(str(v) for v in harness.DEFAULT_MU_VALUES),
                   help="comma-separated aggregation rates")
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("stress", help="many-client run with memory and timing report")
    _common(p)
    p.add_argument("--T", type=int, dest="stress_T", default=harness.MIN_STRESS_CLIENTS)
    p.add_argument("--rounds", type=int, default=2)

    p = sub.add_parser("cross-eval", help="cross-evaluate the clients of a finished run")
    _common(p, config=False)
    p.add_argument("--run-dir", help="directory of a finished run (default: the output dir)")
    p.add_argument("--split", choices=("train", "eval", "test"), default="test")

    p = sub.add_parser("export-plots", help="plot-ready data files from a finished run")
    _common(p, config=False)
    p.add_argument("run_dir", nargs="?", help="directory of a finished run")
    return parser


def resolve_config(args) -> FedConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else FedConfig()
    changes = {}
    for flag in ("seed_data", "seed_init", "seed_shuffle"):
        value = getattr(args, flag)
        if value is not None:
            changes[flag] = value
    if args.deterministic:
        changes["deterministic"] = True
    return cfg.replace(**changes) if changes else cfg


def out_dir_for(args) -> Path:
    out = Path(args.out_dir or os.environ.get("EVIFED_OUT_DIR") or DEFAULT_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"values: cannot parse {text!r} ({exc})") from exc


def _finish(manifest: harness.RunManifest, out: Path, names, cfg: FedConfig) -> None:
    manifest.record(out, names)
    manifest.finished = harness.now_stamp(cfg)
    manifest.write(out)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = out_dir_for(args)
    manifest = harness.RunManifest("run", cfg.to_dict(), {}, started=harness.now_stamp(cfg))
    result = harness.run_one(cfg)
    names = harness.write_run_artifacts(out, result)
    _finish(manifest, out, names, cfg)
    print(f"run: {cfg.T} clients, {cfg.rounds} rounds, final mean accuracy "
          f"{result.final_accuracy:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = out_dir_for(args)
    manifest = harness.RunManifest("ablate", cfg.to_dict(), {"seeds": args.seeds},
                                   started=harness.now_stamp(cfg))
    rows, summary = harness.ablate(cfg, args.seeds)
    harness.write_csv(out / "ablation.csv", rows, ("variant", "seed") + harness.ROUND_COLUMNS)
    summary = {"config": cfg.to_dict(), **summary}
    (out / "ablation.json").write_text(harness.canonical_json(summary), encoding="utf-8")
    _finish(manifest, out, ["ablation.csv", "ablation.json"], cfg)
    print(f"{'variant':<10} {'mean acc':>9} {'variance':>10}")
    for name, row in summary["variants"].items():
        print(f"{name:<10} {row['mean']:>9.4f} {row['variance']:>10.2e}")
    for name, d in summary["deltas"].items():
        print(f"{name}: {d['mean']:+.4f} (variance {d['variance']:.2e})")
    return EXIT_OK


def cmd_sweep_mu(args) -> int:
    cfg = resolve_config(args)
    values = _parse_values(args.values)
    out = out_dir_for(args)
    manifest = harness.RunManifest("sweep-mu", cfg.to_dict(),
                                   {"seeds": args.seeds, "values": values},
                                   started=harness.now_stamp(cfg))
    rows, summary = harness.sweep_mu(cfg, values, args.seeds)
    harness.write_csv(out / "sweep_mu.csv", rows, ("mu", "seed") + harness.ROUND_COLUMNS)
    summary = {"config": cfg.to_dict(), **summary}
    (out / "sweep_mu.json").write_text(harness.canonical_json(summary), encoding="utf-8")
    _finish(manifest, out, ["sweep_mu.csv", "sweep_mu.json"], cfg)
    for g in summary["groups"]:
        print(f"mu={g['mu']:<6g} mean acc {g['mean']:.4f} (variance {g['variance']:.2e})")
    print(f"best mu {summary['best_mu']:g}, interior: {summary['interior_best']}")
    return EXIT_OK


def cmd_stress(args) -> int:
    cfg = resolve_config(args).replace(T=args.stress_T, rounds=args.rounds)
    out = out_dir_for(args)
    manifest = harness.RunManifest("stress", cfg.to_dict(), {}, started=harness.now_stamp(cfg))
    logs, summary, measured = harness.stress(cfg)
    harness.write_csv(out / "stress_rounds.csv", harness.rows_from_logs(logs),
                      harness.ROUND_COLUMNS)
    summary = {"config": cfg.to_dict(), **summary}
    (out / "stress.json").write_text(harness.canonical_json(summary), encoding="utf-8")
    _finish(manifest, out, ["stress_rounds.csv", "stress.json"], cfg)
    print(f"stress: T={cfg.T}, rounds={cfg.rounds}, wall {measured['wall_seconds']:.1f} s, "
          f"peak RSS {measured['peak_rss_bytes'] / 2**20:.0f} MiB, per-client trainable "
          f"{summary['per_client_trainable']} (formula {summary['expected_per_client']['total']})")
    return EXIT_OK if summary["counts_match"] else EXIT_RUNTIME


def cmd_cross_eval(args) -> int:
    out = out_dir_for(args)
    run_dir = Path(args.run_dir) if args.run_dir else out
    run = harness.load_run(run_dir)
    cfg = harness.config_from_run(run)
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    manifest = harness.RunManifest("cross-eval", cfg.to_dict(),
                                   {"split": args.split, "run_dir": str(run_dir)},
                                   started=harness.now_stamp(cfg))
    M = harness.cross_eval_from_checkpoints(run_dir, args.split)
    harness.matrix_csv(out / "cross_eval.csv", M)
    summary = {"split": args.split, "T": cfg.T, "matrix": M.tolist(),
               "mean_diagonal": float(M.diagonal().mean()),
               "mean_off_diagonal": harness.off_diagonal_mean(M)}
    (out / "cross_eval.json").write_text(harness.canonical_json(summary), encoding="utf-8")
    _finish(manifest, out, ["cross_eval.csv", "cross_eval.json"], cfg)
    print(f"cross-eval ({args.split}): diagonal {summary['mean_diagonal']:.4f}, "
          f"off-diagonal {summary['mean_off_diagonal']}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    run_dir = Path(args.run_dir or args.out_dir or os.environ.get("EVIFED_OUT_DIR")
                   or DEFAULT_OUT_DIR)
    run = harness.load_run(run_dir)
    cfg = harness.config_from_run(run)
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    manifest = harness.RunManifest("export-plots", cfg.to_dict(), {}, started=harness.now_stamp(cfg))
    names = harness.export_plots(run_dir)
    _finish(manifest, run_dir, names, cfg)
    print(f"export-plots: wrote {len(names)} files under {run_dir / 'plots'}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "sweep-mu": cmd_sweep_mu,
            "stress": cmd_stress, "cross-eval": cmd_cross_eval,
            "export-plots": cmd_export_plots}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidInputError, DimensionError) as exc:
        print(f"evifed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything else
        print(f"evifed {args.command}: runtime failure: {exc}", file=sys.stderr)
        if os.environ.get("EVIFED_TRACEBACK"):
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
