"""Command-line interface.

Subcommands: simulate, ensemble, merit, corpus, train-residual, roc.  Every
command takes --config (JSON), --seed, --out and the common overrides; all
outputs are CSV/JSON files written under --out.  Exit codes: 0 success,
2 configuration error, 3 numerical divergence in at least one run.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import detection
from .harness import (
    ConfigError,
    Corpus,
    ResidualEvaluation,
    RunResult,
    ScenarioConfig,
    evaluate_residuals,
    generate_corpus,
    run_ensemble,
    run_merit,
    run_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _vec(v: np.ndarray) -> str:
    arr = np.atleast_1d(v)
    return ";".join(_fmt(float(x)) for x in arr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftclab",
        description="Fault-tolerant control workbench: simulation and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": "run a single closed-loop scenario",
        "ensemble": "run an ensemble of scenario runs and aggregate",
        "merit": "run the 9-scenario technique comparison and merit table",
        "corpus": "generate a Poisson-fault residual corpus",
        "train-residual": "fit logistic residual classifiers on a corpus",
        "roc": "evaluate residual classifiers and export ROC curves",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="scenario config JSON")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--plant", choices=["cruise", "manipulator"])
        p.add_argument("--ft", choices=["noft", "ef-fdi", "ser-ft", "pl-implicit",
                                        "pl-explicit"])
        p.add_argument("--fault", choices=["none", "freeze", "drift", "injection",
                                           "poisson"])
        p.add_argument("--trajectory", choices=["constant", "ramp", "sinusoid"])
        p.add_argument("--runs", type=int)
        p.add_argument("--horizon", type=float)
        if name in ("train-residual", "roc"):
            p.add_argument(
                "--residuals", type=Path,
                help="existing residual CSV (default: generate a corpus from config)",
            )
    return parser


def _load_config(args: argparse.Namespace) -> ScenarioConfig:
    payload: dict = {}
    if args.config is not None:
        try:
            payload = json.loads(args.config.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for key in ("seed", "plant", "ft", "fault", "trajectory", "runs", "horizon"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    if args.command == "corpus" and "fault" not in payload:
        payload["fault"] = "poisson"
    if args.command in ("corpus", "train-residual", "roc"):
        payload.setdefault("ft", "pl-implicit")
        payload.setdefault("fault", "poisson")
        payload.setdefault("horizon", 32.0)
    return ScenarioConfig.from_dict(payload)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_metrics_csv(path: Path, results: Sequence[RunResult]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["run", "rmse_tracking", "mse_belief", "mse_belief_faulty",
             "mse_belief_healthy", "diverged"]
        )
        for i, res in enumerate(results):
            comps = res.metrics.mse_belief_components
            faulty = res.faulty_components
            if len(comps) > 1 and faulty:
                healthy = [j for j in range(len(comps)) if j not in faulty]
                mse_faulty = _fmt(float(np.mean([comps[j] for j in faulty])))
                mse_healthy = (
                    _fmt(float(np.mean([comps[j] for j in healthy]))) if healthy else ""
                )
            else:
                mse_faulty = ""
                mse_healthy = ""
            writer.writerow(
                [i, _fmt(res.metrics.rmse_tracking), _fmt(res.metrics.mse_belief),
                 mse_faulty, mse_healthy, int(res.metrics.diverged)]
            )


def _write_timeseries_csv(path: Path, result: RunResult) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "x_true", "x_est", "reference", "u", "fault_active"])
        for t, x_true, x_est, ref, u, fault_active in result.timeseries:
            writer.writerow(
                [_fmt(t), _vec(x_true), _vec(x_est), _vec(ref), _vec(u), fault_active]
            )


def _write_beliefs_csv(path: Path, result: RunResult) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "sensor_id", "component", "alpha", "beta",
                         "expected_precision"])
        for t, sensor_id, comp, alpha, beta, expected in result.belief_log:
            writer.writerow(
                [_fmt(t), sensor_id, comp, _fmt(alpha), _fmt(beta), _fmt(expected)]
            )


def _write_residuals(path: Path, records) -> None:
    with path.open("w", newline="") as fh:
        detection.write_residuals_csv(records, fh)


def _cmd_simulate(cfg: ScenarioConfig, out: Path) -> int:
    result = run_scenario(cfg)
    _write_metrics_csv(out / "metrics.csv", [result])
    _write_timeseries_csv(out / "timeseries.csv", result)
    _write_residuals(out / "residuals.csv", result.residuals)
    _write_beliefs_csv(out / "beliefs.csv", result)
    return EXIT_DIVERGED if result.metrics.diverged else EXIT_OK


def _cmd_ensemble(cfg: ScenarioConfig, out: Path) -> int:
    ens = run_ensemble(cfg)
    _write_metrics_csv(out / "metrics.csv", ens.runs)
    with (out / "ensemble_mae.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "mae"])
        for k, value in enumerate(ens.ensemble_mae):
            writer.writerow([_fmt(k * cfg.dt), _fmt(float(value))])
    _write_json(
        out / "summary.json",
        {
            "runs": len(ens.runs),
            "mean_rmse_tracking": ens.mean_rmse,
            "std_rmse_tracking": ens.std_rmse,
            "mean_mse_belief": ens.mean_mse_belief,
            "any_diverged": ens.any_diverged,
        },
    )
    return EXIT_DIVERGED if ens.any_diverged else EXIT_OK


def _cmd_merit(cfg: ScenarioConfig, out: Path) -> int:
    table, samples, any_diverged = run_merit(cfg)
    _write_json(
        out / "merit.json",
        {
            "techniques": list(table.techniques),
            "pairwise": table.pairwise.tolist(),
            "total_merit": table.total_merit,
            "n_scenarios": table.n_scenarios,
        },
    )
    with (out / "scenario_rmse.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["technique", "fault", "trajectory", "run", "rmse_tracking"])
        for tech in table.techniques:
            for (fault_kind, trajectory) in sorted(samples[tech]):
                for i, rmse in enumerate(samples[tech][(fault_kind, trajectory)]):
                    writer.writerow([tech, fault_kind, trajectory, i, _fmt(rmse)])
    return EXIT_DIVERGED if any_diverged else EXIT_OK


def _cmd_corpus(cfg: ScenarioConfig, out: Path) -> int:
    corpus = generate_corpus(cfg)
    _write_residuals(out / "residuals.csv", corpus.records)
    labels = [r.fault_truth for r in corpus.records]
    _write_json(
        out / "corpus.json",
        {
            "split_t": corpus.split_t,
            "n_fault_events": corpus.n_fault_events,
            "n_steps": corpus.n_steps,
            "n_records": len(corpus.records),
            "label_fraction": float(np.mean(labels)) if labels else 0.0,
            "any_diverged": corpus.any_diverged,
        },
    )
    return EXIT_DIVERGED if corpus.any_diverged else EXIT_OK


def _load_or_generate_corpus(cfg: ScenarioConfig, args: argparse.Namespace) -> Corpus:
    residuals_path: Path | None = getattr(args, "residuals", None)
    if residuals_path is None:
        return generate_corpus(cfg)
    try:
        with residuals_path.open() as fh:
            records = detection.read_residuals_csv(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read residuals: {exc}") from exc
    if not records:
        raise ConfigError("residual CSV is empty")
    meta_path = residuals_path.parent / "corpus.json"
    if meta_path.exists():
        split_t = float(json.loads(meta_path.read_text())["split_t"])
    else:
        split_t = 0.8 * max(r.t for r in records)
    return Corpus(records=records, split_t=split_t, n_fault_events=0,
                  n_steps=0, any_diverged=False)


def _evaluation_payload(ev: ResidualEvaluation) -> dict:
    return {
        "auc_ser": ev.auc_ser,
        "auc_beta": ev.auc_beta,
        "models": {"ser": ev.model_ser.to_dict(), "beta": ev.model_beta.to_dict()},
    }


def _cmd_train_residual(cfg: ScenarioConfig, out: Path, args: argparse.Namespace) -> int:
    corpus = _load_or_generate_corpus(cfg, args)
    ev = evaluate_residuals(corpus)
    _write_json(out / "models.json", _evaluation_payload(ev))
    return EXIT_OK


def _cmd_roc(cfg: ScenarioConfig, out: Path, args: argparse.Namespace) -> int:
    corpus = _load_or_generate_corpus(cfg, args)
    ev = evaluate_residuals(corpus)
    with (out / "roc_ser.csv").open("w", newline="") as fh:
        detection.write_roc_csv(ev.roc_ser, fh)
    with (out / "roc_beta.csv").open("w", newline="") as fh:
        detection.write_roc_csv(ev.roc_beta, fh)
    _write_json(out / "auc.json", _evaluation_payload(ev))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate":
        return _cmd_simulate(cfg, out)
    if args.command == "ensemble":
        return _cmd_ensemble(cfg, out)
    if args.command == "merit":
        return _cmd_merit(cfg, out)
    if args.command == "corpus":
        return _cmd_corpus(cfg, out)
    if args.command == "train-residual":
        return _cmd_train_residual(cfg, out, args)
    return _cmd_roc(cfg, out, args)


if __name__ == "__main__":
    sys.exit(main())
