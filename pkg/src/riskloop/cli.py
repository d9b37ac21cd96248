"""Command-line runner: execute task streams, sweep hyperparameters,
report on traces, and replay-verify them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from typing import Mapping, Sequence

from .core import ProblemSpec, TaskKind
from .engine import EngineConfig, RecoveryMode, WorkflowEngine, config_from_mapping, deterministic_run_id
from .providers import (Interpretation, LiveTaskAdapter, ReferenceSpec,
                        RemoteChatClient, RemoteEmbeddingClient, SlotSpec,
                        StepSpec, SyntheticProvider, SyntheticTaskSpec)
from . import trace as trace_mod


class ConfigError(Exception):
    pass


class UnknownParam(Exception):
    pass


SWEEP_PARAMS = {
    "N": "n_samples",
    "tau_sim": "tau_sim_base",
    "K_max": "k_max",
    "R": "max_retries",
    "lam": "lam",
    "beta": "beta",
}


def load_config(path: str) -> EngineConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat JSON object")
    try:
        return config_from_mapping(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _step_from_dict(data: Mapping) -> StepSpec:
    return StepSpec(
        interpretations=tuple(Interpretation(str(a), float(p))
                              for a, p in data["interpretations"]),
        correct_index=int(data["correct_index"]),
        references=tuple(ReferenceSpec(int(r["producer"]),
                                       float(r.get("flake_rate", 0.0)),
                                       float(r.get("compatibility", 1.0)))
                         for r in data.get("references", [])),
        verifier_mode=data.get("verifier_mode", "exact"),
        conservative=tuple(float(p) for p in data["conservative"])
        if data.get("conservative") is not None else None,
        slots=tuple(SlotSpec(s["name"], tuple((str(v), float(p)) for v, p in s["values"]))
                    for s in data.get("slots", [])),
    )


def load_tasks(path: str, seed: int):
    """A task source is either a synthetic spec file or a live problem file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read tasks {path}: {exc}") from exc
    kind = data.get("kind", "synthetic")
    if kind == "synthetic":
        specs = {}
        problems = []
        for entry in data.get("tasks", []):
            spec = SyntheticTaskSpec(
                task_id=entry["task_id"],
                steps=tuple(_step_from_dict(s) for s in entry["steps"]),
                statement=entry.get("statement", "synthetic task"),
                embedding_noise=float(entry.get("embedding_noise", 0.0)),
            )
            specs[spec.task_id] = spec
            problems.append(ProblemSpec(
                id=spec.task_id,
                statement=spec.statement,
                task_kind=TaskKind.SYNTHETIC,
                horizon=int(entry.get("horizon", len(spec.steps))),
            ))
        return SyntheticProvider(specs, seed=seed), problems
    if kind == "live":
        chat = RemoteChatClient()
        embedder = RemoteEmbeddingClient()
        provider = LiveTaskAdapter(chat, embedder,
                                   include_slots=bool(data.get("include_slots", False)))
        problems = [ProblemSpec(
            id=entry["id"],
            statement=entry["statement"],
            task_kind=TaskKind(entry.get("task_kind", "qa")),
            horizon=int(entry.get("horizon", 1)),
            metadata={str(k): str(v) for k, v in entry.get("metadata", {}).items()},
        ) for entry in data.get("problems", [])]
        return provider, problems
    raise ConfigError(f"unknown task source kind {kind!r}")


def _apply_overrides(config: EngineConfig, args) -> EngineConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "parallelism", None) is not None:
        updates["parallelism"] = args.parallelism
    for flag in (args.ablate or "").split(","):
        flag = flag.strip()
        if not flag:
            continue
        key = f"disable_{flag}"
        if key not in {f.name for f in fields(EngineConfig)}:
            raise ConfigError(f"unknown ablation flag {flag!r}")
        updates[key] = True
    if getattr(args, "fixed_k", None) is not None:
        updates["fixed_k"] = args.fixed_k
    if getattr(args, "recovery", None):
        updates["recovery_mode"] = RecoveryMode(args.recovery)
    return replace(config, **updates) if updates else config


def execute_stream(config: EngineConfig, provider, problems: Sequence[ProblemSpec],
                   run_id: str | None = None):
    engine = WorkflowEngine(config, provider, run_id=run_id)
    results = [engine.run_problem(problem) for problem in problems]
    return engine, results


def _calibration_snapshot(engine: WorkflowEngine) -> dict:
    state = engine.calibration
    low = [p for u, p in state.observations if u < state.tau_low]
    high = [p for u, p in state.observations if u > state.tau_high]
    return {
        "temperature": state.temperature,
        "observations": len(state.observations),
        "low_bucket": {"count": len(low),
                       "pass_rate": (sum(low) / len(low)) if low else None},
        "high_bucket": {"count": len(high),
                        "pass_rate": (sum(high) / len(high)) if high else None},
    }


def _write_run_outputs(out_dir: str, engine: WorkflowEngine, config: EngineConfig,
                       results) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, f"{engine.run_id}.jsonl")
    trace_mod.write_trace(trace_path, engine.trace_records)
    summary = trace_mod.summarize(engine.trace_records)
    summary["run_id"] = engine.run_id
    summary["calibration"] = _calibration_snapshot(engine)
    summary["config"] = {f.name: getattr(config, f.name).value
                         if hasattr(getattr(config, f.name), "value")
                         else getattr(config, f.name)
                         for f in fields(EngineConfig)}
    summary["results"] = [{
        "problem_id": r.problem_id,
        "solved": r.solved,
        "refinements_used": r.refinements_used,
        "usage": r.total_usage,
    } for r in results]
    with open(os.path.join(out_dir, f"{engine.run_id}.summary.json"), "w",
              encoding="utf-8") as handle:
        json.dump(summary, handle, sort_keys=True, indent=2)
    return summary


def _print_summary(summary: dict) -> None:
    print(f"run {summary['run_id']}: {summary['problems']} problems")
    print(f"  accuracy      {summary['accuracy'] * 100:.1f}%")
    print(f"  avg usage     {summary['avg_usage']:.2f} units")
    print(f"  avg K         {summary['avg_k']:.2f}")
    modes = summary["mode_percent"]
    print("  mode split    " + "  ".join(f"{name} {pct:.1f}%"
                                         for name, pct in sorted(modes.items())))
    print(f"  retry rate    {summary['retry_percent']:.1f}%")


def cmd_run(args) -> int:
    try:
        config = _apply_overrides(load_config(args.config), args)
        provider, problems = load_tasks(args.tasks, config.seed)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run_id = deterministic_run_id(config, extra=os.path.basename(args.tasks))
    engine, results = execute_stream(config, provider, problems, run_id=run_id)
    summary = _write_run_outputs(args.out, engine, config, results)
    _print_summary(summary)
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        print(f"error: unknown sweep parameter {args.param!r} "
              f"(choose from {', '.join(sorted(SWEEP_PARAMS))})", file=sys.stderr)
        return 2
    try:
        base = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    field_name = SWEEP_PARAMS[args.param]
    rows = []
    for raw in args.values:
        value: object = int(raw) if field_name in ("n_samples", "k_max", "max_retries") else float(raw)
        config = replace(base, **{field_name: value})
        try:
            provider, problems = load_tasks(args.tasks, config.seed)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        engine, results = execute_stream(config, provider, problems)
        summary = trace_mod.summarize(engine.trace_records)
        rows.append((raw, summary["accuracy"], summary["avg_usage"]))
    print(f"sweep over {args.param} (shared seed {base.seed})")
    print(f"{'value':>10}  {'accuracy':>9}  {'avg usage':>10}")
    for value, accuracy, usage in rows:
        print(f"{value:>10}  {accuracy * 100:>8.1f}%  {usage:>10.2f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"sweep_{args.param}.json"), "w",
                  encoding="utf-8") as handle:
            json.dump([{"value": v, "accuracy": a, "avg_usage": u}
                       for v, a, u in rows], handle, sort_keys=True, indent=2)
    return 0


def cmd_report(args) -> int:
    try:
        records = trace_mod.load_trace_dir(args.traces)
    except trace_mod.NoTraces as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    outcomes = trace_mod.problem_outcomes(records)
    rows, coefficient = trace_mod.rank_consistency(outcomes)
    print("risk decile report")
    print(f"{'bin':>4}  {'mean risk':>10}  {'success':>8}  {'count':>6}")
    for row in rows:
        print(f"{row['bin']:>4}  {row['mean_risk']:>10.4f}  "
              f"{row['success_rate'] * 100:>7.1f}%  {row['count']:>6}")
    label = "n/a" if coefficient is None else f"{coefficient:.4f}"
    print(f"binned Spearman: {label}")
    summary = trace_mod.summarize(records)
    print("\nstrategy distribution")
    for name, pct in sorted(summary["mode_percent"].items()):
        print(f"  {name:<8} {pct:>6.1f}%")
    print(f"  avg K   {summary['avg_k']:.2f}")
    print(f"  retry   {summary['retry_percent']:.1f}%")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as handle:
            json.dump({"bins": rows, "spearman": coefficient, "summary": summary},
                      handle, sort_keys=True, indent=2)
    return 0


def cmd_replay(args) -> int:
    try:
        records = trace_mod.load_trace_dir(args.traces)
    except trace_mod.NoTraces as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summaries = [p for p in sorted(os.listdir(args.traces)) if p.endswith(".summary.json")]
    lam, beta, alpha, tau_slot = 0.5, 0.3, 0.6, 0.4
    if summaries:
        with open(os.path.join(args.traces, summaries[0]), "r", encoding="utf-8") as handle:
            config = json.load(handle).get("config", {})
        lam = config.get("lam", lam)
        beta = config.get("beta", beta)
        alpha = config.get("alpha", alpha)
        tau_slot = config.get("tau_slot", tau_slot)
    mismatches = trace_mod.replay_check(records, lam, beta, alpha, tau_slot)
    if mismatches:
        for line in mismatches[:50]:
            print(f"mismatch: {line}", file=sys.stderr)
        print(f"replay failed: {len(mismatches)} mismatches in {len(records)} records",
              file=sys.stderr)
        return 1
    print(f"replay ok: {len(records)} records verified")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskloop",
        description="Uncertainty-aware closed-loop workflow runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a task stream")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--tasks", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--parallelism", type=int, default=None)
    run_p.add_argument("--ablate", default="",
                       help="comma list: sensing,branching,refinement,calibration")
    run_p.add_argument("--fixed-k", dest="fixed_k", type=int, default=None)
    run_p.add_argument("--recovery", default="",
                       choices=["", "RootCause", "FullRestart", "LocalRetry"])
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="rerun a stream across one parameter")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--tasks", required=True)
    sweep_p.add_argument("--param", required=True)
    sweep_p.add_argument("--values", nargs="*", default=[])
    sweep_p.add_argument("--out", default="")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--ablate", default="")
    sweep_p.set_defaults(func=cmd_sweep)

    report_p = sub.add_parser("report", help="calibration and strategy report")
    report_p.add_argument("--traces", required=True)
    report_p.add_argument("--out", default="")
    report_p.set_defaults(func=cmd_report)

    replay_p = sub.add_parser("replay", help="verify derived trace quantities")
    replay_p.add_argument("--traces", required=True)
    replay_p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
