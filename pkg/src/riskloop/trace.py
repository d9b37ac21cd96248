"""JSONL trace persistence, replay verification, and report math.

Traces are append-only, one JSON object per line with sorted keys, so a
rerun with the same seed yields byte-identical files.  Every derived
quantity in a record can be recomputed from the record itself plus the
run configuration; ``replay_check`` does exactly that.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from . import calibration as cal
from .core import Mode, Verdict
from .regulating import compound_risk


class NoTraces(Exception):
    """The report was pointed at a directory without any trace files."""


REPLAY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TraceRecord:
    run_id: str
    problem_id: str
    seq: int
    iteration: int
    task_step: int
    is_terminal: bool
    step_id: int
    supersedes: int | None
    u: float
    u_cal: float
    u_tilde: float
    slot_us: tuple[tuple[str, float], ...]
    r: float
    c: float
    mode: Mode
    k: int
    outcome: Verdict
    boosted: bool
    preds: tuple[tuple[int, float, float], ...]
    temperature: float
    theta_high: float
    theta_low: float
    threshold_source: str
    sampler_calls: int
    verifier_calls: int
    embed_calls: int
    usage_units: float
    sensing_units: float
    acting_units: float
    refinement: Mapping[str, object] | None = None

    def __post_init__(self) -> None:
        for name in ("u", "u_cal", "u_tilde", "r", "c", "usage_units"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")


def record_to_dict(record: TraceRecord) -> dict:
    data = asdict(record)
    data["mode"] = record.mode.value
    data["outcome"] = record.outcome.value
    data["slot_us"] = [[name, value] for name, value in record.slot_us]
    data["preds"] = [[src, w, u] for src, w, u in record.preds]
    return data


def record_from_dict(data: Mapping[str, object]) -> TraceRecord:
    payload = dict(data)
    payload["mode"] = Mode(payload["mode"])
    payload["outcome"] = Verdict(payload["outcome"])
    payload["slot_us"] = tuple((name, float(value)) for name, value in payload["slot_us"])
    payload["preds"] = tuple((int(s), float(w), float(u)) for s, w, u in payload["preds"])
    return TraceRecord(**payload)


def serialize_record(record: TraceRecord) -> str:
    return json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":"))


def write_trace(path: str, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(serialize_record(record))
            handle.write("\n")


def read_trace(path: str) -> list[TraceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(record_from_dict(json.loads(line)))
    return records


def replay_check(records: Sequence[TraceRecord], lam: float, beta: float,
                 alpha: float, tau_slot: float,
                 tolerance: float = REPLAY_TOLERANCE) -> list[str]:
    """Recompute every derived field from its recorded inputs.

    Returns human-readable mismatch descriptions; an empty list means the
    trace verifies.
    """
    problems: list[str] = []
    for record in records:
        expected_cal = 1.0 if record.boosted else cal.calibrate(record.u, record.temperature)
        if abs(expected_cal - record.u_cal) > tolerance:
            problems.append(
                f"seq {record.seq}: u_cal {record.u_cal!r} != recomputed {expected_cal!r}")
        total = record.u_cal
        if record.preds:
            contributions = [w * u for _, w, u in record.preds]
            total += lam * max(contributions)
            total += beta * sum(contributions) / len(contributions)
        expected_tilde = min(max(total, 0.0), 1.0)
        if abs(expected_tilde - record.u_tilde) > tolerance:
            problems.append(
                f"seq {record.seq}: u_tilde {record.u_tilde!r} != recomputed {expected_tilde!r}")
        expected_r = compound_risk(record.u_tilde, [u for _, u in record.slot_us],
                                   alpha, tau_slot)
        if abs(expected_r - record.r) > tolerance:
            problems.append(f"seq {record.seq}: r {record.r!r} != recomputed {expected_r!r}")
        if abs((1.0 - record.r) - record.c) > tolerance:
            problems.append(f"seq {record.seq}: c {record.c!r} != 1 - r")
    return problems


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemOutcome:
    problem_id: str
    risk: float
    solved: bool
    usage: float
    refined: bool


def problem_outcomes(records: Sequence[TraceRecord]) -> list[ProblemOutcome]:
    """Per-problem view of a trace: risk estimate, verdict, cost.

    The risk estimate is the compound risk at the first execution of the
    terminal step, falling back to the last record when the run never got
    there.
    """
    by_problem: dict[str, list[TraceRecord]] = {}
    order: list[str] = []
    for record in records:
        if record.problem_id not in by_problem:
            order.append(record.problem_id)
        by_problem.setdefault(record.problem_id, []).append(record)
    outcomes = []
    for problem_id in order:
        recs = by_problem[problem_id]
        terminal = [r for r in recs if r.is_terminal]
        risk = terminal[0].r if terminal else recs[-1].r
        last = recs[-1]
        solved = last.is_terminal and last.outcome is Verdict.PASS
        refined = any(r.refinement is not None for r in recs)
        outcomes.append(ProblemOutcome(problem_id, risk, solved, last.usage_units, refined))
    return outcomes


def summarize(records: Sequence[TraceRecord]) -> dict:
    """Stream-level aggregates in the strategy-table shape."""
    outcomes = problem_outcomes(records)
    total = len(outcomes)
    mode_counts = {mode.value: 0 for mode in Mode}
    branch_ks = []
    for record in records:
        mode_counts[record.mode.value] += 1
        if record.mode is Mode.BRANCH:
            branch_ks.append(record.k)
    routed = sum(mode_counts.values())
    return {
        "problems": total,
        "accuracy": (sum(1 for o in outcomes if o.solved) / total) if total else 0.0,
        "avg_usage": (sum(o.usage for o in outcomes) / total) if total else 0.0,
        "avg_k": (sum(branch_ks) / len(branch_ks)) if branch_ks else 0.0,
        "mode_percent": {name: (100.0 * count / routed if routed else 0.0)
                         for name, count in sorted(mode_counts.items())},
        "retry_percent": (100.0 * sum(1 for o in outcomes if o.refined) / total) if total else 0.0,
    }


# ---------------------------------------------------------------------------
# Rank-consistency report
# ---------------------------------------------------------------------------

def _ranks(values: Sequence[float]) -> list[float]:
    indexed = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(indexed):
        j = i
        while j + 1 < len(indexed) and values[indexed[j + 1]] == values[indexed[i]]:
            j += 1
        average = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[indexed[k]] = average
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Spearman rank correlation; None when undefined (fewer than two
    points or a constant series)."""
    if len(xs) != len(ys):
        raise ValueError("series must have equal length")
    if len(xs) < 2:
        return None
    rx = _ranks(xs)
    ry = _ranks(ys)
    mean_x = sum(rx) / len(rx)
    mean_y = sum(ry) / len(ry)
    cov = sum((a - mean_x) * (b - mean_y) for a, b in zip(rx, ry))
    var_x = sum((a - mean_x) ** 2 for a in rx)
    var_y = sum((b - mean_y) ** 2 for b in ry)
    if var_x == 0 or var_y == 0:
        return None
    return cov / math.sqrt(var_x * var_y)


def risk_bins(outcomes: Sequence[ProblemOutcome], bins: int = 10) -> list[dict]:
    """Equal-count risk bins with success rates, decile style."""
    if not outcomes:
        return []
    ordered = sorted(outcomes, key=lambda o: o.risk)
    n = len(ordered)
    rows = []
    for b in range(bins):
        lo = (b * n) // bins
        hi = ((b + 1) * n) // bins
        chunk = ordered[lo:hi]
        if not chunk:
            continue
        rows.append({
            "bin": len(rows),
            "mean_risk": sum(o.risk for o in chunk) / len(chunk),
            "success_rate": sum(1 for o in chunk if o.solved) / len(chunk),
            "count": len(chunk),
        })
    return rows


def rank_consistency(outcomes: Sequence[ProblemOutcome], bins: int = 10) -> tuple[list[dict], float | None]:
    rows = risk_bins(outcomes, bins)
    if len(rows) < 2:
        return rows, None
    coefficient = spearman([row["mean_risk"] for row in rows],
                           [row["success_rate"] for row in rows])
    return rows, coefficient


def load_trace_dir(trace_dir: str) -> list[TraceRecord]:
    paths = sorted(p for p in os.listdir(trace_dir) if p.endswith(".jsonl"))
    if not paths:
        raise NoTraces(f"no .jsonl trace files under {trace_dir}")
    records: list[TraceRecord] = []
    for name in paths:
        records.extend(read_trace(os.path.join(trace_dir, name)))
    return records
