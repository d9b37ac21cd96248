"""Per-problem orchestration: the closed Sensing / Regulating / Correcting
loop under budget and retry caps.

One loop iteration senses the current task step, routes it, executes the
chosen mode, and either commits the verified output or enters correction.
Exactly one trace record is appended per iteration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import calibration as cal
from . import correcting, regulating, sensing
from .core import (BudgetLedger, Mode, NodeRisk, ProblemSpec, RunResult,
                   StepRecord, Verdict, WorkflowState)
from .providers import (PARSE_FAILURE_SLOT, ProviderError, RefinementNote,
                        StepSample, hash_embed)
from .regulating import BranchCandidate, CandidateOrigin
from .trace import TraceRecord


class RecoveryMode(str, Enum):
    ROOT_CAUSE = "RootCause"
    FULL_RESTART = "FullRestart"
    LOCAL_RETRY = "LocalRetry"


class ProviderFailure(Exception):
    """A provider broke mid-run; the partial trace rides along."""

    def __init__(self, message: str, partial_trace: list[TraceRecord]):
        super().__init__(message)
        self.partial_trace = partial_trace


@dataclass(frozen=True)
class EngineConfig:
    """All knobs in one place; defaults follow the standard setting."""

    n_samples: int = 5
    tau_sim_base: float = 0.85
    lam: float = 0.5
    beta: float = 0.3
    alpha: float = 0.6
    tau_slot: float = 0.4
    kappa: float = 3.0
    k_max: int = 7
    tau_enf: float = 0.5
    max_retries: int = 2
    update_interval: int = 20
    tau_low: float = 0.3
    tau_high: float = 0.7
    theta_acc: float = 0.7
    eta: float = 0.6
    budget: float = 100.0
    horizon: int | None = None
    parallelism: int = 4
    seed: int = 0
    initial_temperature: float = 1.0
    calibration_capacity: int = 200
    min_bucket: int = 5
    disable_sensing: bool = False
    disable_branching: bool = False
    disable_refinement: bool = False
    disable_calibration: bool = False
    fixed_k: int | None = None
    recovery_mode: RecoveryMode = RecoveryMode.ROOT_CAUSE

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.fixed_k is not None and self.fixed_k < 1:
            raise ValueError("fixed_k must be >= 1")

    def new_calibration_state(self) -> cal.CalibrationState:
        return cal.CalibrationState(
            temperature=self.initial_temperature,
            capacity=self.calibration_capacity,
            update_interval=self.update_interval,
            tau_low=self.tau_low,
            tau_high=self.tau_high,
            theta_acc=self.theta_acc,
            min_bucket=self.min_bucket,
        )


def config_from_mapping(data: Mapping[str, object]) -> EngineConfig:
    """Build a config from a flat mapping, rejecting unknown keys."""
    known = {f.name for f in fields(EngineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = dict(data)
    if "recovery_mode" in kwargs:
        kwargs["recovery_mode"] = RecoveryMode(kwargs["recovery_mode"])
    return EngineConfig(**kwargs)


def deterministic_run_id(config: EngineConfig, extra: str = "") -> str:
    blob = json.dumps({f.name: str(getattr(config, f.name)) for f in fields(EngineConfig)},
                      sort_keys=True) + extra
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class _IterationResult:
    output: str = ""
    verdict: Verdict = Verdict.NOT_RUN
    embedding: np.ndarray | None = None
    k_actual: int = 0
    acting_units: float = 0.0
    out_of_budget: bool = False


class WorkflowEngine:
    """Runs problems through the closed loop, sharing calibration and the
    running confidence history across problems."""

    def __init__(self, config: EngineConfig, provider,
                 calibration_state: cal.CalibrationState | None = None,
                 run_id: str | None = None):
        self.config = config
        self.provider = provider
        self.calibration = calibration_state or config.new_calibration_state()
        self.confidence_history: list[float] = []
        self.trace_records: list[TraceRecord] = []
        self.last_state: WorkflowState | None = None
        self.run_id = run_id or deterministic_run_id(config)
        self._seq = 0

    def reset_calibration(self) -> None:
        """Drop learned temperature and history, e.g. between task streams
        of different kinds."""
        self.calibration = self.config.new_calibration_state()
        self.confidence_history.clear()

    # -- helpers -------------------------------------------------------------

    def _tau_sim(self, n_step: int) -> float:
        relaxation = sensing.BASE_SIMILARITY_THRESHOLD - sensing.adaptive_similarity_threshold(n_step)
        return min(max(self.config.tau_sim_base - relaxation, 0.01), 0.99)

    def _slot_uncertainties(self, samples: Sequence[StepSample],
                            tau_sim: float) -> tuple[tuple[str, float], ...]:
        names = sorted({name for sample in samples for name in sample.slots})
        result = []
        for name in names:
            if name == PARSE_FAILURE_SLOT:
                result.append((name, 1.0))
                continue
            values = [sample.slots.get(name, "") or "__missing__" for sample in samples]
            vectors = tuple(tuple(hash_embed(v)) for v in values)
            sample_set = sensing.SampleSet(samples=tuple(values), embeddings=vectors)
            clustering = sensing.cluster_samples(sample_set, tau_sim)
            result.append((name, clustering.entropy))
        return tuple(result)

    # -- the loop ------------------------------------------------------------

    def run_problem(self, problem: ProblemSpec) -> RunResult:
        cfg = self.config
        ledger = BudgetLedger(cfg.budget)
        try:
            return self._run(problem, ledger)
        except ProviderError as exc:
            raise ProviderFailure(str(exc), list(self.trace_records)) from exc

    # Kept as a separate method so the provider-failure wrapper stays thin.
    def _run(self, problem: ProblemSpec, ledger: BudgetLedger) -> RunResult:
        cfg = self.config
        provider = self.provider
        num_steps = provider.step_count(problem)
        horizon = cfg.horizon if cfg.horizon is not None else problem.horizon
        state = WorkflowState(num_steps)
        self.last_state = state
        thresholds = regulating.adaptive_thresholds(self.confidence_history)
        features = sensing.extract_complexity_features(problem.statement)
        tau_sim = self._tau_sim(features.n_step)

        embeddings_by_step: dict[int, np.ndarray] = {}
        revisions: dict[int, int] = {}
        pending_boost: set[int] = set()
        boosted_tasks: set[int] = set()
        refine_note: RefinementNote | None = None

        refinements = 0
        solved = False
        best: tuple[int, float, str] | None = None
        problem_confidence: float | None = None
        problem_raw_u: float | None = None
        last_sensed_raw: float | None = None
        iteration = 0

        while not solved:
            while state.cursor < num_steps and state.is_valid(state.cursor):
                state.cursor += 1
            if state.cursor >= num_steps:
                break
            if state.valid_count() >= horizon:
                break

            task_step = state.cursor
            is_terminal = task_step == state.terminal_step
            n = cfg.n_samples
            sample_cost = provider.sample_cost(n)
            if not ledger.can_afford(sampler=sample_cost):
                break

            # ---- Stage 1: sensing -----------------------------------------
            revision = revisions.get(task_step, 0)
            revisions[task_step] = revision + 1
            upstream = {t: state.output_of_task(t)
                        for t in range(num_steps) if state.is_valid(t)}
            batch = provider.sample_step(problem, task_step, upstream, n,
                                         revision=revision, refinement=refine_note)
            ledger.charge(sampler=batch.sampler_calls)
            texts = [s.text for s in batch.samples]
            vectors = provider.embed_batch(
                problem, texts, f"{problem.id}/{task_step}/{revision}/mc")
            ledger.charge(embed=len(texts))
            sample_set = sensing.SampleSet(
                samples=tuple(texts),
                embeddings=tuple(tuple(v) for v in vectors))
            clustering = sensing.cluster_samples(sample_set, tau_sim)
            if cfg.disable_sensing:
                u_raw = 0.5
                slot_us: tuple[tuple[str, float], ...] = ()
            else:
                u_raw = clustering.entropy
                slot_us = self._slot_uncertainties(batch.samples, tau_sim)

            sensed_u = u_raw
            boosted = False
            if task_step in pending_boost:
                pending_boost.discard(task_step)
                u_raw = 1.0
                boosted = True
            if not boosted:
                last_sensed_raw = u_raw

            temperature = self.calibration.temperature
            u_cal = 1.0 if boosted else cal.calibrate(u_raw, temperature)

            step_id = state.new_step_id(task_step)
            node = NodeRisk(local=u_raw, calibrated=u_cal, boosted=boosted)
            state.graph.add_node(step_id, node)

            rollout_producers = [
                {state.active_id[ref] for ref in sample.references
                 if state.is_valid(ref)}
                for sample in batch.samples]
            produced = {pid: embeddings_by_step[pid]
                        for producers in rollout_producers for pid in producers}
            consumed = {pid: provider.consumed_embedding(
                            problem, task_step, state.step_task[pid], produced[pid])
                        for pid in produced}
            for src, activation, gamma, _ in sensing.edges_from_rollouts(
                    rollout_producers, produced, consumed):
                state.graph.add_edge(src, step_id, activation, gamma)
            sensing.propagate_risk(state.graph, cfg.lam, cfg.beta)
            u_tilde = float(node.propagated)
            preds = tuple((edge.src, edge.coupling,
                           float(state.graph.nodes[edge.src].propagated))
                          for edge in state.graph.predecessors(step_id))

            # ---- Stage 2: regulating ----------------------------------------
            risk = regulating.compound_risk(u_tilde, [u for _, u in slot_us],
                                            cfg.alpha, cfg.tau_slot)
            confidence = 1.0 - risk
            if is_terminal and problem_confidence is None:
                problem_confidence = confidence
            if is_terminal and problem_raw_u is None and not boosted:
                problem_raw_u = u_raw

            k_target = 0
            if cfg.disable_branching:
                mode = Mode.DIRECT
            elif cfg.fixed_k is not None:
                mode = Mode.BRANCH
                k_target = cfg.fixed_k
            elif boosted:
                # a boosted node must re-explore, never fall back to greedy
                mode = Mode.BRANCH
                k_target = regulating.branch_count(confidence, cfg.kappa, cfg.k_max)
            else:
                mode = regulating.route(confidence, thresholds)
                if mode is Mode.BRANCH:
                    k_target = regulating.branch_count(confidence, cfg.kappa, cfg.k_max)

            result = self._execute_mode(problem, task_step, mode, k_target,
                                        clustering, batch, vectors, upstream,
                                        revision, tau_sim, ledger, refine_note)

            needs_correction = (mode is Mode.REFINE or
                                (result.verdict is Verdict.FAIL))

            # ---- Stage 3: correcting ----------------------------------------
            refinement_info = None
            stop = result.out_of_budget
            if needs_correction and not stop:
                if cfg.disable_refinement or refinements >= cfg.max_retries:
                    stop = True
                else:
                    refinements += 1
                    k_star, s_fail = self._recover(state, step_id, task_step,
                                                   temperature, pending_boost,
                                                   boosted_tasks)
                    refinement_info = {"k_star": k_star,
                                       "s_fail": sorted(s_fail),
                                       "round": refinements}
                    refine_note = RefinementNote(
                        previous_answer=result.output,
                        verdict="FAIL",
                        failure_reason="verifier rejected the step output"
                                       if result.verdict is Verdict.FAIL
                                       else "confidence below the refine threshold",
                        root_cause=f"step {state.step_task[k_star]}",
                        step_description=f"workflow step {state.step_task[k_star]}")
            elif not needs_correction and not stop:
                state.record_output(step_id, result.output)
                if result.embedding is not None:
                    embeddings_by_step[step_id] = result.embedding
                if boosted:
                    # the forced re-exploration verified; fresh evidence
                    # replaces the imposed certainty-of-doubt
                    node.boosted = False
                    node.local = sensed_u
                    node.calibrated = cal.calibrate(sensed_u, temperature)
                    sensing.propagate_risk(state.graph, cfg.lam, cfg.beta)
                state.cursor += 1
                refine_note = None
                if is_terminal and result.verdict is Verdict.PASS:
                    solved = True

            if is_terminal and result.output:
                tier = 1 if result.verdict is Verdict.PASS else 0
                if best is None or (tier, confidence) > (best[0], best[1]):
                    best = (tier, confidence, result.output)

            state.records.append(StepRecord(
                step_id=step_id,
                raw_uncertainty=u_raw,
                calibrated_uncertainty=u_cal,
                propagated_risk=u_tilde,
                compound_risk=risk,
                confidence=confidence,
                mode=mode,
                branch_count=result.k_actual if mode is Mode.BRANCH else 0,
                output=result.output,
                verifier_outcome=result.verdict,
                slot_uncertainties=slot_us,
            ))

            self.trace_records.append(TraceRecord(
                run_id=self.run_id,
                problem_id=problem.id,
                seq=self._seq,
                iteration=iteration,
                task_step=task_step,
                is_terminal=is_terminal,
                step_id=step_id,
                supersedes=state.supersedes.get(step_id),
                u=u_raw,
                u_cal=u_cal,
                u_tilde=u_tilde,
                slot_us=slot_us,
                r=risk,
                c=confidence,
                mode=mode,
                k=result.k_actual,
                outcome=result.verdict,
                boosted=boosted,
                preds=preds,
                temperature=temperature,
                theta_high=thresholds.high,
                theta_low=thresholds.low,
                threshold_source=thresholds.source.value,
                sampler_calls=ledger.sampler_calls,
                verifier_calls=ledger.verifier_calls,
                embed_calls=ledger.embed_calls,
                usage_units=ledger.usage,
                sensing_units=ledger.cost_of(sampler=batch.sampler_calls, embed=len(texts)),
                acting_units=result.acting_units,
                refinement=refinement_info,
            ))
            self._seq += 1
            iteration += 1
            if stop:
                break

        final_output = best[2] if best is not None else ""
        if not self.config.disable_calibration:
            observed = problem_raw_u if problem_raw_u is not None else last_sensed_raw
            if observed is not None:
                cal.record_observation(self.calibration, observed, solved)
                cal.maybe_update_temperature(self.calibration)
        if problem_confidence is not None:
            self.confidence_history.append(problem_confidence)
        return RunResult(
            problem_id=problem.id,
            final_output=final_output,
            solved=solved,
            refinements_used=refinements,
            total_usage=ledger.usage,
            trace_path=None,
        )

    def run_ablation_variant(self, problem: ProblemSpec) -> RunResult:
        """Alias for ablated configs; the loop itself reads the flags."""
        return self.run_problem(problem)

    # -- mode execution -------------------------------------------------------

    def _execute_mode(self, problem, task_step, mode, k_target, clustering,
                      batch, vectors, upstream, revision, tau_sim, ledger,
                      refine_note) -> _IterationResult:
        if mode is Mode.REFINE:
            return _IterationResult()
        if mode is Mode.DIRECT:
            if not ledger.can_afford(sampler=1, verifier=1):
                return _IterationResult(out_of_budget=True)
            sample = self.provider.greedy_step(problem, task_step, upstream,
                                               refinement=refine_note)
            ledger.charge(sampler=1)
            passed = self.provider.verify(problem, task_step, sample.text)
            ledger.charge(verifier=1)
            embedding = self.provider.embed_batch(
                problem, [sample.text],
                f"{problem.id}/{task_step}/{revision}/greedy")[0]
            ledger.charge(embed=1)
            return _IterationResult(
                output=sample.text,
                verdict=Verdict.PASS if passed else Verdict.FAIL,
                embedding=embedding,
                acting_units=ledger.cost_of(sampler=1, verifier=1, embed=1))
        return self._execute_branch(problem, task_step, k_target, clustering,
                                    batch, vectors, upstream, revision,
                                    tau_sim, ledger, refine_note)

    def _execute_branch(self, problem, task_step, k_target, clustering, batch,
                        vectors, upstream, revision, tau_sim, ledger,
                        refine_note) -> _IterationResult:
        """Assemble up to K candidates, verify them, and run consensus.

        Cluster medoids are free reuse of the Monte Carlo pool; the
        conservative variant and any padding beyond the clusters are fresh
        generations charged to the budget.
        """
        cfg = self.config
        provider = self.provider
        acting = 0.0

        plan: list[tuple[CandidateOrigin, int | None]] = []
        clusters = clustering.clusters
        plan.append((CandidateOrigin.PRIMARY, 0))
        extra_clusters = list(range(1, len(clusters)))
        if len(clusters) > 1 and len(clusters[1]) >= 2:
            plan.append((CandidateOrigin.ALTERNATIVE, 1))
            extra_clusters.remove(1)
        plan.append((CandidateOrigin.CONSERVATIVE, None))
        plan.extend((CandidateOrigin.EXTRA, ci) for ci in extra_clusters)
        while len(plan) < k_target:
            plan.append((CandidateOrigin.EXTRA, None))
        plan = plan[:k_target]

        candidates: list[BranchCandidate] = []
        fresh_ordinal = 0
        for origin, cluster_index in plan:
            if cluster_index is not None:
                members = clusters[cluster_index]
                member_vectors = [tuple(vectors[i]) for i in members]
                chosen = members[regulating.medoid(member_vectors)]
                text = batch.samples[chosen].text
                embedding = np.asarray(vectors[chosen])
                generation_cost = 0
            else:
                if not ledger.can_afford(sampler=1, verifier=1):
                    break
                sample = provider.conservative_step(
                    problem, task_step, upstream, revision=revision,
                    ordinal=fresh_ordinal, refinement=refine_note)
                fresh_ordinal += 1
                text = sample.text
                ledger.charge(sampler=1)
                embedding = provider.embed_batch(
                    problem, [text],
                    f"{problem.id}/{task_step}/{revision}/cons{fresh_ordinal}")[0]
                ledger.charge(embed=1)
                generation_cost = 1
            if not ledger.can_afford(verifier=1):
                break
            passed = provider.verify(problem, task_step, text)
            ledger.charge(verifier=1)
            acting += ledger.cost_of(sampler=generation_cost, verifier=1, embed=generation_cost)
            candidates.append(BranchCandidate(
                text=text,
                embedding=tuple(np.asarray(embedding) / np.linalg.norm(embedding)),
                verifier_outcome=Verdict.PASS if passed else Verdict.FAIL,
                origin=origin))

        if not candidates:
            return _IterationResult(out_of_budget=True)

        selected = regulating.consensus_select(candidates, tau_sim, cfg.eta)
        if selected is None:
            return _IterationResult(verdict=Verdict.FAIL,
                                    k_actual=len(candidates), acting_units=acting)
        match = next(c for c in candidates if c.text == selected.text)
        return _IterationResult(
            output=selected.text,
            verdict=match.verifier_outcome,
            embedding=np.asarray(match.embedding),
            k_actual=len(candidates),
            acting_units=acting)

    # -- recovery --------------------------------------------------------------

    def _recover(self, state: WorkflowState, failing_id: int, failing_task: int,
                 temperature: float, pending_boost: set[int],
                 boosted_tasks: set[int]) -> tuple[int, set[int]]:
        cfg = self.config
        s_fail = {failing_id}
        if cfg.recovery_mode is RecoveryMode.LOCAL_RETRY:
            state.invalidate([failing_id])
            state.cursor = failing_task
            return failing_id, s_fail
        if cfg.recovery_mode is RecoveryMode.FULL_RESTART:
            state.invalidate(list(state.outputs))
            state.cursor = 0
            first_id = state.active_id.get(0, failing_id)
            return first_id, s_fail

        context = correcting.FailureContext(
            failure_set=frozenset(s_fail),
            refinement_round=min(len(boosted_tasks) + 1, cfg.max_retries),
            tau_enf=cfg.tau_enf,
            max_retries=cfg.max_retries)
        influences = correcting.influence(state.graph, context.failure_set)
        eligible = {sid: value for sid, value in influences.items()
                    if state.step_task[sid] not in boosted_tasks}
        # when every influencer was already boosted, re-explore the best one
        k_star = correcting.localize_root_cause(eligible or influences)
        correcting.asymmetric_calibrate(
            state.graph, k_star, context.failure_set, context.tau_enf,
            recalibrate=lambda u: cal.calibrate(u, temperature))
        sensing.propagate_risk(state.graph, cfg.lam, cfg.beta)
        k_task = state.step_task[k_star]
        pending_boost.add(k_task)
        boosted_tasks.add(k_task)
        correcting.rollback(state, k_star)
        return k_star, s_fail


def run_problem(problem: ProblemSpec, config: EngineConfig, provider,
                calibration_state: cal.CalibrationState | None = None) -> RunResult:
    """One-shot convenience wrapper around :class:`WorkflowEngine`."""
    return WorkflowEngine(config, provider, calibration_state).run_problem(problem)


def run_ablation_variant(problem: ProblemSpec, config: EngineConfig, provider,
                         calibration_state: cal.CalibrationState | None = None) -> RunResult:
    return WorkflowEngine(config, provider, calibration_state).run_ablation_variant(problem)
