"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  Streams are seeded and fully deterministic; traces
produced along the way are pooled and replay-verified by the final check.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from riskloop.calibration import (CalibrationState, calibrate,
                                  maybe_update_temperature, record_observation)
from riskloop.core import DependencyGraph, Mode, NodeRisk, ProblemSpec, TaskKind, Verdict
from riskloop.correcting import asymmetric_calibrate, influence
from riskloop.engine import EngineConfig, RecoveryMode, WorkflowEngine
from riskloop.providers import (Interpretation, ReferenceSpec, StepSpec,
                                SyntheticProvider, SyntheticTaskSpec,
                                single_step_task)
from riskloop.regulating import (BranchCandidate, CandidateOrigin,
                                 ThresholdSource, adaptive_thresholds,
                                 branch_count, consensus_select, route)
from riskloop.sensing import (SemanticClustering, propagate_risk_unclipped,
                              semantic_entropy)
from riskloop.trace import (problem_outcomes, rank_consistency, replay_check,
                            serialize_record)

ALL_TRACES: list = []


def _report(number: int, ok: bool, detail: str) -> None:
    print(f"[acceptance] criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {number}: {detail}"


def _partition(sizes):
    clusters, start = [], 0
    for size in sizes:
        clusters.append(tuple(range(start, start + size)))
        start += size
    n = sum(sizes)
    entropy = -sum((s / n) * math.log(s / n) for s in sizes) / math.log(n)
    return SemanticClustering(clusters=tuple(clusters), entropy=entropy,
                              threshold_used=0.85)


def _problem(task_id, horizon=1, statement="acceptance stream task"):
    return ProblemSpec(id=task_id, statement=statement,
                       task_kind=TaskKind.SYNTHETIC, horizon=horizon)


def test_criterion_1_entropy_suite():
    started = time.monotonic()
    assert semantic_entropy(_partition([5]), 5) == pytest.approx(0.0, abs=1e-6)
    assert semantic_entropy(_partition([1, 1, 1, 1, 1]), 5) == pytest.approx(1.0, abs=1e-6)
    assert semantic_entropy(_partition([3, 2]), 5) == pytest.approx(0.418166, abs=1e-6)

    rng = np.random.default_rng(101)
    for _ in range(10_000):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(0, min(6, n - 1)))
        cuts = sorted(rng.choice(np.arange(1, n), size=k, replace=False).tolist())
        sizes = [b - a for a, b in zip([0] + cuts, cuts + [n])]
        value = semantic_entropy(_partition(sizes), n)
        assert -1e-12 <= value <= 1.0 + 1e-12
        splittable = [i for i, s in enumerate(sizes) if s >= 2]
        if splittable:
            index = splittable[0]
            cut = sizes[index] // 2 or 1
            refined = sizes[:index] + [cut, sizes[index] - cut] + sizes[index + 1:]
            assert semantic_entropy(_partition(refined), n) >= value - 1e-12
    elapsed = time.monotonic() - started
    _report(1, elapsed < 1.0,
            f"exact values and 10,000 partition properties in {elapsed:.2f}s")


def test_criterion_2_propagation_bound():
    started = time.monotonic()
    rng = np.random.default_rng(202)
    checked = 0
    for case in range(1000):
        n = int(rng.integers(2, 10))
        lam = float(rng.random())
        beta = float(rng.random())
        locals_by_node = {i: float(rng.random()) for i in range(n)}
        if case % 2 == 0:  # chain
            edges = [(i, i + 1, float(rng.random())) for i in range(n - 1)]
        else:              # random dag
            edges = [(i, j, float(rng.random()))
                     for i in range(n) for j in range(i + 1, n)
                     if rng.random() < 0.5]
        graph = DependencyGraph()
        for node, local in locals_by_node.items():
            graph.add_node(node, NodeRisk(local=local, calibrated=local))
        for src, dst, w in edges:
            graph.add_edge(src, dst, w, 1.0)
        values = propagate_risk_unclipped(graph, lam, beta)
        weights = [w for _, _, w in edges]
        w_max = max(weights) if weights else 0.0
        w_bar = sum(weights) / len(weights) if weights else 0.0
        growth = 1.0 + lam * w_max + beta * w_bar
        bound = sum(locals_by_node[t] * growth ** (n - 1 - t) for t in range(n))
        assert values[n - 1] <= bound + 1e-9
        checked += 1
    elapsed = time.monotonic() - started
    _report(2, checked == 1000 and elapsed < 5.0,
            f"{checked} chains/DAGs within the unclipped bound in {elapsed:.2f}s")


def _enumerate_paths(edges_by_src, start, failures):
    if start in failures:
        return [1.0]
    products = []
    for dst, w in edges_by_src.get(start, []):
        for sub in _enumerate_paths(edges_by_src, dst, failures):
            products.append(w * sub)
    return products


def test_criterion_3_influence_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(303)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        edges = [(i, j, float(rng.random()))
                 for i in range(n) for j in range(i + 1, n)
                 if rng.random() < 0.45]
        propagated = {i: float(rng.random()) for i in range(n)}
        graph = DependencyGraph()
        for i in range(n):
            graph.add_node(i, NodeRisk(local=propagated[i], calibrated=propagated[i]))
            graph.nodes[i].propagated = propagated[i]
        for src, dst, w in edges:
            graph.add_edge(src, dst, w, 1.0)
        failures = {int(x) for x in
                    rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)}
        got = influence(graph, failures)
        edges_by_src: dict[int, list] = {}
        for src, dst, w in edges:
            edges_by_src.setdefault(src, []).append((dst, w))
        for node in range(n):
            paths = _enumerate_paths(edges_by_src, node, failures)
            if not paths or max(paths) == 0.0:
                assert node not in got
            else:
                assert got[node] == propagated[node] * max(paths)
    elapsed = time.monotonic() - started
    _report(3, elapsed < 10.0,
            f"1,000 DAGs matched the all-paths enumeration exactly in {elapsed:.2f}s")


def _oracle_consensus(candidates, tau_sim, eta):
    n = len(candidates)
    vectors = np.asarray([c.embedding for c in candidates], dtype=float)
    adjacency = (vectors @ vectors.T) >= tau_sim
    reach = adjacency.copy()
    for k in range(n):
        for i in range(n):
            if reach[i, k]:
                reach[i] |= reach[k]
    seen, clusters = set(), []
    for i in range(n):
        if i in seen:
            continue
        members = sorted(j for j in range(n) if reach[i, j] or j == i)
        seen.update(members)
        clusters.append(members)
    clusters.sort(key=lambda c: (-len(c), c[0]))
    if not any(c.verifier_outcome is Verdict.PASS for c in candidates):
        return None
    best_key, best_text = None, None
    for members in clusters:
        vecs = vectors[members]
        if len(members) == 1:
            coh = 1.0
        else:
            total, pairs = 0.0, 0
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    total += float(vecs[a] @ vecs[b])
                    pairs += 1
            coh = min(max(total / pairs, 0.0), 1.0)
        valid = sum(1 for m in members
                    if candidates[m].verifier_outcome is Verdict.PASS) / len(members)
        score = eta * valid + (1 - eta) * coh + math.log(len(members))
        sums = [sum(float(vecs[a] @ vecs[b]) for b in range(len(members)) if b != a)
                for a in range(len(members))]
        medoid_global = members[max(range(len(members)), key=lambda a: (sums[a], -a))]
        key = (-score, -len(members), candidates[medoid_global].text, medoid_global)
        if best_key is None or key < best_key:
            best_key = key
            best_text = candidates[medoid_global].text
    return best_text


def test_criterion_4_consensus_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(404)
    escalations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        interp_count = int(rng.integers(1, 4))
        centroids = np.eye(4)[:interp_count]
        candidates = []
        for _ in range(n):
            which = int(rng.integers(0, interp_count))
            vec = centroids[which] + 0.05 * rng.standard_normal(4)
            vec = vec / np.linalg.norm(vec)
            candidates.append(BranchCandidate(
                text=f"text-{which}", embedding=tuple(vec),
                verifier_outcome=Verdict.PASS if rng.random() < 0.5 else Verdict.FAIL,
                origin=CandidateOrigin.PRIMARY))
        got = consensus_select(candidates, 0.85, 0.6)
        want = _oracle_consensus(candidates, 0.85, 0.6)
        if want is None:
            escalations += 1
            assert got is None
        else:
            assert got is not None and got.text == want
    elapsed = time.monotonic() - started
    _report(4, escalations > 20 and elapsed < 10.0,
            f"1,000 instances matched brute-force scoring "
            f"({escalations} escalations) in {elapsed:.2f}s")


def test_criterion_5_calibration_mechanics():
    started = time.monotonic()
    for temperature in (0.5, 1.0, 2.0):
        assert calibrate(0.5, temperature) == pytest.approx(0.5, abs=1e-6)
    assert calibrate(0.8, 1.0) == pytest.approx(0.574443, abs=1e-6)
    assert calibrate(0.8, 0.5) == pytest.approx(0.645656, abs=1e-6)

    def filled(temperature, observations):
        state = CalibrationState(temperature=temperature)
        for u, passed in observations:
            record_observation(state, u, passed)
        state.since_update = state.update_interval
        return state

    state, updated = maybe_update_temperature(
        filled(1.0, [(0.1, i % 2 == 0) for i in range(10)]))
    assert updated and state.temperature == pytest.approx(1.1)
    state, updated = maybe_update_temperature(
        filled(1.0, [(0.9, i != 0) for i in range(10)]))
    assert updated and state.temperature == pytest.approx(0.9)
    state, updated = maybe_update_temperature(
        filled(1.0, [(0.5, True) for _ in range(20)]))
    assert not updated and state.temperature == 1.0
    state, _ = maybe_update_temperature(filled(1.9, [(0.1, False)] * 10))
    assert state.temperature == 2.0

    rng = np.random.default_rng(505)
    state = CalibrationState()
    for _ in range(10_000):
        record_observation(state, float(rng.random()), bool(rng.random() < 0.5))
        state, _ = maybe_update_temperature(state)
        assert 0.5 <= state.temperature <= 2.0
    elapsed = time.monotonic() - started
    _report(5, elapsed < 2.0,
            f"exact sigmoid values, update table, 10,000-step clamp fuzz in {elapsed:.2f}s")


def _stream_up(seed):
    tasks, problems = {}, []
    for i in range(200):
        tid = f"up-{seed}-{i}"
        if i % 5 < 3:
            tasks[tid] = single_step_task(tid, [("wrong", 1.0), ("right", 0.0)], 1)
        else:
            tasks[tid] = single_step_task(tid, [("right", 1.0)], 0)
        problems.append(_problem(tid))
    return tasks, problems


def _stream_down(seed):
    tasks, problems = {}, []
    for i in range(200):
        tid = f"dn-{seed}-{i}"
        interps = [(f"a{k}", 0.2) for k in range(5)]
        mode = "always_pass" if i % 10 < 9 else "always_fail"
        tasks[tid] = single_step_task(tid, interps, 0, verifier_mode=mode)
        problems.append(_problem(tid))
    return tasks, problems


def test_criterion_6_calibration_direction():
    up_final, down_final = [], []
    for seed in range(10):
        tasks, problems = _stream_up(seed)
        engine = WorkflowEngine(EngineConfig(budget=100, seed=seed),
                                SyntheticProvider(tasks, seed=seed))
        for p in problems:
            engine.run_problem(p)
        up_final.append(engine.calibration.temperature)
        ALL_TRACES.extend(engine.trace_records)

        tasks, problems = _stream_down(seed)
        engine = WorkflowEngine(EngineConfig(budget=100, seed=seed),
                                SyntheticProvider(tasks, seed=seed))
        for p in problems:
            engine.run_problem(p)
        down_final.append(engine.calibration.temperature)
        ALL_TRACES.extend(engine.trace_records)
    ok = all(t >= 1.3 for t in up_final) and all(t <= 0.8 for t in down_final)
    _report(6, ok,
            f"10/10 seeds: failing low-u stream T>=1.3 (min {min(up_final):.2f}), "
            f"passing high-u stream T<=0.8 (max {max(down_final):.2f})")


def test_criterion_7_routing_and_asymmetric_table():
    fallback = adaptive_thresholds([])
    assert fallback.source is ThresholdSource.FALLBACK
    assert (fallback.high, fallback.low) == (0.7, 0.3)

    assert route(0.88, fallback) is Mode.DIRECT
    assert route(0.55, fallback) is Mode.BRANCH
    assert branch_count(0.55, kappa=3, k_max=7) == 2
    assert route(0.62, fallback) is Mode.BRANCH
    assert branch_count(0.62, kappa=3, k_max=7) == 2

    graph = DependencyGraph()
    graph.add_node(0, NodeRisk(local=0.1, calibrated=0.1))
    graph.add_node(1, NodeRisk(local=0.3, calibrated=0.3))
    graph.add_node(2, NodeRisk(local=0.8, calibrated=0.8))
    graph.add_edge(0, 1, 1.0, 1.0)
    graph.add_edge(1, 2, 1.0, 1.0)
    asymmetric_calibrate(graph, 0, {1, 2}, tau_enf=0.5)
    assert graph.nodes[0].local == 1.0 and graph.nodes[0].boosted
    assert graph.nodes[1].local == pytest.approx(0.5)
    assert graph.nodes[2].local == pytest.approx(0.8)
    _report(7, True, "fallback thresholds, routing triples, boost/enforce exact")


def _adversarial_run(seed):
    tasks, problems = {}, []
    for i in range(1000):
        tid = f"adv-{i}"
        tasks[tid] = single_step_task(tid, [("a", 0.6), ("b", 0.4)], 0,
                                      verifier_mode="always_fail",
                                      embedding_noise=0.01)
        problems.append(_problem(tid))
    provider = SyntheticProvider(tasks, seed=seed)
    engine = WorkflowEngine(EngineConfig(budget=40, seed=seed), provider)
    results = [engine.run_problem(p) for p in problems]
    return engine, results


def test_criterion_8_determinism_and_safety():
    started = time.monotonic()
    engine_a, results_a = _adversarial_run(7)
    engine_b, _ = _adversarial_run(7)
    blob_a = "\n".join(serialize_record(r) for r in engine_a.trace_records)
    blob_b = "\n".join(serialize_record(r) for r in engine_b.trace_records)
    identical = blob_a == blob_b
    budget_ok = all(r.total_usage <= 40 for r in results_a)
    retries_ok = all(r.refinements_used <= 2 for r in results_a)
    halted = len(results_a) == 1000
    ALL_TRACES.extend(engine_a.trace_records)
    elapsed = time.monotonic() - started
    _report(8, identical and budget_ok and retries_ok and halted,
            f"1,000 adversarial problems halted with byte-identical traces, "
            f"budget and retry caps held ({elapsed:.1f}s)")


def _mixed_stream(count):
    tasks, problems = {}, []
    for i in range(count):
        tid = f"mix-{i}"
        grade = (i % 10) / 9.0
        m = 1 + round(3 * grade)
        if m == 1:
            interps = [("ans0", 1.0)]
        else:
            correct_mass = 1.0 - 0.5 * grade
            rest = (1.0 - correct_mass) / (m - 1)
            interps = [("ans0", correct_mass)] + [(f"ans{k}", rest) for k in range(1, m)]
        tasks[tid] = single_step_task(tid, interps, 0, embedding_noise=0.02)
        problems.append(_problem(tid))
    return tasks, problems


def test_criterion_9_adaptive_vs_fixed_efficiency():
    started = time.monotonic()

    def run(fixed_k):
        tasks, problems = _mixed_stream(500)
        provider = SyntheticProvider(tasks, seed=0)
        engine = WorkflowEngine(EngineConfig(budget=100, seed=0, fixed_k=fixed_k),
                                provider)
        solved = 0
        for p in problems:
            solved += engine.run_problem(p).solved
        per_problem: dict[str, tuple[int, int]] = {}
        for record in engine.trace_records:
            per_problem[record.problem_id] = (record.sampler_calls,
                                              record.verifier_calls)
        calls = sum(s + v for s, v in per_problem.values())
        ALL_TRACES.extend(engine.trace_records)
        return solved / 500, calls

    adaptive_acc, adaptive_calls = run(None)
    fixed_acc, fixed_calls = run(7)
    ratio = adaptive_calls / fixed_calls
    gap = abs(adaptive_acc - fixed_acc) * 100
    elapsed = time.monotonic() - started
    _report(9, ratio <= 0.60 and gap <= 1.0 and elapsed < 120.0,
            f"adaptive used {ratio:.0%} of fixed-K=7 calls "
            f"({adaptive_calls} vs {fixed_calls}) at {gap:.2f}pt accuracy gap "
            f"in {elapsed:.1f}s")


def _graded_stream(count, seed):
    tasks, problems = {}, []
    for i in range(count):
        tid = f"g-{seed}-{i}"
        grade = (i % 20) / 19.0
        m = 1 + round(4 * grade)
        if m == 1:
            interps = [("ans0", 1.0)]
        else:
            correct_mass = max(0.05, 1.0 - 0.95 * grade)
            rest = (1.0 - correct_mass) / (m - 1)
            interps = [("ans0", correct_mass)] + [(f"ans{k}", rest) for k in range(1, m)]
        tasks[tid] = single_step_task(tid, interps, 0, embedding_noise=0.02)
        problems.append(_problem(tid))
    return tasks, problems


def test_criterion_10_rank_consistency():
    coefficients = []
    for seed in range(5):
        tasks, problems = _graded_stream(500, seed)
        provider = SyntheticProvider(tasks, seed=seed)
        engine = WorkflowEngine(EngineConfig(budget=60, seed=seed), provider)
        for p in problems:
            engine.run_problem(p)
        outcomes = problem_outcomes(engine.trace_records)
        _, coefficient = rank_consistency(outcomes)
        coefficients.append(coefficient)
        ALL_TRACES.extend(engine.trace_records)
    ok = all(c is not None and c <= -0.5 for c in coefficients)
    _report(10, ok,
            "binned Spearman on 5 seeds: "
            + ", ".join(f"{c:.3f}" for c in coefficients))


def _diamond_spec():
    step0 = StepSpec(interpretations=(Interpretation("base", 1.0),), correct_index=0)
    step1 = StepSpec(
        interpretations=(Interpretation("misread", 1.0), Interpretation("careful", 0.0)),
        correct_index=1, conservative=(0.0, 1.0),
        references=(ReferenceSpec(0, compatibility=0.05),),
        verifier_mode="always_pass")
    step2 = StepSpec(interpretations=(Interpretation("side", 1.0),), correct_index=0,
                     references=(ReferenceSpec(0, compatibility=0.05),))
    step3 = StepSpec(interpretations=(Interpretation("combine", 1.0),), correct_index=0,
                     references=(ReferenceSpec(1, compatibility=1.0),
                                 ReferenceSpec(2, compatibility=1.0)))
    return SyntheticTaskSpec(task_id="diamond", steps=(step0, step1, step2, step3))


def test_criterion_11_recovery_mode_fixture():
    recovered, retried = [], []
    for seed in range(5):
        for mode, sink in ((RecoveryMode.ROOT_CAUSE, recovered),
                           (RecoveryMode.LOCAL_RETRY, retried)):
            provider = SyntheticProvider({"diamond": _diamond_spec()}, seed=seed)
            config = EngineConfig(budget=400, initial_temperature=0.5,
                                  recovery_mode=mode, seed=seed)
            engine = WorkflowEngine(config, provider)
            result = engine.run_problem(_problem("diamond", horizon=4))
            sink.append(result.solved)
            ALL_TRACES.extend(engine.trace_records)
    ok = all(recovered) and not any(retried)
    _report(11, ok,
            f"root-cause recovery {sum(recovered)}/5 solved, "
            f"local retry {sum(retried)}/5 solved")


def test_criterion_12_trace_self_verification():
    assert ALL_TRACES, "earlier criteria produced no traces"
    config = EngineConfig()
    mismatches = replay_check(ALL_TRACES, config.lam, config.beta,
                              config.alpha, config.tau_slot)
    _report(12, mismatches == [],
            f"replayed {len(ALL_TRACES)} records from all acceptance runs "
            f"with {len(mismatches)} mismatches")
