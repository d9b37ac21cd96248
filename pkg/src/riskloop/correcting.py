"""Stage 3: influence-based root-cause localization over the dependency
graph, asymmetric uncertainty calibration, and rollback for targeted
re-execution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .core import DependencyGraph, UnknownStep, WorkflowState, topological_order


class EmptyInfluence(Exception):
    """No node reaches the failure set; graph and failure set disagree."""


DEFAULT_TAU_ENF = 0.5
DEFAULT_MAX_RETRIES = 2


@dataclass
class FailureContext:
    """What Stage 3 knows when it is entered."""

    failure_set: frozenset[int]
    refinement_round: int = 0
    tau_enf: float = DEFAULT_TAU_ENF
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self) -> None:
        if not self.failure_set:
            raise ValueError("the failure set must be non-empty")
        if self.refinement_round > self.max_retries:
            raise ValueError("refinement round exceeds the retry cap")


def max_path_product(graph: DependencyGraph, step_id: int,
                     failure_set: Iterable[int]) -> float:
    """Maximum product of edge couplings along any path into the failure set.

    Computed by dynamic programming in reverse topological order; a member
    of the failure set scores 1.0 through the empty path, and a node with
    no path at all scores 0.0.
    """
    if step_id not in graph.nodes:
        raise UnknownStep(f"no node {step_id}")
    products = _path_products(graph, frozenset(failure_set))
    return products[step_id]


def _path_products(graph: DependencyGraph, failure_set: frozenset[int]) -> dict[int, float]:
    products: dict[int, float] = {}
    for node_id in reversed(topological_order(graph)):
        if node_id in failure_set:
            products[node_id] = 1.0
            continue
        best = 0.0
        for edge in graph.successors(node_id):
            candidate = edge.coupling * products[edge.dst]
            if candidate > best:
                best = candidate
        products[node_id] = best
    return products


def influence(graph: DependencyGraph, failure_set: Iterable[int]) -> dict[int, float]:
    """Influence of every node that reaches the failure set.

    A node's influence is its propagated risk times the strongest coupling
    path into the failure set; failure members count themselves through
    the empty path.  Nodes that cannot reach the failure set are absent.
    """
    failures = frozenset(failure_set)
    for f in failures:
        if f not in graph.nodes:
            raise UnknownStep(f"failure node {f} not in graph")
    products = _path_products(graph, failures)
    result: dict[int, float] = {}
    for node_id, product in products.items():
        if product <= 0.0:
            continue
        node = graph.nodes[node_id]
        if node.propagated is None:
            raise ValueError(f"node {node_id} has no propagated risk; run propagation first")
        result[node_id] = node.propagated * product
    return result


def localize_root_cause(influences: Mapping[int, float]) -> int:
    """Argmax of influence; ties break toward the earliest step id."""
    if not influences:
        raise EmptyInfluence("no node reaches the failure set")
    best_id = -1
    best_value = -1.0
    for step_id in sorted(influences):
        value = influences[step_id]
        if value > best_value:
            best_value = value
            best_id = step_id
    return best_id


def asymmetric_calibrate(
    graph: DependencyGraph,
    k_star: int,
    failure_set: Iterable[int],
    tau_enf: float = DEFAULT_TAU_ENF,
    recalibrate: Callable[[float], float] | None = None,
) -> DependencyGraph:
    """Boost the root cause to certainty-of-doubt and floor the failure set.

    The root cause's local uncertainty jumps to 1.0 with the boosted flag
    set (its calibrated value is pinned to 1.0 as well, so downstream
    routing cannot fall back to a fast path).  Every failure node's local
    uncertainty is floored at tau_enf; ``recalibrate`` maps the new raw
    values to calibrated ones when provided.  Idempotent.  Callers must
    re-run risk propagation afterwards.
    """
    if k_star not in graph.nodes:
        raise UnknownStep(f"no node {k_star}")
    failures = frozenset(failure_set)
    for f in failures:
        if f not in graph.nodes:
            raise UnknownStep(f"failure node {f} not in graph")

    for f in sorted(failures):
        if f == k_star:
            continue
        node = graph.nodes[f]
        node.local = max(node.local, tau_enf)
        if recalibrate is not None:
            node.calibrated = recalibrate(node.local)

    target = graph.nodes[k_star]
    target.local = 1.0
    target.calibrated = 1.0
    target.boosted = True
    return graph


def rollback(state: WorkflowState, k_star: int) -> WorkflowState:
    """Invalidate the root cause and everything downstream of it.

    Non-descendants keep their outputs; the execution cursor rewinds to
    the root cause's task step so the next iteration re-enters sensing
    there.
    """
    if k_star not in state.step_task:
        raise UnknownStep(f"no step {k_star}")
    doomed = {k_star} | state.graph.descendants(k_star)
    state.invalidate(doomed)
    state.cursor = state.step_task[k_star]
    return state
