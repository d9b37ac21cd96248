"""Shared domain types: problems, step records, the dependency graph,
budget accounting, and the evolving workflow state.

Everything recorded into a trace is immutable; the graph and the workflow
state are mutable but owned by a single engine run.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping


class CycleDetected(Exception):
    """The dependency graph contains a cycle (malformed provider output)."""


class UnknownStep(Exception):
    """A step id was referenced that does not exist in the state or graph."""


class BudgetExceeded(Exception):
    """A charge would push usage past the configured budget."""


_EPS = 1e-9


def clamp_unit(value: float, name: str = "value") -> float:
    """Clamp to [0, 1], rejecting anything meaningfully outside the range."""
    if value != value:  # NaN
        raise ValueError(f"{name} must be a finite number, got NaN")
    if value < -_EPS or value > 1.0 + _EPS:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return min(max(value, 0.0), 1.0)


class TaskKind(str, Enum):
    MATH = "math"
    CODE = "code"
    QA = "qa"
    SYNTHETIC = "synthetic"


class Mode(str, Enum):
    DIRECT = "Direct"
    BRANCH = "Branch"
    REFINE = "Refine"


class Verdict(str, Enum):
    PASS = "Pass"
    FAIL = "Fail"
    NOT_RUN = "NotRun"


@dataclass(frozen=True)
class ProblemSpec:
    """A single task to execute: statement plus horizon and bookkeeping."""

    id: str
    statement: str
    task_kind: TaskKind = TaskKind.SYNTHETIC
    horizon: int = 1
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    """Immutable per-iteration decision record.

    ``confidence`` is defined as one minus the compound risk recorded for
    the step; construction enforces that identity.
    """

    step_id: int
    raw_uncertainty: float
    calibrated_uncertainty: float
    propagated_risk: float
    compound_risk: float
    confidence: float
    mode: Mode
    branch_count: int
    output: str
    verifier_outcome: Verdict
    slot_uncertainties: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        if self.step_id < 0:
            raise ValueError("step_id must be >= 0")
        for name in ("raw_uncertainty", "calibrated_uncertainty",
                     "propagated_risk", "compound_risk", "confidence"):
            object.__setattr__(self, name, clamp_unit(getattr(self, name), name))
        if abs(self.confidence - (1.0 - self.compound_risk)) > 1e-9:
            raise ValueError("confidence must equal 1 - compound_risk")
        if self.mode is not Mode.BRANCH and self.branch_count != 0:
            raise ValueError("branch_count must be 0 unless mode is Branch")
        if self.branch_count < 0:
            raise ValueError("branch_count must be >= 0")
        for slot_name, slot_u in self.slot_uncertainties:
            clamp_unit(slot_u, f"slot {slot_name!r} uncertainty")


@dataclass
class NodeRisk:
    """Risk bookkeeping for a single graph node.

    ``propagated`` stays None until risk propagation has run.  A boosted
    node has had its uncertainty deterministically forced to 1.0.
    """

    local: float = 0.0
    calibrated: float = 0.0
    propagated: float | None = None
    boosted: bool = False

    def __post_init__(self) -> None:
        self.local = clamp_unit(self.local, "local")
        self.calibrated = clamp_unit(self.calibrated, "calibrated")
        if self.propagated is not None:
            self.propagated = clamp_unit(self.propagated, "propagated")
        if self.boosted and self.local != 1.0:
            raise ValueError("a boosted node must carry local uncertainty 1.0")


@dataclass(frozen=True)
class GraphEdge:
    src: int
    dst: int
    activation: float
    compatibility: float
    coupling: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "activation", clamp_unit(self.activation, "activation"))
        object.__setattr__(self, "compatibility", clamp_unit(self.compatibility, "compatibility"))
        object.__setattr__(self, "coupling", clamp_unit(self.coupling, "coupling"))
        if abs(self.coupling - self.activation * self.compatibility) > 1e-12:
            raise ValueError("coupling must equal activation * compatibility")


class DependencyGraph:
    """Directed graph of step nodes with probabilistic, weighted edges."""

    def __init__(self) -> None:
        self.nodes: dict[int, NodeRisk] = {}
        self._out: dict[int, list[GraphEdge]] = {}
        self._in: dict[int, list[GraphEdge]] = {}

    def add_node(self, step_id: int, risk: NodeRisk | None = None) -> NodeRisk:
        if step_id in self.nodes:
            raise ValueError(f"node {step_id} already exists")
        node = risk if risk is not None else NodeRisk()
        self.nodes[step_id] = node
        self._out.setdefault(step_id, [])
        self._in.setdefault(step_id, [])
        return node

    def add_edge(self, src: int, dst: int, activation: float, compatibility: float) -> GraphEdge:
        if src not in self.nodes or dst not in self.nodes:
            raise UnknownStep(f"edge {src}->{dst} references a missing node")
        edge = GraphEdge(src, dst, activation, compatibility,
                         activation * compatibility)
        self._out[src].append(edge)
        self._in[dst].append(edge)
        return edge

    def edges(self) -> Iterator[GraphEdge]:
        for edges in self._out.values():
            yield from edges

    def predecessors(self, step_id: int) -> list[GraphEdge]:
        if step_id not in self.nodes:
            raise UnknownStep(f"no node {step_id}")
        return list(self._in[step_id])

    def successors(self, step_id: int) -> list[GraphEdge]:
        if step_id not in self.nodes:
            raise UnknownStep(f"no node {step_id}")
        return list(self._out[step_id])

    def descendants(self, step_id: int) -> set[int]:
        """All nodes reachable from ``step_id`` (excluding itself)."""
        if step_id not in self.nodes:
            raise UnknownStep(f"no node {step_id}")
        seen: set[int] = set()
        stack = [step_id]
        while stack:
            current = stack.pop()
            for edge in self._out[current]:
                if edge.dst not in seen:
                    seen.add(edge.dst)
                    stack.append(edge.dst)
        return seen


def topological_order(graph: DependencyGraph) -> list[int]:
    """Deterministic topological order, ties broken by ascending step id.

    Raises CycleDetected if the graph has a cycle.
    """
    indegree = {node: 0 for node in graph.nodes}
    for edge in graph.edges():
        indegree[edge.dst] += 1
    ready = [node for node, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for edge in graph.successors(node):
            indegree[edge.dst] -= 1
            if indegree[edge.dst] == 0:
                heapq.heappush(ready, edge.dst)
    if len(order) != len(graph.nodes):
        raise CycleDetected("dependency graph contains a cycle")
    return order


@dataclass
class BudgetLedger:
    """Weighted call accounting against a fixed budget.

    Usage is the weighted sum of call counts and is never allowed past the
    budget; callers check affordability before issuing provider calls and
    ``charge`` raises if they did not.
    """

    budget: float
    sampler_calls: int = 0
    verifier_calls: int = 0
    embed_calls: int = 0
    sampler_weight: float = 1.0
    verifier_weight: float = 1.0
    embed_weight: float = 0.0

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    @property
    def usage(self) -> float:
        return (self.sampler_calls * self.sampler_weight
                + self.verifier_calls * self.verifier_weight
                + self.embed_calls * self.embed_weight)

    def cost_of(self, sampler: int = 0, verifier: int = 0, embed: int = 0) -> float:
        return (sampler * self.sampler_weight
                + verifier * self.verifier_weight
                + embed * self.embed_weight)

    def can_afford(self, sampler: int = 0, verifier: int = 0, embed: int = 0) -> bool:
        return self.usage + self.cost_of(sampler, verifier, embed) <= self.budget

    def charge(self, sampler: int = 0, verifier: int = 0, embed: int = 0) -> float:
        if min(sampler, verifier, embed) < 0:
            raise ValueError("call counts are monotone; negative charges rejected")
        if not self.can_afford(sampler, verifier, embed):
            raise BudgetExceeded(
                f"charge of {self.cost_of(sampler, verifier, embed)} units exceeds "
                f"budget {self.budget} at usage {self.usage}")
        self.sampler_calls += sampler
        self.verifier_calls += verifier
        self.embed_calls += embed
        return self.usage


@dataclass(frozen=True)
class RunResult:
    problem_id: str
    final_output: str
    solved: bool
    refinements_used: int
    total_usage: float
    trace_path: str | None = None

    def __post_init__(self) -> None:
        if self.refinements_used < 0:
            raise ValueError("refinements_used must be >= 0")
        if self.total_usage < 0:
            raise ValueError("total_usage must be >= 0")


class WorkflowState:
    """Mutable execution state for one problem run.

    Step identity is a dense integer assigned in execution order.  A task
    step re-executed after rollback receives a fresh step id carrying a
    ``supersedes`` link to the id it replaces; earlier ids stay in the
    graph untouched so the trace remains replayable.
    """

    def __init__(self, num_task_steps: int) -> None:
        if num_task_steps < 1:
            raise ValueError("a workflow needs at least one task step")
        self.num_task_steps = num_task_steps
        self.graph = DependencyGraph()
        self.active_id: dict[int, int] = {}
        self.outputs: dict[int, str] = {}
        self.step_task: dict[int, int] = {}
        self.supersedes: dict[int, int] = {}
        self.records: list[StepRecord] = []
        self.cursor = 0
        self._next_id = 0

    @property
    def terminal_step(self) -> int:
        return self.num_task_steps - 1

    def new_step_id(self, task_step: int) -> int:
        if not 0 <= task_step < self.num_task_steps:
            raise UnknownStep(f"task step {task_step} out of range")
        step_id = self._next_id
        self._next_id += 1
        previous = self.active_id.get(task_step)
        if previous is not None:
            self.supersedes[step_id] = previous
        self.active_id[task_step] = step_id
        self.step_task[step_id] = task_step
        return step_id

    def record_output(self, step_id: int, text: str) -> None:
        if step_id not in self.step_task:
            raise UnknownStep(f"no step {step_id}")
        self.outputs[step_id] = text

    def output_of_task(self, task_step: int) -> str | None:
        step_id = self.active_id.get(task_step)
        if step_id is None:
            return None
        return self.outputs.get(step_id)

    def is_valid(self, task_step: int) -> bool:
        return self.output_of_task(task_step) is not None

    def valid_count(self) -> int:
        return sum(1 for t in range(self.num_task_steps) if self.is_valid(t))

    def invalidate(self, step_ids: Iterable[int]) -> None:
        for step_id in step_ids:
            self.outputs.pop(step_id, None)
