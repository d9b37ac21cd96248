"""Stage 1: estimate local semantic uncertainty from Monte Carlo samples,
infer structural complexity, build the probabilistic dependency graph and
propagate risk through it.

Clustering is connected components of a cosine-thresholded similarity
graph, which coincides with single-linkage agglomeration stopped at the
threshold.  Entropy over the resulting partition, normalized by log N, is
the local uncertainty signal.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DependencyGraph, NodeRisk, clamp_unit, topological_order


class DegenerateEmbedding(Exception):
    """An embedding with zero norm cannot participate in cosine clustering."""


BASE_SIMILARITY_THRESHOLD = 0.85
THRESHOLD_STEP_RELAXATION = 0.05
MAX_RELAXATION_STEPS = 3

# Weights for (length, math, multistep, constraint, numeric, multihop).
COMPLEXITY_WEIGHTS = (0.1, 0.25, 0.2, 0.2, 0.1, 0.15)

_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")


@dataclass(frozen=True)
class SampleSet:
    """N sampled candidate texts with aligned unit-norm embeddings."""

    samples: tuple[str, ...]
    embeddings: tuple[tuple[float, ...], ...]
    slot_extractions: tuple[Mapping[str, str], ...] | None = None

    def __post_init__(self) -> None:
        n = len(self.samples)
        if n < 2:
            raise ValueError("a sample set needs at least two samples")
        if len(self.embeddings) != n:
            raise ValueError("samples and embeddings must align by index")
        if self.slot_extractions is not None and len(self.slot_extractions) != n:
            raise ValueError("slot extractions must align with samples")
        for vec in self.embeddings:
            norm = math.sqrt(sum(x * x for x in vec))
            if norm == 0.0:
                raise DegenerateEmbedding("zero-norm embedding in sample set")
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"embeddings must be unit-norm, got norm {norm}")

    @property
    def size(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SemanticClustering:
    """A partition of sample indices plus the entropy derived from it."""

    clusters: tuple[tuple[int, ...], ...]
    entropy: float
    threshold_used: float

    def __post_init__(self) -> None:
        indices = [i for cluster in self.clusters for i in cluster]
        if len(indices) != len(set(indices)):
            raise ValueError("clusters must be disjoint")
        n = len(indices)
        if set(indices) != set(range(n)):
            raise ValueError("clusters must cover exactly the indices 0..N-1")
        recomputed = _partition_entropy([len(c) for c in self.clusters], n)
        if abs(recomputed - self.entropy) > 1e-9:
            raise ValueError("stored entropy does not match the partition")


@dataclass(frozen=True)
class ComplexityFeatures:
    length_score: float
    math_score: float
    multistep_score: float
    constraint_score: float
    numeric_score: float
    multihop_score: float
    n_step: int

    def __post_init__(self) -> None:
        for name in ("length_score", "math_score", "multistep_score",
                     "constraint_score", "numeric_score", "multihop_score"):
            object.__setattr__(self, name, clamp_unit(getattr(self, name), name))
        if self.n_step < 0:
            raise ValueError("n_step must be >= 0")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.length_score, self.math_score, self.multistep_score,
                self.constraint_score, self.numeric_score, self.multihop_score)


@lru_cache(maxsize=1)
def _keyword_lists() -> dict[str, tuple[str, ...]]:
    text = resources.files("riskloop.data").joinpath("keywords.txt").read_text("utf-8")
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], [])
        elif current is not None:
            current.append(line.lower())
    return {name: tuple(words) for name, words in sections.items()}


def _keyword_present(statement_lower: str, keyword: str) -> bool:
    return re.search(rf"\b{re.escape(keyword)}\b", statement_lower) is not None


def _partition_entropy(sizes: Sequence[int], n: int) -> float:
    if sum(sizes) != n:
        raise ValueError("cluster sizes must sum to N")
    if n < 2:
        raise ValueError("entropy is defined for N >= 2")
    if any(s <= 0 for s in sizes):
        raise ValueError("cluster sizes must be positive")
    total = 0.0
    for size in sizes:
        p = size / n
        total -= p * math.log(p)
    return total / math.log(n)


def semantic_entropy(clustering: SemanticClustering, n: int) -> float:
    """Normalized entropy of the cluster-size distribution.

    Zero for a single cluster, one when every sample is its own cluster.
    """
    return _partition_entropy([len(c) for c in clustering.clusters], n)


def cluster_samples(sample_set: SampleSet, tau_sim: float) -> SemanticClustering:
    """Cluster samples as connected components of the thresholded
    cosine-similarity graph.

    Clusters come back sorted by size descending, ties by smallest member
    index, so the result is deterministic for a given input order.
    """
    if not 0.0 < tau_sim < 1.0:
        raise ValueError("tau_sim must lie strictly inside (0, 1)")
    vectors = np.asarray(sample_set.embeddings, dtype=float)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbedding("zero-norm embedding")
    similarity = vectors @ vectors.T
    n = sample_set.size
    adjacency = similarity >= tau_sim

    labels = [-1] * n
    clusters: list[list[int]] = []
    for start in range(n):
        if labels[start] != -1:
            continue
        component = [start]
        labels[start] = len(clusters)
        frontier = [start]
        while frontier:
            node = frontier.pop()
            for other in range(n):
                if labels[other] == -1 and adjacency[node, other]:
                    labels[other] = labels[start]
                    component.append(other)
                    frontier.append(other)
        clusters.append(sorted(component))

    clusters.sort(key=lambda c: (-len(c), c[0]))
    entropy = _partition_entropy([len(c) for c in clusters], n)
    return SemanticClustering(
        clusters=tuple(tuple(c) for c in clusters),
        entropy=entropy,
        threshold_used=tau_sim,
    )


def extract_complexity_features(statement: str) -> ComplexityFeatures:
    """Cheap lexical features of a problem statement.

    Keyword lists live in a versioned data file; presence scores are binary
    and case-insensitive.  ``n_step`` counts the distinct sequential cues
    found, which later relaxes the clustering threshold.
    """
    if not statement:
        raise ValueError("statement must be non-empty")
    lists = _keyword_lists()
    lower = statement.lower()
    words = statement.split()
    numbers = _NUMBER_RE.findall(statement)

    multistep_hits = [k for k in lists["multistep"] if _keyword_present(lower, k)]
    return ComplexityFeatures(
        length_score=min(1.0, len(words) / 200.0),
        math_score=1.0 if any(_keyword_present(lower, k) for k in lists["math"]) else 0.0,
        multistep_score=1.0 if multistep_hits else 0.0,
        constraint_score=1.0 if any(_keyword_present(lower, k) for k in lists["constraint"]) else 0.0,
        numeric_score=min(1.0, len(numbers) / 8.0),
        multihop_score=1.0 if any(_keyword_present(lower, k) for k in lists["multihop"]) else 0.0,
        n_step=len(multistep_hits),
    )


def complexity_score(features: ComplexityFeatures) -> float:
    return float(sum(w * f for w, f in zip(COMPLEXITY_WEIGHTS, features.as_tuple())))


def adaptive_similarity_threshold(n_step: int) -> float:
    """Relax the base clustering threshold for multi-step problems."""
    if n_step < 0:
        raise ValueError("n_step must be >= 0")
    return BASE_SIMILARITY_THRESHOLD - THRESHOLD_STEP_RELAXATION * min(n_step, MAX_RELAXATION_STEPS)


def effective_coupling(activation: float, compatibility: float) -> float:
    """Edge weight: structural activation times semantic compatibility."""
    return clamp_unit(activation, "activation") * clamp_unit(compatibility, "compatibility")


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=float)
    vb = np.asarray(b, dtype=float)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("cosine with a zero-norm vector")
    return float(va @ vb / (na * nb))


def clamped_compatibility(consumed: Sequence[float], produced: Sequence[float]) -> float:
    """Cosine clamped to [0, 1]; anti-correlated content carries no coupling."""
    return min(max(cosine(consumed, produced), 0.0), 1.0)


def edges_from_rollouts(
    rollout_producers: Sequence[Iterable[int]],
    produced: Mapping[int, Sequence[float]],
    consumed: Mapping[int, Sequence[float]] | None = None,
) -> list[tuple[int, float, float, float]]:
    """Aggregate observed references into (producer, p, gamma, w) edges.

    ``rollout_producers`` holds, per Monte Carlo rollout, the set of
    producer step ids that rollout referenced.  Activation is the fraction
    of rollouts containing the reference; unobserved pairs get no edge.
    """
    n = len(rollout_producers)
    if n < 1:
        raise ValueError("need at least one rollout")
    counts: dict[int, int] = {}
    for producers in rollout_producers:
        for producer in set(producers):
            counts[producer] = counts.get(producer, 0) + 1
    edges = []
    for producer in sorted(counts):
        activation = counts[producer] / n
        consumed_vec = (consumed or {}).get(producer, produced[producer])
        gamma = clamped_compatibility(consumed_vec, produced[producer])
        edges.append((producer, activation, gamma, activation * gamma))
    return edges


def build_dependency_graph(
    rollout_references: Sequence[Iterable[tuple[int, int]]],
    produced: Mapping[int, Sequence[float]],
    consumed: Mapping[tuple[int, int], Sequence[float]] | None = None,
) -> DependencyGraph:
    """Build a probabilistic dependency graph from observed rollouts.

    Each rollout lists (producer, consumer) pairs it exhibited.  Edge
    activation is the observation frequency across rollouts, compatibility
    is the clamped cosine between the consumer-side view of the input and
    the producer's output embedding (the producer's own embedding when no
    consumer-side view is given).
    """
    n = len(rollout_references)
    if n < 1:
        raise ValueError("need at least one rollout")
    counts: dict[tuple[int, int], int] = {}
    for rollout in rollout_references:
        for pair in set(rollout):
            counts[pair] = counts.get(pair, 0) + 1

    graph = DependencyGraph()
    for step_id in sorted(produced):
        graph.add_node(step_id, NodeRisk())
    for (producer, consumer) in sorted(counts):
        if producer not in graph.nodes or consumer not in graph.nodes:
            raise ValueError(f"pair ({producer}, {consumer}) references unknown steps")
        activation = counts[(producer, consumer)] / n
        view = produced[consumer] if consumed is None else consumed.get(
            (producer, consumer), produced[consumer])
        gamma = clamped_compatibility(view, produced[producer])
        graph.add_edge(producer, consumer, activation, gamma)
    topological_order(graph)  # reject cycles up front
    return graph


def _propagated_values(graph: DependencyGraph, lam: float, beta: float,
                       clip: bool) -> dict[int, float]:
    values: dict[int, float] = {}
    for node_id in topological_order(graph):
        node = graph.nodes[node_id]
        incoming = graph.predecessors(node_id)
        total = node.calibrated
        if incoming:
            contributions = [edge.coupling * values[edge.src] for edge in incoming]
            total += lam * max(contributions)
            total += beta * (sum(contributions) / len(contributions))
        values[node_id] = min(max(total, 0.0), 1.0) if clip else total
    return values


def propagate_risk(graph: DependencyGraph, lam: float = 0.5, beta: float = 0.3) -> DependencyGraph:
    """Fill each node's propagated risk via the dual-channel recurrence.

    In topological order every node receives its calibrated local risk plus
    a worst-ancestor channel (weight ``lam``) and a mean-ancestor channel
    (weight ``beta``), clipped to [0, 1].  Nodes without predecessors keep
    their calibrated local value.
    """
    for node_id, value in _propagated_values(graph, lam, beta, clip=True).items():
        graph.nodes[node_id].propagated = value
    return graph


def propagate_risk_unclipped(graph: DependencyGraph, lam: float = 0.5,
                             beta: float = 0.3) -> dict[int, float]:
    """Shadow accumulator without the [0, 1] clip, for bound checking."""
    return _propagated_values(graph, lam, beta, clip=False)
