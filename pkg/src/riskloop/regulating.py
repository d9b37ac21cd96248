"""Stage 2: compound risk synthesis, adaptive threshold derivation,
three-regime routing, branch sizing, and consensus selection over
executed branch candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import Mode, Verdict, clamp_unit
from .sensing import SampleSet, cluster_samples

FALLBACK_THRESHOLDS = (0.7, 0.3)
MIN_HISTORY_FOR_ADAPTIVE = 10
BRANCH_FLOOR = 2

DEFAULT_ALPHA = 0.6
DEFAULT_TAU_SLOT = 0.4
DEFAULT_ETA = 0.6


class ThresholdSource(str, Enum):
    ADAPTIVE = "Adaptive"
    FALLBACK = "Fallback"


class CandidateOrigin(str, Enum):
    PRIMARY = "Primary"
    ALTERNATIVE = "Alternative"
    CONSERVATIVE = "Conservative"
    EXTRA = "Extra"


@dataclass(frozen=True)
class RoutingThresholds:
    high: float
    low: float
    source: ThresholdSource

    def __post_init__(self) -> None:
        if self.low > self.high:
            raise ValueError("theta_low must not exceed theta_high")
        if self.source is ThresholdSource.FALLBACK and (self.high, self.low) != FALLBACK_THRESHOLDS:
            raise ValueError(f"fallback thresholds are fixed at {FALLBACK_THRESHOLDS}")


@dataclass(frozen=True)
class BranchCandidate:
    text: str
    embedding: tuple[float, ...]
    verifier_outcome: Verdict
    origin: CandidateOrigin

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(x * x for x in self.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("candidate embeddings must be unit-norm")
        if self.verifier_outcome not in (Verdict.PASS, Verdict.FAIL):
            raise ValueError("branch candidates must carry a Pass or Fail verdict")


@dataclass(frozen=True)
class Selected:
    text: str
    cluster_id: int


def slot_risk(slot_us: Sequence[float], alpha: float = DEFAULT_ALPHA,
              tau_slot: float = DEFAULT_TAU_SLOT) -> float:
    """Aggregate per-slot uncertainties into one scalar.

    Worst-case channel weighted by alpha; the complementary channel avera-
    ges only the slots above tau_slot, and vanishes when none are.
    """
    alpha = clamp_unit(alpha, "alpha")
    values = [clamp_unit(u, "slot uncertainty") for u in slot_us]
    if not values:
        return 0.0
    worst = max(values)
    high = [u for u in values if u > tau_slot]
    if not high:
        return alpha * worst
    return alpha * worst + (1.0 - alpha) * (sum(high) / len(high))


def compound_risk(propagated: float, slot_us: Sequence[float],
                  alpha: float = DEFAULT_ALPHA,
                  tau_slot: float = DEFAULT_TAU_SLOT) -> float:
    """Unified risk: the worse of propagated systemic risk and slot risk."""
    return max(clamp_unit(propagated, "propagated"),
               slot_risk(slot_us, alpha, tau_slot))


def adaptive_thresholds(confidence_history: Sequence[float]) -> RoutingThresholds:
    """Derive routing thresholds from the running confidence distribution.

    Falls back to (0.7, 0.3) until ten problems have been seen.  With
    enough history, theta_high is the third quartile and theta_low is
    Q1 - 0.5*IQR, clamped up to zero and never above theta_high.
    """
    if len(confidence_history) < MIN_HISTORY_FOR_ADAPTIVE:
        return RoutingThresholds(*FALLBACK_THRESHOLDS, ThresholdSource.FALLBACK)
    values = np.asarray(confidence_history, dtype=float)
    q1 = float(np.quantile(values, 0.25))
    q3 = float(np.quantile(values, 0.75))
    low = q1 - 0.5 * (q3 - q1)
    low = min(max(low, 0.0), q3)
    return RoutingThresholds(q3, low, ThresholdSource.ADAPTIVE)


def route(confidence: float, thresholds: RoutingThresholds) -> Mode:
    confidence = clamp_unit(confidence, "confidence")
    if confidence > thresholds.high:
        return Mode.DIRECT
    if confidence >= thresholds.low:
        return Mode.BRANCH
    return Mode.REFINE


def branch_count(confidence: float, kappa: float = 3.0, k_max: int = 7) -> int:
    """Branch width scales with residual uncertainty, floored at two.

    The raw ceil(kappa * (1 - c)) collapses to one near the upper routing
    threshold, which would make the branch regime degenerate, so two is
    the working floor.
    """
    confidence = clamp_unit(confidence, "confidence")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if k_max < BRANCH_FLOOR:
        raise ValueError(f"k_max must be >= {BRANCH_FLOOR}")
    raw = math.ceil(kappa * (1.0 - confidence))
    return min(max(raw, BRANCH_FLOOR), k_max)


def cohesion(embeddings: Sequence[Sequence[float]]) -> float:
    """Mean pairwise cosine over distinct pairs, clamped to [0, 1].

    A singleton is perfectly self-consistent by definition.
    """
    if not len(embeddings):
        raise ValueError("cohesion needs at least one member")
    n = len(embeddings)
    if n == 1:
        return 1.0
    vectors = np.asarray(embeddings, dtype=float)
    sims = vectors @ vectors.T
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(sims[i, j])
            pairs += 1
    return min(max(total / pairs, 0.0), 1.0)


def medoid(embeddings: Sequence[Sequence[float]]) -> int:
    """Index of the member with maximal total similarity to the rest.

    Ties break toward the lowest index.
    """
    if not len(embeddings):
        raise ValueError("medoid needs at least one member")
    vectors = np.asarray(embeddings, dtype=float)
    sims = vectors @ vectors.T
    n = len(embeddings)
    best_index = 0
    best_score = -math.inf
    for i in range(n):
        score = 0.0
        for j in range(n):
            if j != i:
                score += float(sims[i, j])
        if score > best_score:
            best_score = score
            best_index = i
    return best_index


def score_cluster(valid_fraction: float, cluster_cohesion: float, size: int,
                  eta: float = DEFAULT_ETA) -> float:
    """Cluster quality: validity and cohesion blended, plus a log-size bonus."""
    valid_fraction = clamp_unit(valid_fraction, "valid_fraction")
    cluster_cohesion = clamp_unit(cluster_cohesion, "cohesion")
    if size < 1:
        raise ValueError("size must be >= 1")
    return eta * valid_fraction + (1.0 - eta) * cluster_cohesion + math.log(size)


def consensus_select(candidates: Sequence[BranchCandidate], tau_sim: float,
                     eta: float = DEFAULT_ETA) -> Selected | None:
    """Pick the representative output among executed branch candidates.

    Candidates are clustered exactly like Monte Carlo samples, clusters are
    scored on validity fraction, cohesion and size, and the winning
    cluster's medoid text comes back.  Returns None (escalate) when no
    cluster holds a single passing member.  Score ties prefer the larger
    cluster, then the smaller medoid text, then the lowest medoid index;
    the text tier keeps the selection invariant under candidate reordering.
    """
    if not candidates:
        raise ValueError("consensus needs at least one candidate")
    if len(candidates) == 1:
        only = candidates[0]
        if only.verifier_outcome is Verdict.PASS:
            return Selected(only.text, 0)
        return None

    sample_set = SampleSet(
        samples=tuple(c.text for c in candidates),
        embeddings=tuple(c.embedding for c in candidates),
    )
    clustering = cluster_samples(sample_set, tau_sim)

    if not any(c.verifier_outcome is Verdict.PASS for c in candidates):
        return None

    best: tuple[float, int, str, int] | None = None  # (score, size, text, medoid)
    best_cluster = -1
    for cluster_id, members in enumerate(clustering.clusters):
        member_candidates = [candidates[i] for i in members]
        vectors = [c.embedding for c in member_candidates]
        valid = sum(1 for c in member_candidates
                    if c.verifier_outcome is Verdict.PASS) / len(members)
        score = score_cluster(valid, cohesion(vectors), len(members), eta)
        medoid_global = members[medoid(vectors)]
        key = (score, len(members), candidates[medoid_global].text, medoid_global)
        if best is None or _prefer(key, best):
            best = key
            best_cluster = cluster_id
    return Selected(best[2], best_cluster)


def _prefer(candidate: tuple[float, int, str, int],
            incumbent: tuple[float, int, str, int]) -> bool:
    if candidate[0] != incumbent[0]:
        return candidate[0] > incumbent[0]
    if candidate[1] != incumbent[1]:
        return candidate[1] > incumbent[1]
    if candidate[2] != incumbent[2]:
        return candidate[2] < incumbent[2]
    return candidate[3] < incumbent[3]
