"""Uncertainty-aware closed-loop workflow execution engine.

Multi-step tasks run through a sense / regulate / correct loop: semantic
uncertainty is estimated from Monte Carlo samples, propagated through a
probabilistic dependency graph, routed to direct, branching or refining
execution, and failures are traced back to their root cause for targeted
re-execution.  Confidence thresholds self-calibrate from verifier feedback.
"""

from .core import (BudgetLedger, CycleDetected, DependencyGraph, Mode,
                   NodeRisk, ProblemSpec, RunResult, StepRecord, TaskKind,
                   Verdict, WorkflowState, topological_order)
from .sensing import (SampleSet, SemanticClustering, ComplexityFeatures,
                      adaptive_similarity_threshold, build_dependency_graph,
                      cluster_samples, complexity_score, effective_coupling,
                      extract_complexity_features, propagate_risk,
                      semantic_entropy)
from .calibration import CalibrationState, calibrate, maybe_update_temperature, record_observation
from .regulating import (BranchCandidate, RoutingThresholds, adaptive_thresholds,
                         branch_count, cohesion, compound_risk, consensus_select,
                         medoid, route, score_cluster, slot_risk)
from .correcting import (FailureContext, asymmetric_calibrate, influence,
                         localize_root_cause, max_path_product, rollback)
from .engine import (EngineConfig, ProviderFailure, RecoveryMode,
                     WorkflowEngine, run_ablation_variant, run_problem)
from .providers import (LiveTaskAdapter, RemoteChatClient, RemoteEmbeddingClient,
                        SyntheticProvider, SyntheticTaskSpec, hash_embed)

__version__ = "0.1.0"
