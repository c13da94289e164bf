"""Cost-aware routing between small and large dialogue-state-tracking experts.

The package turns each dialogue turn into a (state, system, user) triplet,
embeds it, and routes it to the cheapest expert likely to get the turn
exactly right — by retrieving the turn's nearest neighbours from per-expert
pools of previously-solved turns and taking a majority vote. A small linear
adapter trained on task- and expert-aware contrastive pairs sharpens the
embedding space the vote happens in. Reference routers (oracle, confidence
cascade, logistic probe) and a FLOPs-style cost model round out the toolkit.
"""

from .cli import main
from .config import EmbedderSpec, RunConfig, apply_overrides, load_config, parse_config
from .dialogue import (
    Corpus,
    Dialogue,
    LabeledTurn,
    SlotName,
    Triplet,
    Turn,
    aggregate_state,
    load_corpus,
    make_belief,
    save_corpus,
    turn_key,
)
from .embedding import (
    EmbeddingStore,
    HashEmbedder,
    ProjectionAdapter,
    StoreEmbedder,
    cosine,
    hash_embed,
    load_adapter,
    load_store,
    project,
    save_adapter,
    save_store,
    serialize_triplet,
)
from .errors import InputError
from .experts import (
    LLM,
    SLM,
    ExpertId,
    ExpertPool,
    ExpertPrediction,
    PoolEntry,
    ReplayExpert,
    SyntheticExpert,
    SyntheticProfile,
    assign_expert_label,
    build_pools,
    judge_correct,
    load_pool,
    load_predictions,
    sample_pool,
    save_pool,
    write_predictions,
)
from .metrics import (
    CostTable,
    Report,
    assignment_ratio,
    categorize_ood,
    dst_jga,
    make_report,
    make_series,
    save_report,
    save_series,
    tlb_jga,
    total_cost,
)
from .routing import (
    CascadeRouter,
    ClassifierRouter,
    ConstantRouter,
    OracleRouter,
    RetrievalRouter,
    RoutedRun,
    RoutingDecision,
    TurnContext,
    load_run,
    run_pipeline,
    save_run,
    train_classifier_router,
    tune_cascade_threshold,
)
from .seeding import subseed
from .similarity import f1_sets, state_similarity, tlb_similarity, turn_similarity
from .simulate import SimulationSpec, run_simulation
from .supervision import (
    PairSet,
    TrainConfig,
    contrastive_loss,
    grad_check,
    merge_pairs,
    mine_expert_pairs,
    mine_task_pairs,
    train_adapter,
)

__version__ = "0.1.0"

__all__ = [
    "CascadeRouter",
    "ClassifierRouter",
    "ConstantRouter",
    "Corpus",
    "CostTable",
    "Dialogue",
    "EmbedderSpec",
    "EmbeddingStore",
    "ExpertId",
    "ExpertPool",
    "ExpertPrediction",
    "HashEmbedder",
    "InputError",
    "LLM",
    "LabeledTurn",
    "OracleRouter",
    "PairSet",
    "PoolEntry",
    "ProjectionAdapter",
    "ReplayExpert",
    "Report",
    "RetrievalRouter",
    "RoutedRun",
    "RoutingDecision",
    "RunConfig",
    "SLM",
    "SimulationSpec",
    "SlotName",
    "StoreEmbedder",
    "SyntheticExpert",
    "SyntheticProfile",
    "TrainConfig",
    "Triplet",
    "Turn",
    "TurnContext",
    "aggregate_state",
    "apply_overrides",
    "assign_expert_label",
    "assignment_ratio",
    "build_pools",
    "categorize_ood",
    "contrastive_loss",
    "cosine",
    "dst_jga",
    "f1_sets",
    "grad_check",
    "hash_embed",
    "judge_correct",
    "load_adapter",
    "load_config",
    "load_corpus",
    "load_pool",
    "load_predictions",
    "load_run",
    "load_store",
    "main",
    "make_belief",
    "make_report",
    "make_series",
    "merge_pairs",
    "mine_expert_pairs",
    "mine_task_pairs",
    "parse_config",
    "project",
    "run_pipeline",
    "run_simulation",
    "sample_pool",
    "save_adapter",
    "save_corpus",
    "save_pool",
    "save_report",
    "save_run",
    "save_series",
    "save_store",
    "serialize_triplet",
    "state_similarity",
    "subseed",
    "tlb_jga",
    "tlb_similarity",
    "total_cost",
    "train_adapter",
    "train_classifier_router",
    "tune_cascade_threshold",
    "turn_key",
    "turn_similarity",
    "write_predictions",
]
