"""Sharded session-recommendation unlearning.

Training sessions are partitioned into similarity-based, capacity-bounded
shards, one sequence model is trained per shard, and a centroid-conditioned
attention layer fuses the per-shard states into the final next-item
prediction. Deleting an interaction retrains only the owning shard's model
plus the fusion layer, optionally removing extra correlated items so the
deleted one cannot be re-inferred; an audit measures exactly that.
"""

from .aggregation import (
    AggregationConfig,
    AggregationModel,
    ShardCentroids,
    SruModel,
    attention_scores,
    compute_centroid,
    compute_centroids,
    fuse,
    predict_output,
    project,
    train_aggregation,
)
from .backbone import (
    BackboneConfig,
    GruModel,
    encode,
    encode_batch,
    gru_cell,
    init_gru_model,
    score,
    train_backbone,
    train_many,
)
from .checkpoint import (
    load_assignment,
    load_checkpoint,
    load_datasets,
    save_assignment,
    save_checkpoint,
    save_datasets,
)
from .config import ExperimentConfig
from .corpus import (
    ItemVocab,
    Session,
    SessionDataset,
    generate_synthetic,
    ingest_log,
    preprocess,
    split,
)
from .errors import (
    CheckpointError,
    ContractError,
    DeterminismError,
    DimensionError,
    EmptyDatasetError,
    IntegrityError,
    ParseError,
    SruError,
    StageDependencyError,
    StaleArtifactError,
    VersionError,
)
from .evaluation import (
    SisaModel,
    benchmark_unlearn,
    evaluate,
    hit_effectiveness,
    metrics_at_k,
    rank_from_logits,
    rank_of_target,
    sisa_baseline,
)
from .numerics import (
    AdamState,
    ParamStore,
    RngStream,
    adam_step,
    cross_entropy_with_grad,
    derive_seed,
    finite_difference_check,
    linear_forward_backward,
    softmax,
)
from .partition import (
    PartitionConfig,
    ShardAssignment,
    balanced_kmeans,
    cluster_purity,
    embed_all,
    make_shards,
)
from .pipeline import fit_state, load_state, run_pipeline
from .reports import EffectivenessReport, RankingReport, TimingReport, emit_report
from .unlearning import (
    DeletionResult,
    SruState,
    UnlearnOutcome,
    UnlearnRequest,
    apply_deletion,
    ced_select,
    execute_unlearn,
    load_requests,
    ned_select,
    red_select,
    sample_requests,
    save_requests,
)

__version__ = "0.1.0"
