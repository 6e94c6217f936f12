"""Desk-scale adversarial-examples laboratory for byte-level malware CNNs.

Train a small gated-convolution classifier on a synthetic PE corpus, mount
append- and slack-based evasion attacks against it, and measure success
rates, byte efficiency, pooling behavior and cross-model transfer.
"""

from .attacks import (
    ATTACK_KINDS,
    AttackConfig,
    AttackOutcome,
    benign_append,
    default_eps_step,
    embedding_mapping,
    fgm_append,
    gradient_append,
    oscillation_period,
    random_append,
    run_attack,
    slack_fgm,
)
from .corpus import (
    BENIGN_MOTIF,
    MALWARE_MOTIF,
    GroundTruth,
    SynthConfig,
    generate_corpus,
    generate_synthetic_pe,
    load_ground_truth,
)
from .errors import (
    CheckpointError,
    CorruptCheckpointError,
    DivergenceError,
    EmptyCandidatesError,
    EmptyDatasetError,
    IncompatibleCheckpointError,
    IncompatibleModelsError,
    InvalidTokenError,
    MalconvLabError,
    ManifestError,
    NoDonorError,
    NoSlackError,
    NotAPEError,
    NotAttackableError,
    PEParseError,
    SectionBoundsError,
    SectionOverlapError,
    ShapeError,
    StoreError,
    TruncatedFileError,
)
from .estimator import MalConvClassifier
from .evaluation import (
    Candidate,
    CandidateSet,
    EvalReport,
    OutcomeRecord,
    PoolingReport,
    ReportRow,
    TransferReport,
    benign_donor_pool,
    candidate_size_limit,
    default_grid,
    pooling_cdf,
    run_attack_suite,
    select_candidates,
    success_rate,
    transfer_eval,
)
from .model import (
    BENIGN,
    MALWARE,
    MALWARE_THRESHOLD,
    PADDING_TOKEN,
    VOCAB_SIZE,
    EpochStats,
    Hyperparams,
    MalConvModel,
    TrainConfig,
    classification_loss,
    embed,
    forward,
    input_gradient,
    maxpool_argmax,
    predict_score,
    predict_scores,
    tokenize,
    train,
)
from .pe import PEFile, SectionHeader, SlackRegion, parse_pe, slack_indices, slack_regions
from .store import (
    ManifestEntry,
    load_checkpoint,
    load_sample,
    load_split,
    read_keyvalues,
    read_manifest,
    read_report,
    save_checkpoint,
    write_keyvalues,
    write_manifest,
    write_report,
)

__version__ = "0.1.0"

__all__ = [
    "ATTACK_KINDS",
    "AttackConfig",
    "AttackOutcome",
    "BENIGN",
    "BENIGN_MOTIF",
    "Candidate",
    "CandidateSet",
    "CheckpointError",
    "CorruptCheckpointError",
    "DivergenceError",
    "EmptyCandidatesError",
    "EmptyDatasetError",
    "EpochStats",
    "EvalReport",
    "GroundTruth",
    "Hyperparams",
    "IncompatibleCheckpointError",
    "IncompatibleModelsError",
    "InvalidTokenError",
    "MALWARE",
    "MALWARE_MOTIF",
    "MALWARE_THRESHOLD",
    "MalConvClassifier",
    "MalConvModel",
    "MalconvLabError",
    "ManifestEntry",
    "ManifestError",
    "NoDonorError",
    "NoSlackError",
    "NotAPEError",
    "NotAttackableError",
    "OutcomeRecord",
    "PADDING_TOKEN",
    "PEFile",
    "PEParseError",
    "PoolingReport",
    "ReportRow",
    "SectionBoundsError",
    "SectionHeader",
    "SectionOverlapError",
    "ShapeError",
    "SlackRegion",
    "StoreError",
    "SynthConfig",
    "TrainConfig",
    "TransferReport",
    "TruncatedFileError",
    "VOCAB_SIZE",
    "benign_append",
    "benign_donor_pool",
    "candidate_size_limit",
    "classification_loss",
    "default_eps_step",
    "default_grid",
    "embed",
    "embedding_mapping",
    "fgm_append",
    "forward",
    "generate_corpus",
    "generate_synthetic_pe",
    "gradient_append",
    "input_gradient",
    "load_checkpoint",
    "load_ground_truth",
    "load_sample",
    "load_split",
    "maxpool_argmax",
    "oscillation_period",
    "parse_pe",
    "pooling_cdf",
    "predict_score",
    "predict_scores",
    "random_append",
    "read_keyvalues",
    "read_manifest",
    "read_report",
    "run_attack",
    "run_attack_suite",
    "save_checkpoint",
    "select_candidates",
    "slack_fgm",
    "slack_indices",
    "slack_regions",
    "success_rate",
    "tokenize",
    "train",
    "transfer_eval",
    "write_keyvalues",
    "write_manifest",
    "write_report",
]
