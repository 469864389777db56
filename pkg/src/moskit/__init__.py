"""Listener-dependent MOS prediction toolkit.

Trains and evaluates neural predictors of subjective speech quality over
configurable input representations (spectrograms, externally extracted
embeddings, pitch tracks), with per-listener score modeling and a virtual
mean listener for inference on unseen raters.
"""

from .analysis import (
    absolute_deviation,
    deviation_correlation,
    export_agreement_features,
    export_learning_curve,
)
from .dataset import (
    MEAN_LISTENER_INDEX,
    DatasetSplit,
    LDEntry,
    RatedSample,
    agreement_filter,
    build_listener_index,
    expand_ld_entries,
    load_manifest,
    save_manifest,
)
from .errors import (
    AlignmentError,
    ConfigError,
    CoverageError,
    DependencyError,
    DimensionError,
    FormatError,
    ModeError,
    MoskitError,
    ParseError,
    ShapeError,
    TrainingError,
    UndefinedCorrelationError,
    UnknownListenerError,
    ValidationError,
)
from .features import (
    RECIPES,
    FeatureConfig,
    FeatureMatrix,
    StftConfig,
    build_features,
    concatenate,
    load_embedding,
    mel_filterbank,
    mel_spectrogram,
    read_feature_file,
    read_wav,
    stft_magnitude,
    time_align_linear,
    write_feature_file,
)
from .metrics import (
    EvalReport,
    average_ranks,
    evaluate,
    pearson_lcc,
    spearman_srcc,
)
from .model import (
    ListenerDependentNet,
    ModelConfig,
    forward_ld,
    load_checkpoint,
    predict_mean_listener,
    save_checkpoint,
)
from .pitch import extract_f0
from .training import (
    CheckpointRecord,
    DirectoryFeatureSource,
    InMemoryFeatureSource,
    TrainConfig,
    ValidationMetrics,
    combined_loss,
    collate_batch,
    make_batches,
    mse_ld_loss,
    neg_lcc_loss,
    run_training,
    select_best_checkpoint,
    validate_model,
)

__version__ = "0.1.0"
