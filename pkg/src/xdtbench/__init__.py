"""Cross-disease zero-shot transfer benchmark.

Train a small head on frozen-encoder embeddings of one binary disease
dataset with contrastive-clustering objectives, then evaluate it zero-shot
on other disease datasets; metrics, result matrices, and loss-ranking
analysis included.
"""

__version__ = "0.1.0"

from .data import (
    DatasetManifest,
    SampleRecord,
    SplitAssignment,
    SplitSpec,
    balance_classes,
    load_manifest,
    load_split,
    make_splits,
    save_manifest,
    save_split,
)
from .encoder import (
    EmbeddingSet,
    EncoderAdapter,
    HashEncoderAdapter,
    PrecomputedAdapter,
    SyntheticSpec,
    extract_embeddings,
    load_cache,
    save_cache,
    synth_embeddings,
    transfer_pair_specs,
)
from .engine import (
    ConfusionCounts,
    EpochStats,
    ExperimentResult,
    MetricsReport,
    TrainConfig,
    TrainedModel,
    accuracy,
    compute_mar,
    evaluate,
    f1,
    f1_macro,
    f1_weighted,
    metrics_report,
    precision,
    rank_cells,
    read_results,
    recall,
    relative_accuracy,
    split_embedding_set,
    statistical_best,
    train,
    write_results,
    zero_shot_matrix,
)
from .errors import (
    AdapterError,
    CacheError,
    ConfigError,
    DataError,
    LossError,
    ManifestError,
    ModelError,
    SplitError,
    TrainError,
    XdtError,
)
from .losses import LossConfig, LossValue, ce_loss, ec_loss, lc_loss, loss_gradient, one_hot, pair_agreement
from .model import (
    HeadConfig,
    HeadParameters,
    classify,
    forward_latent,
    init_head,
    load_checkpoint,
    predict_class,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
