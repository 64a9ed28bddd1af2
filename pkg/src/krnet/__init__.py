"""Feature recording networks and class-incremental learning on replayed features."""

from .autoencoder import FeatureAutoencoder, FeatureEncoder
from .backbones import (
    ClassifierResNet,
    FeatureExtractor,
    SplitBackbone,
    TaskLearner,
    cifar_resnet,
    imagenet_resnet18,
    split_backbone,
    state_hash,
)
from .checkpoint import (
    checkpoint_kind,
    load_autoencoder,
    load_krnet,
    save_autoencoder,
    save_krnet,
    stored_latent_bytes,
)
from .config import (
    BackboneSpec,
    DatasetSpec,
    ExperimentConfig,
    KRILSpec,
    RecorderSpec,
    decoder_config_cifar,
    decoder_config_imagenet,
    decoder_config_synthetic,
    decoder_config_tiny,
    decoder_config_toy_kril,
    decoder_for_feature_shape,
    experiment_preset,
)
from .corpus import FeatureCorpus, concat_corpora
from .data import (
    SmallImageData,
    extract_and_cache_features,
    imagenet_subset_manifest,
    load_feature_block,
    make_small_image_data,
    make_synthetic_feature_corpus,
    save_feature_block,
    zero_fraction,
)
from .errors import ValidationError
from .grouping import (
    Group,
    GroupIndex,
    apply_local_permutation,
    build_group_index,
    group_index_from_labels,
    permutation_matrix,
)
from .incremental import (
    IncTrainConfig,
    KRILResult,
    TaskSequence,
    baseline_bounds,
    evaluate_model,
    extract_features,
    incremental_loss,
    joint_curve,
    make_task_sequence,
    run_kril,
    train_image_classifier,
    train_task_learner,
)
from .model import BatchedIDEmbedding, DecoderConfig, FeatureDecoder, KRNet
from .normalization import NormalizationStats, compute_norm_stats
from .storage import (
    StorageReport,
    even_class_counts,
    format_bytes_binary,
    reconstruction_metrics,
    storage_report,
    storage_table_markdown,
)
from .training import (
    RecorderTrainConfig,
    RecorderTrainResult,
    clone_untrained,
    elementwise_mse,
    fresh_group_index,
    learning_rate_at,
    loss_kr,
    recorder_for_corpus,
    self_taught_targets,
    train_recorder,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
