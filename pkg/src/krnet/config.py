"""Experiment configuration: nested specs, named presets, JSON persistence.

Every run persists its fully resolved configuration (no implicit defaults) so
results can be reproduced from the run directory alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .incremental import IncTrainConfig
from .model import DecoderConfig
from .training import RecorderTrainConfig

DATASET_NAMES = ("synthetic", "toy-images", "cifar100", "imagenet-subset")
SCALES = ("desk", "paper")


def decoder_config_cifar() -> DecoderConfig:
    """Decoder sized for 64x8x8 features from the 32-layer backbone split."""
    return DecoderConfig(d0=1024, c0=512, h0=8, w0=8, c1=64, deconv_stride=1, target_shape=(64, 8, 8))


def decoder_config_imagenet() -> DecoderConfig:
    """Decoder sized for 256x14x14 features from the 18-layer backbone split."""
    return DecoderConfig(d0=1536, c0=1024, h0=7, w0=7, c1=256, deconv_stride=2, target_shape=(256, 14, 14))


def decoder_config_tiny() -> DecoderConfig:
    """Micro decoder for gradient checks and unit tests (2x2x2 targets)."""
    return DecoderConfig(d0=8, c0=4, h0=2, w0=2, c1=2, deconv_stride=1, target_shape=(2, 2, 2))


def decoder_config_synthetic() -> DecoderConfig:
    """Decoder for the synthetic 16x4x4 recorder-only corpus."""
    return DecoderConfig(d0=128, c0=32, h0=4, w0=4, c1=16, deconv_stride=1, target_shape=(16, 4, 4))


def decoder_config_toy_kril() -> DecoderConfig:
    """Decoder for the toy pipeline's 32x4x4 split features."""
    return DecoderConfig(d0=128, c0=32, h0=4, w0=4, c1=16, deconv_stride=1, target_shape=(32, 4, 4))


def decoder_for_feature_shape(shape: tuple[int, int, int], d0: int = 128) -> DecoderConfig:
    """A reasonable decoder for an arbitrary feature shape — used when a split
    override changes the feature geometry away from a preset's decoder."""
    c, h, w = shape
    c1 = max(2, c // 2)
    return DecoderConfig(d0=d0, c0=c, h0=h, w0=w, c1=c1, deconv_stride=1, target_shape=(c, h, w))


@dataclass
class DatasetSpec:
    name: str = "toy-images"
    root: str | None = None
    image_size: int = 8
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 20
    noise_scale: float = 0.35
    augment: bool = True
    # synthetic feature-corpus knobs (used when name == "synthetic")
    num_samples: int = 2048
    feature_shape: tuple[int, int, int] = (16, 4, 4)
    sparsity: float = 0.2
    feature_noise: float = 0.08

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ValidationError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")
        self.feature_shape = tuple(self.feature_shape)


@dataclass
class BackboneSpec:
    variant: str = "cifar"  # "cifar" (6n+2) or "resnet18"
    depth: int = 8
    split_index: int = 2

    def __post_init__(self):
        if self.variant not in ("cifar", "resnet18"):
            raise ValidationError(f"unknown backbone variant {self.variant!r}")
        if self.split_index < 1:
            raise ValidationError(f"split index must be >= 1, got {self.split_index}")


@dataclass
class RecorderSpec:
    group_size: int = 64
    decoder: DecoderConfig = field(default_factory=decoder_config_synthetic)
    train: RecorderTrainConfig = field(default_factory=RecorderTrainConfig)


@dataclass
class KRILSpec:
    num_tasks: int = 2
    double_krnet: bool = True
    use_aux_loss: bool = True
    use_kr2_loss: bool = True
    train_final_recorder: bool = False
    train: IncTrainConfig = field(default_factory=IncTrainConfig)

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValidationError(f"need at least one incremental task, got {self.num_tasks}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    recorder: RecorderSpec = field(default_factory=RecorderSpec)
    kril: KRILSpec = field(default_factory=KRILSpec)
    seed: int = 0
    output_dir: str = "runs"
    scale: str = "desk"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}, got {self.scale!r}")

    def resolved(self) -> dict:
        """Fully explicit dictionary form — what gets persisted with every run."""
        out = dataclasses.asdict(self)
        out["recorder"]["decoder"] = self.recorder.decoder.to_dict()
        return out

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.resolved(), indent=1, sort_keys=True))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            dataset = DatasetSpec(**raw.get("dataset", {}))
            backbone = BackboneSpec(**raw.get("backbone", {}))
            rec_raw = dict(raw.get("recorder", {}))
            decoder = DecoderConfig.from_dict(rec_raw.pop("decoder")) if "decoder" in rec_raw else decoder_config_synthetic()
            rec_train = RecorderTrainConfig(**rec_raw.pop("train", {}))
            recorder = RecorderSpec(decoder=decoder, train=rec_train, **rec_raw)
            kril_raw = dict(raw.get("kril", {}))
            kril_train = IncTrainConfig(**kril_raw.pop("train", {}))
            kril = KRILSpec(train=kril_train, **kril_raw)
        except TypeError as exc:
            raise ValidationError(f"malformed config: {exc}") from exc
        return cls(
            dataset=dataset,
            backbone=backbone,
            recorder=recorder,
            kril=kril,
            seed=int(raw.get("seed", 0)),
            output_dir=str(raw.get("output_dir", "runs")),
            scale=str(raw.get("scale", "desk")),
        )

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ValidationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def _desk_recorder_train(**overrides) -> RecorderTrainConfig:
    defaults = dict(batch_size=1000, warm_iters=1500, decay_iters=1500, log_every=100)
    defaults.update(overrides)
    return RecorderTrainConfig(**defaults)


def experiment_preset(name: str, scale: str = "desk", seed: int = 0) -> ExperimentConfig:
    """Named presets. Desk scale fits CPU minutes; paper scale mirrors the
    published budgets and expects real datasets plus an accelerator."""
    if scale not in SCALES:
        raise ValidationError(f"scale must be one of {SCALES}, got {scale!r}")
    if name == "synthetic":
        cfg = ExperimentConfig(
            dataset=DatasetSpec(name="synthetic", num_samples=2048, num_classes=8,
                                feature_shape=(16, 4, 4), sparsity=0.2),
            backbone=BackboneSpec(variant="cifar", depth=8, split_index=2),
            recorder=RecorderSpec(group_size=64, decoder=decoder_config_synthetic(),
                                  train=_desk_recorder_train(batch_size=256, warm_iters=3000,
                                                             decay_iters=3000)),
            kril=KRILSpec(num_tasks=2),
            seed=seed,
            scale=scale,
        )
    elif name == "toy-kril":
        cfg = ExperimentConfig(
            dataset=DatasetSpec(name="toy-images", image_size=8, num_classes=10,
                                train_per_class=100, test_per_class=20),
            backbone=BackboneSpec(variant="cifar", depth=8, split_index=2),
            recorder=RecorderSpec(group_size=32, decoder=decoder_config_toy_kril(),
                                  train=_desk_recorder_train(warm_iters=400, decay_iters=400)),
            kril=KRILSpec(num_tasks=2, train=IncTrainConfig(base_epochs=30, inc_epochs=20)),
            seed=seed,
            scale=scale,
        )
    elif name == "cifar100":
        cfg = ExperimentConfig(
            dataset=DatasetSpec(name="cifar100", image_size=32, num_classes=100),
            backbone=BackboneSpec(variant="cifar", depth=32, split_index=11),
            recorder=RecorderSpec(
                group_size=500,
                decoder=decoder_config_cifar(),
                train=RecorderTrainConfig(batch_size=1000, warm_iters=20000, decay_iters=20000,
                                          aux_weight=1e-3),
            ),
            kril=KRILSpec(num_tasks=10, train=IncTrainConfig(base_epochs=160, base_lr=0.1,
                                                             inc_epochs=80, inc_lr=0.1)),
            seed=seed,
            scale="paper",
        )
    elif name == "imagenet-subset":
        cfg = ExperimentConfig(
            dataset=DatasetSpec(name="imagenet-subset", image_size=224, num_classes=100),
            backbone=BackboneSpec(variant="resnet18", depth=18, split_index=6),
            recorder=RecorderSpec(
                group_size=512,
                decoder=decoder_config_imagenet(),
                train=RecorderTrainConfig(batch_size=1000, warm_iters=20000, decay_iters=30000,
                                          aux_weight=5e-4),
            ),
            kril=KRILSpec(num_tasks=10, train=IncTrainConfig(base_epochs=90, base_lr=0.1,
                                                             inc_epochs=45, inc_lr=0.1)),
            seed=seed,
            scale="paper",
        )
    else:
        raise ValidationError(
            f"unknown preset {name!r}; expected synthetic, toy-kril, cifar100 or imagenet-subset"
        )
    return cfg
