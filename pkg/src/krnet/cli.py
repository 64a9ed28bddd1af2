"""Command-line entry point.

Every subcommand resolves a full experiment configuration (preset or
--config), runs, and leaves a run directory holding config.json plus a
metrics CSV.  Exit codes: 0 success, 1 invalid configuration or arguments,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import torch

from .autoencoder import FeatureAutoencoder
from .backbones import cifar_resnet, imagenet_resnet18, split_backbone
from .checkpoint import save_autoencoder, save_krnet
from .config import (
    ExperimentConfig,
    decoder_for_feature_shape,
    experiment_preset,
)
from .data import make_small_image_data, make_synthetic_feature_corpus
from .errors import ValidationError
from .incremental import (
    baseline_bounds,
    run_kril,
    train_image_classifier,
    write_metrics_csv,
)
from .model import KRNet
from .storage import (
    even_class_counts,
    plot_accuracy_curves,
    reconstruction_metrics,
    storage_report,
    storage_table_markdown,
    write_curves_csv,
    write_storage_csv,
)
from .training import fresh_group_index, train_recorder

# The five published accounting rows: (class count, sample count) at H=512,
# feature shape 256x14x14, autoencoder latent width 1024.
PUBLISHED_STORAGE_ROWS = [
    (50, 64_817),
    (100, 129_395),
    (150, 194_217),
    (200, 255_224),
    (250, 319_811),
]
PUBLISHED_GROUP_SIZE = 512
PUBLISHED_FEATURE_SHAPE = (256, 14, 14)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--scale", choices=["desk", "paper"], default=None, help="preset scale")
    sp.add_argument("--output", type=Path, default=None, help="run directory")


def _add_kril_toggles(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--tasks", type=int, default=None, help="number of incremental tasks")
    sp.add_argument("--split-index", type=int, default=None, help="backbone split block")
    sp.add_argument("--no-aux", action="store_true", help="drop the incremental feature-consistency loss")
    sp.add_argument("--no-kr2", action="store_true", help="drop the recorder's feature-space loss term")
    sp.add_argument("--single-krnet", action="store_true", help="one recorder for base and increments")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krnet",
        description="Feature recording and class-incremental learning experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train-base", help="train and split the base-task backbone")
    _add_common(sp)
    sp.add_argument("--split-index", type=int, default=None)

    sp = sub.add_parser("train-recorder", help="train a recorder on the synthetic corpus")
    _add_common(sp)
    sp.add_argument("--no-aux", action="store_true", help="accepted for symmetry; the synthetic corpus has no classifier head")

    sp = sub.add_parser("kril", help="run the incremental pipeline end to end")
    _add_common(sp)
    _add_kril_toggles(sp)

    sp = sub.add_parser("bounds", help="joint / oracle / fine-tune reference curves")
    _add_common(sp)
    _add_kril_toggles(sp)

    sp = sub.add_parser("storage-table", help="storage accounting table")
    _add_common(sp)
    sp.add_argument("--group-size", type=int, default=PUBLISHED_GROUP_SIZE)
    sp.add_argument("--model-mb", type=float, default=327.9,
                    help="recorder weight size in MB for the compression ratio")

    sp = sub.add_parser("recon-report", help="reconstruction error report on the synthetic corpus")
    _add_common(sp)

    sp = sub.add_parser("ablate", help="run a toggled pipeline variant")
    _add_common(sp)
    _add_kril_toggles(sp)
    return parser


def _resolve_config(args, default_preset: str) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = experiment_preset(default_preset, scale=args.scale or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        cfg.scale = args.scale
    if args.output is not None:
        cfg.output_dir = str(args.output)
    for name, target in [
        ("tasks", ("kril", "num_tasks")),
        ("split_index", ("backbone", "split_index")),
    ]:
        value = getattr(args, name, None)
        if value is not None:
            setattr(getattr(cfg, target[0]), target[1], value)
    if getattr(args, "no_aux", False):
        cfg.kril.use_aux_loss = False
    if getattr(args, "no_kr2", False):
        cfg.kril.use_kr2_loss = False
    if getattr(args, "single_krnet", False):
        cfg.kril.double_krnet = False
    return cfg


def _run_dir(cfg: ExperimentConfig, command: str) -> Path:
    path = Path(cfg.output_dir)
    # the default root gets one folder per subcommand; explicit --output is used as-is
    if path.name == "runs" or path == Path("runs"):
        path = path / command
    path.mkdir(parents=True, exist_ok=True)
    cfg.save(path / "config.json")
    return path


def _net_factory(cfg: ExperimentConfig):
    spec = cfg.backbone
    if spec.variant == "resnet18":
        return lambda n: imagenet_resnet18(n)
    return lambda n: cifar_resnet(spec.depth, n)


def _image_data(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.name == "toy-images":
        return make_small_image_data(
            num_classes=ds.num_classes,
            train_per_class=ds.train_per_class,
            test_per_class=ds.test_per_class,
            image_size=ds.image_size,
            noise_scale=ds.noise_scale,
            seed=cfg.seed,
        )
    raise ValidationError(
        f"dataset {ds.name!r} is not runnable through this subcommand at desk scale; "
        "use the toy-images or synthetic presets"
    )


def _matched_decoder(cfg: ExperimentConfig, data):
    """The configured decoder if it matches the split's feature geometry,
    otherwise a derived one so split overrides always run."""
    net = _net_factory(cfg)(2)
    split = split_backbone(net, cfg.backbone.split_index, data.image_shape)
    if tuple(cfg.recorder.decoder.target_shape) == tuple(split.feature_shape):
        return cfg.recorder.decoder
    return decoder_for_feature_shape(split.feature_shape)


def _cmd_train_base(args) -> None:
    cfg = _resolve_config(args, "toy-kril")
    run_dir = _run_dir(cfg, "train-base")
    data = _image_data(cfg)
    torch.manual_seed(cfg.seed)
    from .incremental import evaluate_model, make_task_sequence, _select, _remap

    classes = sorted(set(int(c) for c in data.train_labels.tolist()))
    sequence = make_task_sequence(classes, cfg.kril.num_tasks, cfg.seed)
    label_map = sequence.label_map()
    base_classes = sequence.class_groups[0]
    rows = _select(base_classes, data.train_labels)
    net = _net_factory(cfg)(len(base_classes))
    train_acc = train_image_classifier(
        net, data.train_images[rows], _remap(data.train_labels, label_map)[rows],
        cfg.kril.train, cfg.seed,
    )
    split = split_backbone(net, cfg.backbone.split_index, data.image_shape)
    test_rows = _select(base_classes, data.test_labels)
    test_acc = evaluate_model(
        split.extractor, split.learner,
        data.test_images[test_rows], _remap(data.test_labels, label_map)[test_rows],
    )
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    torch.save(split.extractor.state_dict(), ckpt_dir / "extractor.pt")
    torch.save(split.learner.state_dict(), ckpt_dir / "learner_base.pt")
    write_metrics_csv(run_dir / "metrics.csv", [
        {"task": 0, "seen_classes": len(base_classes), "split": "train", "accuracy": train_acc},
        {"task": 0, "seen_classes": len(base_classes), "split": "test", "accuracy": test_acc},
    ])
    print(f"base task: {len(base_classes)} classes, train acc {train_acc:.3f}, "
          f"test acc {test_acc:.3f}, features {tuple(split.feature_shape)}")
    print(f"run dir: {run_dir}")


def _cmd_train_recorder(args) -> None:
    cfg = _resolve_config(args, "synthetic")
    run_dir = _run_dir(cfg, "train-recorder")
    ds = cfg.dataset
    corpus = make_synthetic_feature_corpus(
        num_samples=ds.num_samples,
        num_classes=ds.num_classes,
        feature_shape=ds.feature_shape,
        sparsity=ds.sparsity,
        noise_scale=ds.feature_noise,
        seed=cfg.seed,
    )
    torch.manual_seed(cfg.seed)
    recorder = KRNet(fresh_group_index(corpus, cfg.recorder.group_size), cfg.recorder.decoder)
    result = train_recorder(recorder, corpus, cfg.recorder.train,
                            log_path=run_dir / "metrics.csv")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_krnet(ckpt_dir / "recorder.krz", recorder)
    print(f"trained recorder on {len(corpus)} features "
          f"({recorder.group_index.num_groups} groups of {cfg.recorder.group_size})")
    print(f"final loss {result.final_loss:.6f}, replay mse {result.replay_mse:.6f}")
    print(f"run dir: {run_dir}")


def _cmd_kril(args, command: str = "kril") -> None:
    cfg = _resolve_config(args, "toy-kril")
    if command == "ablate":
        variant = []
        if not cfg.kril.use_aux_loss:
            variant.append("no-aux")
        if not cfg.kril.use_kr2_loss:
            variant.append("no-kr2")
        if not cfg.kril.double_krnet:
            variant.append("single-krnet")
        if args.split_index is not None:
            variant.append(f"split{args.split_index}")
        command = "ablate-" + ("+".join(variant) if variant else "default")
    run_dir = _run_dir(cfg, command)
    data = _image_data(cfg)
    decoder = _matched_decoder(cfg, data)
    # the pipeline-level aux toggle wins over the inner training config
    inc_cfg = cfg.kril.train
    if not cfg.kril.use_aux_loss:
        inc_cfg = dataclasses.replace(inc_cfg, use_aux_loss=False)
    result = run_kril(
        data,
        _net_factory(cfg),
        split_index=cfg.backbone.split_index,
        group_size=cfg.recorder.group_size,
        decoder_config=decoder,
        recorder_config=cfg.recorder.train,
        inc_config=inc_cfg,
        num_tasks=cfg.kril.num_tasks,
        seed=cfg.seed,
        double_krnet=cfg.kril.double_krnet,
        use_kr2=cfg.kril.use_kr2_loss,
        replay_mode="recorder",
        train_final_recorder=cfg.kril.train_final_recorder,
        output_dir=run_dir,
    )
    points = ", ".join(f"{a:.3f}" for a in result.accuracies)
    print(f"accuracy by task: [{points}] over {result.seen_counts} seen classes")
    print(f"run dir: {run_dir}")


def _cmd_bounds(args) -> None:
    cfg = _resolve_config(args, "toy-kril")
    run_dir = _run_dir(cfg, "bounds")
    data = _image_data(cfg)
    decoder = _matched_decoder(cfg, data)
    curves = baseline_bounds(
        data,
        _net_factory(cfg),
        split_index=cfg.backbone.split_index,
        group_size=cfg.recorder.group_size,
        decoder_config=decoder,
        recorder_config=cfg.recorder.train,
        inc_config=cfg.kril.train,
        num_tasks=cfg.kril.num_tasks,
        seed=cfg.seed,
    )
    write_curves_csv(run_dir / "metrics.csv", curves)
    plot_accuracy_curves(run_dir / "accuracy_curves.png", curves)
    for method, curve in curves.items():
        print(f"{method:>10}: " + "  ".join(f"{a:.3f}" for a in curve))
    print(f"run dir: {run_dir}")


def _cmd_storage_table(args) -> None:
    cfg = _resolve_config(args, "synthetic")
    run_dir = _run_dir(cfg, "storage-table")
    model_bytes = int(round(args.model_mb * 2**20))
    reports = [
        storage_report(
            even_class_counts(classes, samples),
            args.group_size,
            PUBLISHED_FEATURE_SHAPE,
            model_weight_bytes=model_bytes,
        )
        for classes, samples in PUBLISHED_STORAGE_ROWS
    ]
    write_storage_csv(run_dir / "metrics.csv", reports)
    table = storage_table_markdown(reports)
    (run_dir / "storage_table.md").write_text(table + "\n")
    print(table)
    print(f"run dir: {run_dir}")


def _cmd_recon_report(args) -> None:
    cfg = _resolve_config(args, "synthetic")
    run_dir = _run_dir(cfg, "recon-report")
    ds = cfg.dataset
    corpus = make_synthetic_feature_corpus(
        num_samples=ds.num_samples, num_classes=ds.num_classes,
        feature_shape=ds.feature_shape, sparsity=ds.sparsity,
        noise_scale=ds.feature_noise, seed=cfg.seed,
    )
    torch.manual_seed(cfg.seed)
    recorder = KRNet(fresh_group_index(corpus, cfg.recorder.group_size), cfg.recorder.decoder)
    train_recorder(recorder, corpus, cfg.recorder.train)
    torch.manual_seed(cfg.seed)
    ae = FeatureAutoencoder(2 * cfg.recorder.group_size, cfg.recorder.decoder)
    train_recorder(ae, corpus, cfg.recorder.train)

    from .corpus import FeatureCorpus

    rows = []
    for name, model in [("krnet", recorder), ("autoencoder", ae)]:
        if name == "krnet":
            replayed = FeatureCorpus(model.replay(corpus.sample_ids), corpus.sample_ids, corpus.labels)
            latent_bytes = model.latent_parameter_count() * 4
        else:
            replayed = FeatureCorpus(model.reconstruct(corpus.sample_ids), corpus.sample_ids, corpus.labels)
            latent_bytes = model.latent_bank_bytes()
        metrics = reconstruction_metrics(replayed, corpus)
        rows.append({"method": name, "mse": metrics["mse"],
                     "max_abs_error": metrics["max_abs_error"], "latent_bytes": latent_bytes})
        print(f"{name}: mse {metrics['mse']:.2e}, max abs err {metrics['max_abs_error']:.3f}, "
              f"latent bytes {latent_bytes}")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_krnet(ckpt_dir / "recorder.krz", recorder)
    save_autoencoder(ckpt_dir / "autoencoder.krz", ae)
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "mse", "max_abs_error", "latent_bytes"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"run dir: {run_dir}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on malformed command lines, but here 2 means
        # runtime failure; report bad usage as a validation error instead
        return 0 if exc.code == 0 else 1
    handlers = {
        "train-base": _cmd_train_base,
        "train-recorder": _cmd_train_recorder,
        "kril": _cmd_kril,
        "bounds": _cmd_bounds,
        "storage-table": _cmd_storage_table,
        "recon-report": _cmd_recon_report,
        "ablate": lambda a: _cmd_kril(a, command="ablate"),
    }
    try:
        handlers[args.command](args)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - exercised via subcommand failures
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
