"""Command-line pipeline orchestration.

Subcommands run one stage each and are idempotent given the same config and
seed: synth, cluster, train-gan, generate, train-fusion, index, eval,
ablate. Every command writes a run manifest recording config and artifact
hashes. Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoints import load_weight_manifest, rng_state_meta, write_run_manifest
from .clustering import PoseSet, derive_pose_set
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import DatasetSplit, load_image_dir, make_split, save_image
from .fusion import (
    FusionNet,
    ReidPipeline,
    extract_fused,
    load_extractor_checkpoint,
    load_fusion_checkpoint,
    load_gan_checkpoint,
    save_fusion_checkpoint,
    train_fusion,
)
from .imageops import make_grid, resize_bilinear
from .networks import FeatureExtractor, extract, generate
from .retrieval import EvalOptions, evaluate, save_descriptor_matrix
from .toydata import write_toy_dataset
from .training import (
    DivergenceError,
    save_extractor_checkpoint,
    save_gan_checkpoint,
    train_identity_backbone,
    train_ptgan,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

ABLATION_GRID = [
    (mode, method, k)
    for mode in ("fullbody", "bodyjoint")
    for method in ("kmeans", "gmm")
    for k in (8, 12, 16, 24)
]


class MissingPrerequisiteError(RuntimeError):
    """An earlier pipeline stage has not produced its artifact yet."""


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = cfg.resolved_output_dir()
    return {
        "out": out,
        "dataset": Path(cfg.dataset.root) if cfg.dataset.root else out / "dataset",
        "pose_set": out / "pose_set.json",
        "backbone_f1": out / "backbone_f1.ckpt",
        "backbone_f2": out / "backbone_f2.ckpt",
        "gan": out / "gan.ckpt",
        "gan_history": out / "gan_history.json",
        "fusion": out / "fusion.ckpt",
        "fusion_history": out / "fusion_history.json",
        "gallery_matrix": out / "descriptors_gallery.bin",
        "query_matrix": out / "descriptors_query.bin",
        "report_json": out / "report.json",
        "report_txt": out / "report.txt",
        "cmc_plot": out / "cmc.png",
        "distance_plot": out / "distances.png",
        "grid": out / "generated_grid.png",
        "ablation": out / "ablation.csv",
        "manifests": out / "manifests",
    }


def _require_artifact(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"missing {path.name}: run {producer} first")
    return path


def _load_split(cfg: ExperimentConfig, paths: dict[str, Path]) -> DatasetSplit:
    root = paths["dataset"]
    _require_artifact(Path(root) / "manifest.csv" if cfg.dataset.naming == "flat" else Path(root), "synth")
    pose_dir = Path(cfg.dataset.pose_dir) if cfg.dataset.pose_dir else Path(root) / "poses"
    samples = load_image_dir(root, naming=cfg.dataset.naming, pose_dir=pose_dir if pose_dir.exists() else None)
    return make_split(
        samples, cfg.dataset.protocol, seed=cfg.seed, test_identities=cfg.dataset.cuhk03_test_identities
    )


def _manifest(cfg: ExperimentConfig, paths: dict[str, Path], command: str, inputs: dict, outputs: dict) -> None:
    write_run_manifest(
        paths["manifests"] / f"{command}.json",
        command=command,
        config=cfg.to_dict(),
        inputs=inputs,
        outputs=outputs,
    )


def _load_backbone(cfg: ExperimentConfig, role: str, ckpt_path: Path) -> FeatureExtractor:
    if ckpt_path.exists():
        extractor, _ = load_extractor_checkpoint(ckpt_path)
        return extractor
    raise MissingPrerequisiteError(
        f"missing {ckpt_path.name}: run {'train-gan' if role == 'f1' else 'train-fusion'} first"
    )


def _build_pretrained_backbone(cfg: ExperimentConfig, manifest_path: str, variant: str) -> FeatureExtractor:
    extractor = FeatureExtractor(
        variant=variant,
        descriptor_dim=cfg.gan.descriptor_dim,
        input_size=cfg.gan.image_size,
        provenance=f"manifest:{manifest_path}",
    )
    tensors = load_weight_manifest(manifest_path)
    extractor.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    extractor.eval()
    return extractor


def _make_f1(cfg: ExperimentConfig, split: DatasetSplit) -> FeatureExtractor:
    if cfg.gan.backbone_variant == "toy":
        extractor, _ = train_identity_backbone(
            list(split.train),
            variant_label="f1-toy",
            descriptor_dim=cfg.gan.descriptor_dim,
            image_size=cfg.gan.image_size,
            base_channels=cfg.gan.backbone_base_channels,
            epochs=cfg.gan.backbone_epochs,
            lr=cfg.gan.backbone_lr,
            seed=cfg.seed + 11,
            patience=cfg.gan.backbone_patience,
        )
        return extractor
    if not cfg.gan.f1_weights_manifest:
        raise ConfigError("backbone_variant requires gan.f1_weights_manifest")
    return _build_pretrained_backbone(cfg, cfg.gan.f1_weights_manifest, "generic")


def _make_f2(cfg: ExperimentConfig, split: DatasetSplit) -> FeatureExtractor:
    if cfg.gan.backbone_variant == "toy":
        extractor, _ = train_identity_backbone(
            list(split.train),
            variant_label="f2-toy-finetuned",
            descriptor_dim=cfg.gan.descriptor_dim,
            image_size=cfg.gan.image_size,
            base_channels=cfg.gan.backbone_base_channels,
            epochs=cfg.gan.backbone_epochs,
            lr=cfg.gan.backbone_lr,
            seed=cfg.seed + 13,
            patience=cfg.gan.backbone_patience,
        )
        return extractor
    if not cfg.gan.f2_weights_manifest:
        raise ConfigError("backbone_variant requires gan.f2_weights_manifest")
    return _build_pretrained_backbone(cfg, cfg.gan.f2_weights_manifest, "reid_finetuned")


def cmd_synth(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    root = paths["dataset"]
    root.mkdir(parents=True, exist_ok=True)
    write_toy_dataset(cfg.dataset.toy, root)
    _manifest(cfg, paths, "synth", inputs={}, outputs={"manifest.csv": root / "manifest.csv"})
    print(f"toy dataset written to {root}")
    return EXIT_OK


def cmd_cluster(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    poses = [s.pose for s in split.train if s.pose is not None]
    pose_set = derive_pose_set(poses, cfg.cluster)
    paths["out"].mkdir(parents=True, exist_ok=True)
    pose_set.save(paths["pose_set"])
    _manifest(cfg, paths, "cluster", inputs={"manifest.csv": paths["dataset"] / "manifest.csv"},
              outputs={"pose_set.json": paths["pose_set"]})
    print(f"derived {len(pose_set)} canonical poses -> {paths['pose_set']}")
    return EXIT_OK


def cmd_train_gan(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    paths["out"].mkdir(parents=True, exist_ok=True)
    f1 = _make_f1(cfg, split)
    save_extractor_checkpoint(paths["backbone_f1"], f1, meta={"config": cfg.to_dict()})
    aug = cfg.augment if cfg.gan.augment else None
    generator, discriminator, history = train_ptgan(
        split,
        f1,
        cfg.gan.train,
        aug=aug,
        image_size=cfg.gan.image_size,
        base_channels=cfg.gan.base_channels,
        residual_blocks=cfg.gan.residual_blocks,
        conditioning=cfg.gan.conditioning,
        checkpoint_dir=paths["out"] / "checkpoints",
    )
    save_gan_checkpoint(paths["gan"], generator, discriminator,
                        meta={"epoch": cfg.gan.train.epochs, "config": cfg.to_dict(), "rng": rng_state_meta()})
    with open(paths["gan_history"], "w", encoding="utf-8") as fh:
        json.dump(history, fh, sort_keys=True, indent=1)
    _manifest(cfg, paths, "train-gan", inputs={"manifest.csv": paths["dataset"] / "manifest.csv"},
              outputs={"gan.ckpt": paths["gan"], "backbone_f1.ckpt": paths["backbone_f1"]})
    print(f"pt-GAN trained for {cfg.gan.train.epochs} epochs -> {paths['gan']}")
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, image_path: str | None = None) -> int:
    paths = _paths(cfg)
    pose_set = PoseSet.load(_require_artifact(paths["pose_set"], "cluster"))
    generator, _, _ = load_gan_checkpoint(_require_artifact(paths["gan"], "train-gan"))
    f1 = _load_backbone(cfg, "f1", paths["backbone_f1"])
    if image_path is not None:
        from .datasets import load_image

        image = load_image(image_path)
    else:
        split = _load_split(cfg, paths)
        source = split.query[0] if split.query else split.train[0]
        image = source.image
    image = resize_bilinear(image, cfg.gan.image_size)
    desc = extract(f1, image)
    tiles = [image] + [generate(generator, desc, pose) for pose in pose_set.poses]
    grid = make_grid(tiles)
    save_image(paths["grid"], grid)
    _manifest(cfg, paths, "generate", inputs={"gan.ckpt": paths["gan"], "pose_set.json": paths["pose_set"]},
              outputs={"generated_grid.png": paths["grid"]})
    print(f"generated image grid -> {paths['grid']}")
    return EXIT_OK


def cmd_train_fusion(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    pose_set = PoseSet.load(_require_artifact(paths["pose_set"], "cluster"))
    if cfg.fusion.num_generated and cfg.fusion.num_generated != len(pose_set):
        raise ConfigError(
            f"fusion.num_generated ({cfg.fusion.num_generated}) does not match the pose set size ({len(pose_set)})"
        )
    generator, _, _ = load_gan_checkpoint(_require_artifact(paths["gan"], "train-gan"))
    f1 = _load_backbone(cfg, "f1", paths["backbone_f1"])
    f2 = _make_f2(cfg, split)
    save_extractor_checkpoint(paths["backbone_f2"], f2, meta={"config": cfg.to_dict()})
    fusion_aug = cfg.augment if cfg.fusion.augment else None
    net, history = train_fusion(split, generator, pose_set, f1, f2, cfg.fusion.train, augment_cfg=fusion_aug)
    save_fusion_checkpoint(paths["fusion"], net,
                           meta={"config": cfg.to_dict(), "rng": rng_state_meta()})
    with open(paths["fusion_history"], "w", encoding="utf-8") as fh:
        json.dump(history, fh, sort_keys=True, indent=1)
    _manifest(cfg, paths, "train-fusion",
              inputs={"gan.ckpt": paths["gan"], "pose_set.json": paths["pose_set"]},
              outputs={"fusion.ckpt": paths["fusion"], "backbone_f2.ckpt": paths["backbone_f2"]})
    print(f"fusion network trained -> {paths['fusion']}")
    return EXIT_OK


def _load_pipeline(cfg: ExperimentConfig, paths: dict[str, Path]) -> ReidPipeline:
    fusion_path = paths["fusion"]
    if not fusion_path.exists():
        raise MissingPrerequisiteError("missing fusion.ckpt: run train-fusion first")
    generator, _, _ = load_gan_checkpoint(_require_artifact(paths["gan"], "train-gan"))
    pose_set = PoseSet.load(_require_artifact(paths["pose_set"], "cluster"))
    f1 = _load_backbone(cfg, "f1", paths["backbone_f1"])
    f2 = _load_backbone(cfg, "f2", paths["backbone_f2"])
    net, _ = load_fusion_checkpoint(fusion_path)
    return ReidPipeline(f1=f1, f2=f2, generator=generator, pose_set=pose_set, fusion=net)


def cmd_index(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    pipeline = _load_pipeline(cfg, paths)
    for name, subset in (("gallery_matrix", split.gallery), ("query_matrix", split.query)):
        descs = np.stack([extract_fused(s.image, pipeline) for s in subset])
        save_descriptor_matrix(
            paths[name],
            descs,
            paths=[s.path for s in subset],
            identities=[s.identity for s in subset],
            cameras=[s.camera for s in subset],
            metric=cfg.eval.metric,
        )
    _manifest(cfg, paths, "index", inputs={"fusion.ckpt": paths["fusion"]},
              outputs={"descriptors_gallery.bin": paths["gallery_matrix"],
                       "descriptors_query.bin": paths["query_matrix"]})
    print(f"descriptor matrices -> {paths['gallery_matrix']}, {paths['query_matrix']}")
    return EXIT_OK


def _eval_options(cfg: ExperimentConfig) -> EvalOptions:
    return EvalOptions(
        metric=cfg.eval.metric,
        protocol=cfg.dataset.protocol if cfg.dataset.protocol != "toy" else "market1501",
        multi_query=cfg.eval.multi_query,
        use_rerank=cfg.eval.rerank,
        rerank_k1=cfg.eval.rerank_k1,
        rerank_k2=cfg.eval.rerank_k2,
        rerank_lambda=cfg.eval.rerank_lambda,
        max_rank=cfg.eval.max_rank,
        descriptor_source=cfg.eval.descriptor_source,
    )


def _write_plots(report, paths: dict[str, Path]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = np.arange(1, len(report.cmc) + 1)
    ax.plot(ranks, report.cmc, marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Cumulative matching curve")
    fig.tight_layout()
    fig.savefig(paths["cmc_plot"], metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(["intra", "inter"], [report.intra_mean, report.inter_mean], color=["tab:blue", "tab:orange"])
    ax.set_ylabel("mean feature distance (x1e3)")
    ax.set_title("Class distance study")
    fig.tight_layout()
    fig.savefig(paths["distance_plot"], metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: ExperimentConfig) -> int:
    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    pipeline = _load_pipeline(cfg, paths)
    report = evaluate(split, pipeline, _eval_options(cfg))
    paths["out"].mkdir(parents=True, exist_ok=True)
    with open(paths["report_json"], "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=1)
    with open(paths["report_txt"], "w", encoding="utf-8") as fh:
        fh.write(report.format_table() + "\n")
    _write_plots(report, paths)
    _manifest(cfg, paths, "eval", inputs={"fusion.ckpt": paths["fusion"]},
              outputs={"report.json": paths["report_json"]})
    print(report.format_table())
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig) -> int:
    """Run the 16-cell clustering ablation grid and collect rank-1/mAP."""
    import csv as csv_mod
    import dataclasses

    paths = _paths(cfg)
    split = _load_split(cfg, paths)
    generator, _, _ = load_gan_checkpoint(_require_artifact(paths["gan"], "train-gan"))
    f1 = _load_backbone(cfg, "f1", paths["backbone_f1"])
    f2 = _load_backbone(cfg, "f2", paths["backbone_f2"])
    train_poses = [s.pose for s in split.train if s.pose is not None]
    rows = []
    for mode, method, k in ABLATION_GRID:
        cell = f"{mode}-{method}-{k}"
        cluster_cfg = dataclasses.replace(cfg.cluster, mode=mode, method=method, num_poses=k)
        pose_set = derive_pose_set(train_poses, cluster_cfg)
        net, _ = train_fusion(split, generator, pose_set, f1, f2, cfg.fusion.train)
        pipeline = ReidPipeline(f1=f1, f2=f2, generator=generator, pose_set=pose_set, fusion=net)
        report = evaluate(split, pipeline, _eval_options(cfg))
        rows.append({"method": method, "mode": mode, "K": k, "rank1": f"{report.rank1:.4f}", "mAP": f"{report.map:.4f}"})
        log.info("ablation cell %s: rank1 %.4f mAP %.4f", cell, report.rank1, report.map)
    with open(paths["ablation"], "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.DictWriter(fh, fieldnames=["method", "mode", "K", "rank1", "mAP"])
        writer.writeheader()
        writer.writerows(rows)
    _manifest(cfg, paths, "ablate", inputs={"gan.ckpt": paths["gan"]}, outputs={"ablation.csv": paths["ablation"]})
    print(f"ablation grid ({len(rows)} cells) -> {paths['ablation']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "train-fusion": cmd_train_fusion,
    "index": cmd_index,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptreid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ptreid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry, e.g. cluster.method=kmeans")
        p.add_argument("--output-dir", type=str, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            p.add_argument("--image", type=str, default=None, help="source image (defaults to the first query)")
        if name == "cluster":
            p.add_argument("--method", choices=["kmeans", "gmm"], default=None)
            p.add_argument("--mode", choices=["fullbody", "bodyjoint"], default=None)
            p.add_argument("--num-poses", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        if args.command == "cluster":
            for flag, key in (("method", "cluster.method"), ("mode", "cluster.mode"),
                              ("num_poses", "cluster.num_poses"), ("seed", "cluster.seed")):
                value = getattr(args, flag)
                if value is not None:
                    overrides.append(f"{key}={value}")
        cfg = load_config(args.config, overrides)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(max(1, cfg.threads))
    try:
        if args.command == "generate":
            return cmd_generate(cfg, image_path=args.image)
        return COMMANDS[args.command](cfg)
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
