"""Training loops: the pose-transformation GAN and identity backbones.

All sampling (pairs, augmentation, label smoothing noise) flows from one
seeded numpy generator and weight init from torch's seeded global RNG, so a
fixed seed reproduces the loss history exactly in single-threaded mode. The
source-image backbone stays frozen throughout GAN training.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict as dataclasses_asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_image
from .checkpoints import module_state_numpy, rng_state_meta, save_checkpoint
from .datasets import DatasetSplit, PoseVector, Sample
from .imageops import resize_bilinear
from .losses import (
    GanLossParts,
    GanLossWeights,
    adversarial_loss,
    classification_loss,
    generator_adversarial_loss,
    l2_loss,
    smoothed_real_loss,
    total_gan_loss,
)
from .networks import Discriminator, FeatureExtractor, Generator, encode_pose, image_to_tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class GanTrainConfig:
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 30
    label_smooth_noise: float = 0.1
    seed: int = 0
    checkpoint_every: int = 10
    non_saturating: bool = False
    loss_weights: GanLossWeights = field(default_factory=GanLossWeights)

    def __post_init__(self) -> None:
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not (0.0 <= self.label_smooth_noise <= 1.0):
            raise ValueError("label_smooth_noise must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class TrainingPair:
    source: Sample
    target: Sample
    target_pose: PoseVector
    identity: int


def _posed_by_identity(samples: tuple[Sample, ...] | list[Sample]) -> dict[int, list[Sample]]:
    """Group samples that carry a pose by identity; log the excluded count."""
    posed: dict[int, list[Sample]] = {}
    skipped = 0
    for s in samples:
        if s.pose is None:
            skipped += 1
            continue
        posed.setdefault(s.identity, []).append(s)
    if skipped:
        log.info("excluded %d samples without a detected pose from pair construction", skipped)
    return posed


def make_training_pairs(split: DatasetSplit, rng: np.random.Generator | None = None):
    """Infinite stream of same-identity (source, target) pairs with the target pose.

    Identities are drawn uniformly among those with at least two posed
    images, then an ordered pair of distinct images uniformly within the
    identity.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    posed = _posed_by_identity(split.train)
    eligible = sorted(identity for identity, group in posed.items() if len(group) >= 2)
    if not eligible:
        raise ValueError("no identity has two or more posed samples")
    while True:
        identity = eligible[int(rng.integers(len(eligible)))]
        group = posed[identity]
        i = int(rng.integers(len(group)))
        j = int(rng.integers(len(group) - 1))
        if j >= i:
            j += 1
        target = group[j]
        assert target.pose is not None
        yield TrainingPair(source=group[i], target=target, target_pose=target.pose, identity=identity)


def identity_label_map(samples) -> dict[int, int]:
    return {identity: idx for idx, identity in enumerate(sorted({s.identity for s in samples}))}


def _prepare_image(sample: Sample, image_size: tuple[int, int]) -> np.ndarray:
    img = sample.image
    if img.shape[:2] != tuple(image_size):
        img = resize_bilinear(img, image_size)
    return img


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise DivergenceError("training loss became non-finite")


def train_ptgan(
    split: DatasetSplit,
    extractor: FeatureExtractor,
    cfg: GanTrainConfig,
    aug: AugmentConfig | None = None,
    image_size: tuple[int, int] = (128, 64),
    base_channels: int = 32,
    residual_blocks: int = 6,
    conditioning: str = "vector",
    steps_per_epoch: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[Generator, Discriminator, dict[str, list[float]]]:
    """Alternating discriminator/generator training on same-identity pose pairs.

    The source image (optionally augmented) is encoded by the frozen
    extractor; the generator renders it in the target pose and is scored on
    adversarial, reconstruction and identity terms. Real labels for the
    discriminator are smoothed by uniform noise. Returns the trained
    networks and the per-epoch mean of each loss component.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x6A4])
    label_map = identity_label_map(split.train)
    num_classes = len(label_map)

    generator = Generator(
        descriptor_dim=extractor.descriptor_dim,
        image_size=image_size,
        base_channels=base_channels,
        residual_blocks=residual_blocks,
        conditioning=conditioning,
    )
    discriminator = Discriminator(num_classes=num_classes, image_size=image_size, base_channels=base_channels)

    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)

    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))

    pairs = make_training_pairs(split, rng)
    n_posed = sum(1 for s in split.train if s.pose is not None)
    steps = steps_per_epoch if steps_per_epoch is not None else max(1, math.ceil(n_posed / cfg.batch_size))

    history: dict[str, list[float]] = {k: [] for k in ("disc", "gen", "adv", "l2", "cls_real", "cls_fake")}
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    for epoch in range(cfg.epochs):
        sums = {k: 0.0 for k in history}
        generator.train()
        discriminator.train()
        for _ in range(steps):
            batch = [next(pairs) for _ in range(cfg.batch_size)]
            sources = []
            for pair in batch:
                img = _prepare_image(pair.source, image_size)
                if aug is not None:
                    img = augment_image(img, aug, rng)
                sources.append(image_to_tensor(img))
            source_t = torch.stack(sources)
            target_t = torch.stack([image_to_tensor(_prepare_image(p.target, image_size)) for p in batch])
            pose_t = torch.stack(
                [torch.from_numpy(encode_pose(p.target_pose).astype(np.float32)) for p in batch]
            )
            labels = torch.tensor([label_map[p.identity] for p in batch], dtype=torch.long)

            with torch.no_grad():
                desc = extractor(source_t)

            # discriminator step
            fake = generator(desc, pose_t)
            d_real, logits_real = discriminator(target_t)
            d_fake_detached, _ = discriminator(fake.detach())
            smooth = torch.from_numpy(
                (1.0 - rng.uniform(0.0, cfg.label_smooth_noise, size=len(batch))).astype(np.float32)
            )
            adv_value = -(smoothed_real_loss(d_real, smooth) + smoothed_real_loss(d_fake_detached, torch.zeros(len(batch))))
            cls_real = classification_loss(logits_real, labels)
            _, disc_loss = total_gan_loss(
                GanLossParts(adversarial=adv_value, classification_real=cls_real), cfg.loss_weights
            )
            opt_d.zero_grad()
            disc_loss.backward()
            opt_d.step()

            # generator step
            d_fake, logits_fake = discriminator(fake)
            gen_adv = generator_adversarial_loss(d_fake, non_saturating=cfg.non_saturating)
            recon = l2_loss(target_t, fake)
            cls_fake = classification_loss(logits_fake, labels)
            gen_loss, _ = total_gan_loss(
                GanLossParts(generator_adversarial=gen_adv, l2=recon, classification_generated=cls_fake),
                cfg.loss_weights,
            )
            opt_g.zero_grad()
            gen_loss.backward()
            opt_g.step()

            sums["disc"] += float(disc_loss.detach())
            sums["gen"] += float(gen_loss.detach())
            sums["adv"] += float(adversarial_loss(d_real.detach(), d_fake.detach()))
            sums["l2"] += float(recon.detach())
            sums["cls_real"] += float(cls_real.detach())
            sums["cls_fake"] += float(cls_fake.detach())

        for key, total in sums.items():
            history[key].append(total / steps)
        _check_finite(*(history[key][-1] for key in history))
        log.info(
            "gan epoch %d/%d: disc %.4f gen %.4f l2 %.4f",
            epoch + 1,
            cfg.epochs,
            history["disc"][-1],
            history["gen"][-1],
            history["l2"][-1],
        )
        if checkpoint_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            save_gan_checkpoint(
                checkpoint_dir / f"gan_epoch{epoch + 1:04d}.ckpt",
                generator,
                discriminator,
                meta={
                    "epoch": epoch + 1,
                    "label_map": {str(k): v for k, v in label_map.items()},
                    "config": dataclasses_asdict(cfg),
                    "rng": rng_state_meta(rng),
                },
            )

    return generator, discriminator, history


def gan_arch_meta(generator: Generator, discriminator: Discriminator) -> dict:
    return {
        "descriptor_dim": generator.descriptor_dim,
        "image_size": list(generator.image_size),
        "conditioning": generator.conditioning,
        "residual_blocks": len(generator.blocks),
        "base_channels": generator.to_rgb.in_channels,
        "num_classes": discriminator.num_classes,
        "disc_base_channels": discriminator.head_adv.in_features // 4,
    }


def save_gan_checkpoint(path: str | Path, generator: Generator, discriminator: Discriminator, meta: dict | None = None) -> None:
    tensors = {f"generator.{k}": v for k, v in module_state_numpy(generator).items()}
    tensors.update({f"discriminator.{k}": v for k, v in module_state_numpy(discriminator).items()})
    full_meta = dict(meta or {})
    full_meta["arch"] = gan_arch_meta(generator, discriminator)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, kind="ptgan", tensors=tensors, meta=full_meta)


def _stratified_holdout(samples: list[Sample], fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Per-identity holdout of ~fraction of the images; returns (train_idx, val_idx)."""
    by_identity: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_identity.setdefault(s.identity, []).append(idx)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for identity in sorted(by_identity):
        idxs = by_identity[identity]
        perm = [idxs[i] for i in rng.permutation(len(idxs))]
        n_val = int(round(fraction * len(perm)))
        n_val = min(n_val, len(perm) - 1)
        val_idx.extend(perm[:n_val])
        train_idx.extend(perm[n_val:])
    return sorted(train_idx), sorted(val_idx)


def train_identity_backbone(
    samples: list[Sample] | tuple[Sample, ...],
    variant_label: str,
    descriptor_dim: int = 64,
    image_size: tuple[int, int] = (64, 32),
    base_channels: int = 32,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    val_fraction: float = 0.1,
    patience: int = 5,
) -> tuple[FeatureExtractor, dict[str, list[float]]]:
    """Train a toy backbone as an identity classifier; keep the best-validation weights.

    Early stopping halts after `patience` epochs without a strict validation
    accuracy improvement.
    """
    torch.manual_seed(seed + 1)
    rng = np.random.default_rng([seed, 0xB0])
    samples = list(samples)
    label_map = identity_label_map(samples)
    extractor = FeatureExtractor(
        variant="toy",
        descriptor_dim=descriptor_dim,
        input_size=image_size,
        base_channels=base_channels,
        provenance=variant_label,
    )
    head = torch.nn.Linear(descriptor_dim, len(label_map))
    torch.nn.init.kaiming_normal_(head.weight, a=0.2, nonlinearity="leaky_relu")
    torch.nn.init.zeros_(head.bias)

    images = torch.stack([image_to_tensor(_prepare_image(s, image_size)) for s in samples])
    labels = torch.tensor([label_map[s.identity] for s in samples], dtype=torch.long)
    train_idx, val_idx = _stratified_holdout(samples, val_fraction, rng)
    if not val_idx:
        val_idx = train_idx

    params = list(extractor.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history: dict[str, list[float]] = {"train_loss": [], "val_acc": []}
    best_acc = -1.0
    best_state: dict[str, np.ndarray] | None = None
    stale = 0

    for epoch in range(epochs):
        extractor.train()
        order = rng.permutation(len(train_idx))
        total = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = [train_idx[i] for i in order[start : start + batch_size]]
            logits = head(extractor(images[idx]))
            loss = classification_loss(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n_batches += 1
        history["train_loss"].append(total / max(n_batches, 1))
        _check_finite(history["train_loss"][-1])

        extractor.eval()
        with torch.no_grad():
            val_logits = head(extractor(images[val_idx]))
            val_acc = float((val_logits.argmax(dim=1) == labels[val_idx]).float().mean())
        history["val_acc"].append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = module_state_numpy(extractor)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                log.info("backbone %s: early stop at epoch %d (best val acc %.3f)", variant_label, epoch + 1, best_acc)
                break

    if best_state is not None:
        state = {k: torch.from_numpy(v) for k, v in best_state.items()}
        extractor.load_state_dict(state)
    extractor.eval()
    return extractor, history


def save_extractor_checkpoint(path: str | Path, extractor: FeatureExtractor, meta: dict | None = None) -> None:
    full_meta = dict(meta or {})
    full_meta["arch"] = {
        "variant": extractor.variant,
        "descriptor_dim": extractor.descriptor_dim,
        "input_size": list(extractor.input_size),
        "base_channels": extractor.base_channels,
        "provenance": extractor.provenance,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, kind="extractor", tensors=module_state_numpy(extractor), meta=full_meta)
