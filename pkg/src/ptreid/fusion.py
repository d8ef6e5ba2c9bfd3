"""Fusion of the source descriptor with the generated-view descriptors.

The fusion network concatenates the source descriptor with the N
generated-image descriptors, passes them through two fully connected layers
(batch-normalized, with dropout at train time), adds the raw source
descriptor back, and applies a final dense layer that itself carries a
residual bypass. Zeroing the learned path therefore reduces the network to
the identity on the source descriptor. Training appends an identity
classification head that is discarded at inference; the re-ID feature is
the activation feeding that head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoints import load_checkpoint, module_state_numpy, save_checkpoint
from .clustering import PoseSet
from .datasets import DatasetSplit, Sample
from .imageops import resize_bilinear
from .losses import classification_loss
from .networks import (
    FeatureExtractor,
    Generator,
    encode_pose,
    extract_batch,
    image_to_tensor,
    kaiming_init,
)
from .training import _check_finite, _prepare_image, _stratified_holdout, identity_label_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 40
    patience: int = 10
    val_fraction: float = 0.1
    dropout: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.patience < 1 or self.epochs < 1:
            raise ValueError("patience and epochs must be >= 1")


class FusionNet(nn.Module):
    """Residual fully connected fusion of (N + 1) descriptors into one."""

    def __init__(self, num_generated: int, descriptor_dim: int, dropout: float = 0.6):
        super().__init__()
        if num_generated < 1:
            raise ValueError("num_generated must be >= 1")
        self.num_generated = num_generated
        self.descriptor_dim = descriptor_dim
        d = descriptor_dim
        self.fc_1 = nn.Linear((num_generated + 1) * d, 4 * d)
        self.bn_1 = nn.BatchNorm1d(4 * d)
        self.fc_2 = nn.Linear(4 * d, d)
        self.bn_2 = nn.BatchNorm1d(d)
        self.output = nn.Linear(d, d)
        self.act = nn.ReLU()
        self.drop = nn.Dropout(dropout)
        kaiming_init(self)

    def forward(self, source: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        """source: (B, D); generated: (B, N, D) ordered by pose-set index."""
        if source.dim() != 2 or source.shape[1] != self.descriptor_dim:
            raise ValueError(f"expected (B, {self.descriptor_dim}) source descriptors, got {tuple(source.shape)}")
        if (
            generated.dim() != 3
            or generated.shape[0] != source.shape[0]
            or generated.shape[1] != self.num_generated
            or generated.shape[2] != self.descriptor_dim
        ):
            raise ValueError(
                f"expected (B, {self.num_generated}, {self.descriptor_dim}) generated descriptors, "
                f"got {tuple(generated.shape)}"
            )
        x = torch.cat([source, generated.reshape(source.shape[0], -1)], dim=1)
        h = self.drop(self.act(self.bn_1(self.fc_1(x))))
        h = self.drop(self.act(self.bn_2(self.fc_2(h))))
        skip = h + source
        return skip + self.output(skip)

    def zero_learned_path_(self) -> None:
        """Zero every layer on the non-skip path; forward becomes the identity on source."""
        with torch.no_grad():
            self.fc_2.weight.zero_()
            self.fc_2.bias.zero_()
            self.output.weight.zero_()
            self.output.bias.zero_()


def fusion_parameter_counts(num_generated: int, descriptor_dim: int) -> dict[str, int]:
    n, d = num_generated, descriptor_dim
    return {
        "fc_1": (n + 1) * d * 4 * d + 4 * d,
        "fc_2": 4 * d * d + d,
        "output": d * d + d,
    }


def fuse(net: FusionNet, source: np.ndarray, generated: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Inference-mode fusion of one source descriptor with its N generated descriptors."""
    src = np.asarray(source, dtype=np.float64)
    gen = np.asarray(generated, dtype=np.float64)
    if src.shape != (net.descriptor_dim,):
        raise ValueError(f"source descriptor must have length {net.descriptor_dim}")
    if gen.shape != (net.num_generated, net.descriptor_dim):
        raise ValueError(f"expected {net.num_generated} generated descriptors of length {net.descriptor_dim}, got {gen.shape}")
    dtype = net.fc_1.weight.dtype
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(
            torch.from_numpy(src).to(dtype).unsqueeze(0),
            torch.from_numpy(gen).to(dtype).unsqueeze(0),
        )[0]
    net.train(was_training)
    return out.cpu().numpy().astype(np.float64)


@dataclass
class ReidPipeline:
    """All frozen components needed to compute re-ID descriptors."""

    f1: FeatureExtractor | None = None
    f2: FeatureExtractor | None = None
    generator: Generator | None = None
    pose_set: PoseSet | None = None
    fusion: FusionNet | None = None

    def _require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ValueError(f"pipeline is missing component {name!r}")

    @property
    def image_size(self) -> tuple[int, int]:
        self._require("f1")
        return self.f1.input_size

    def source_descriptor(self, image: np.ndarray) -> np.ndarray:
        self._require("f1")
        return extract_batch(self.f1, [image])[0]

    def backbone_descriptor(self, image: np.ndarray) -> np.ndarray:
        self._require("f2")
        return extract_batch(self.f2, [image])[0]

    def generated_descriptors(self, source_desc: np.ndarray) -> np.ndarray:
        self._require("generator", "pose_set", "f2")
        images = _generate_views(self.generator, source_desc, self.pose_set)
        return extract_batch(self.f2, images)


def _generate_views(generator: Generator, source_desc: np.ndarray, pose_set: PoseSet) -> list[np.ndarray]:
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        d = torch.from_numpy(np.asarray(source_desc, dtype=np.float32)).unsqueeze(0)
        d = d.repeat(len(pose_set), 1)
        poses = torch.stack([torch.from_numpy(encode_pose(p).astype(np.float32)) for p in pose_set.poses])
        out = generator(d, poses)
    generator.train(was_training)
    return [np.transpose(img.numpy(), (1, 2, 0)).astype(np.float64) for img in out]


def extract_fused(image: np.ndarray, pipeline: ReidPipeline) -> np.ndarray:
    """Run the full chain: encode, synthesize every canonical pose, fuse."""
    pipeline._require("f1", "f2", "generator", "pose_set", "fusion")
    if image.shape[:2] != pipeline.image_size:
        image = resize_bilinear(image, pipeline.image_size)
    src = pipeline.source_descriptor(image)
    gen = pipeline.generated_descriptors(src)
    return fuse(pipeline.fusion, src, gen)


def _fusion_inputs(
    samples: list[Sample],
    pipeline: ReidPipeline,
    image_size: tuple[int, int],
    augment_cfg=None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    from .augment import augment_image

    sources = []
    generated = []
    for s in samples:
        img = _prepare_image(s, image_size)
        if augment_cfg is not None:
            img = augment_image(img, augment_cfg, rng)
        src = pipeline.source_descriptor(img)
        sources.append(src)
        generated.append(pipeline.generated_descriptors(src))
    return np.stack(sources), np.stack(generated)


def train_fusion(
    split: DatasetSplit,
    generator: Generator,
    pose_set: PoseSet,
    f1: FeatureExtractor,
    f2: FeatureExtractor,
    cfg: FusionTrainConfig,
    augment_cfg=None,
) -> tuple[FusionNet, dict[str, list[float]]]:
    """Train the fusion network on identity classification, everything else frozen.

    Descriptors are precomputed once (the generator, pose set and backbones
    never change during this stage); with augment_cfg set they are instead
    recomputed every epoch from freshly augmented source images. Early
    stopping restores the weights of the best validation-accuracy epoch.
    """
    torch.manual_seed(cfg.seed + 2)
    rng = np.random.default_rng([cfg.seed, 0xF5])
    samples = list(split.train)
    label_map = identity_label_map(samples)
    image_size = f1.input_size

    for module in (generator, f1, f2):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    helper = ReidPipeline(f1=f1, f2=f2, generator=generator, pose_set=pose_set)
    sources_np, generated_np = _fusion_inputs(samples, helper, image_size)
    clean_sources = torch.from_numpy(sources_np.astype(np.float32))
    clean_generated = torch.from_numpy(generated_np.astype(np.float32))
    sources, generated = clean_sources, clean_generated
    labels = torch.tensor([label_map[s.identity] for s in samples], dtype=torch.long)

    net = FusionNet(num_generated=len(pose_set), descriptor_dim=f1.descriptor_dim, dropout=cfg.dropout)
    head = nn.Linear(f1.descriptor_dim, len(label_map))
    torch.nn.init.kaiming_normal_(head.weight, a=0.2, nonlinearity="leaky_relu")
    torch.nn.init.zeros_(head.bias)

    opt = torch.optim.Adam(
        list(net.parameters()) + list(head.parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    train_idx, val_idx = _stratified_holdout(samples, cfg.val_fraction, rng)
    if not val_idx:
        val_idx = train_idx

    history: dict[str, list[float]] = {"train_loss": [], "train_acc": [], "val_acc": []}
    best_acc = -1.0
    best_state: dict[str, np.ndarray] | None = None
    stale = 0

    for epoch in range(cfg.epochs):
        if augment_cfg is not None:
            aug_src, aug_gen = _fusion_inputs(samples, helper, image_size, augment_cfg, rng)
            sources = torch.from_numpy(aug_src.astype(np.float32))
            generated = torch.from_numpy(aug_gen.astype(np.float32))
        net.train()
        order = rng.permutation(len(train_idx))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = [train_idx[i] for i in order[start : start + cfg.batch_size]]
            if len(idx) < 2:  # batch norm needs more than one row
                continue
            logits = head(net(sources[idx], generated[idx]))
            loss = classification_loss(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(dim=1) == labels[idx]).sum())
        history["train_loss"].append(total_loss / len(train_idx))
        history["train_acc"].append(correct / len(train_idx))
        _check_finite(history["train_loss"][-1])

        net.eval()
        with torch.no_grad():
            val_logits = head(net(clean_sources[val_idx], clean_generated[val_idx]))
            val_acc = float((val_logits.argmax(dim=1) == labels[val_idx]).float().mean())
        history["val_acc"].append(val_acc)
        log.info("fusion epoch %d/%d: loss %.4f acc %.3f val %.3f", epoch + 1, cfg.epochs,
                 history["train_loss"][-1], history["train_acc"][-1], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = module_state_numpy(net)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("fusion: early stop at epoch %d (best val acc %.3f)", epoch + 1, best_acc)
                break

    if best_state is not None:
        net.load_state_dict({k: torch.from_numpy(v) for k, v in best_state.items()})
    net.eval()
    return net, history


def save_fusion_checkpoint(path: str | Path, net: FusionNet, meta: dict | None = None) -> None:
    full_meta = dict(meta or {})
    full_meta["arch"] = {
        "num_generated": net.num_generated,
        "descriptor_dim": net.descriptor_dim,
        "dropout": float(net.drop.p),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, kind="fusion", tensors=module_state_numpy(net), meta=full_meta)


def load_fusion_checkpoint(path: str | Path) -> tuple[FusionNet, dict]:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "fusion":
        raise ValueError(f"{path}: expected a fusion checkpoint, got kind {kind!r}")
    arch = meta["arch"]
    net = FusionNet(
        num_generated=int(arch["num_generated"]),
        descriptor_dim=int(arch["descriptor_dim"]),
        dropout=float(arch["dropout"]),
    )
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    net.eval()
    return net, meta


def load_extractor_checkpoint(path: str | Path) -> tuple[FeatureExtractor, dict]:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "extractor":
        raise ValueError(f"{path}: expected an extractor checkpoint, got kind {kind!r}")
    arch = meta["arch"]
    extractor = FeatureExtractor(
        variant=arch["variant"],
        descriptor_dim=int(arch["descriptor_dim"]),
        input_size=tuple(arch["input_size"]),
        base_channels=int(arch.get("base_channels", 32)),
        provenance=arch.get("provenance", "checkpoint"),
    )
    extractor.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    extractor.eval()
    return extractor, meta


def load_gan_checkpoint(path: str | Path) -> tuple[Generator, "Discriminator", dict]:
    from .networks import Discriminator

    kind, tensors, meta = load_checkpoint(path)
    if kind != "ptgan":
        raise ValueError(f"{path}: expected a ptgan checkpoint, got kind {kind!r}")
    arch = meta["arch"]
    generator = Generator(
        descriptor_dim=int(arch["descriptor_dim"]),
        image_size=tuple(arch["image_size"]),
        base_channels=int(arch["base_channels"]),
        residual_blocks=int(arch["residual_blocks"]),
        conditioning=arch.get("conditioning", "vector"),
    )
    discriminator = Discriminator(
        num_classes=int(arch["num_classes"]),
        image_size=tuple(arch["image_size"]),
        base_channels=int(arch["disc_base_channels"]),
    )
    gen_state = {k[len("generator.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("generator.")}
    disc_state = {
        k[len("discriminator.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("discriminator.")
    }
    generator.load_state_dict(gen_state)
    discriminator.load_state_dict(disc_state)
    generator.eval()
    discriminator.eval()
    return generator, discriminator, meta
