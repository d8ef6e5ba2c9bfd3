"""Training objectives for the pose-transformation GAN and the fusion network.

Conventions: the adversarial value is the quantity the discriminator ascends
(mean log d_real + log(1 - d_fake)); the generator descends on the fooling
term, either the saturating log(1 - d_fake) or the non-saturating
-log(d_fake) variant. The reconstruction term is the batch mean of the L2
*norm* of the residual (not the mean squared error).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7


def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if value.is_floating_point() else value.double()
    if isinstance(value, (float, int)):
        # python scalars carry no dtype intent: use full precision
        return torch.as_tensor(value, dtype=torch.float64)
    t = torch.as_tensor(value)
    return t.double() if not t.is_floating_point() else t


def adversarial_loss(d_real, d_fake, eps: float = PROB_EPS) -> torch.Tensor:
    """Discriminator-ascent value: mean over the batch of log(d_real) + log(1 - d_fake)."""
    real = torch.clamp(_as_tensor(d_real), eps, 1.0 - eps)
    fake = torch.clamp(_as_tensor(d_fake), eps, 1.0 - eps)
    if real.shape != fake.shape:
        raise ValueError(f"probability shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    return (torch.log(real) + torch.log(1.0 - fake)).mean()


def generator_adversarial_loss(d_fake, non_saturating: bool = False, eps: float = PROB_EPS) -> torch.Tensor:
    """Fooling term the generator minimizes."""
    fake = torch.clamp(_as_tensor(d_fake), eps, 1.0 - eps)
    if non_saturating:
        return -torch.log(fake).mean()
    return torch.log(1.0 - fake).mean()


def smoothed_real_loss(d_real, targets, eps: float = PROB_EPS) -> torch.Tensor:
    """Binary cross-entropy of real predictions against noise-smoothed labels."""
    real = torch.clamp(_as_tensor(d_real), eps, 1.0 - eps)
    t = _as_tensor(targets).to(real.dtype)
    if real.shape != t.shape:
        raise ValueError("prediction/target shapes differ")
    return -(t * torch.log(real) + (1.0 - t) * torch.log(1.0 - real)).mean()


def l2_loss(target, generated) -> torch.Tensor:
    """Batch mean of the L2 norm of the elementwise difference.

    Inputs are (B, ...) batches; non-batched inputs are treated as a batch
    of one. Identical inputs give exactly 0.
    """
    t = _as_tensor(target)
    g = _as_tensor(generated)
    if t.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(g.shape)}")
    if t.dim() == 0:
        raise ValueError("l2_loss needs at least one dimension")
    diff = (t - g).reshape(t.shape[0], -1) if t.dim() > 1 else (t - g).reshape(1, -1)
    return torch.linalg.vector_norm(diff, dim=1).mean()


def classification_loss(logits, labels, reduction: str = "mean") -> torch.Tensor:
    """Categorical cross-entropy on raw logits.

    reduction="mean" averages over the batch; "sum" accumulates over samples.
    """
    lg = _as_tensor(logits)
    if lg.dim() == 1:
        lg = lg.unsqueeze(0)
    y = torch.as_tensor(labels, dtype=torch.long)
    if y.dim() == 0:
        y = y.unsqueeze(0)
    if y.shape[0] != lg.shape[0]:
        raise ValueError("batch size mismatch between logits and labels")
    num_classes = lg.shape[1]
    if torch.any(y < 0) or torch.any(y >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    log_probs = torch.log_softmax(lg, dim=1)
    picked = log_probs.gather(1, y.unsqueeze(1)).squeeze(1)
    if reduction == "mean":
        return -picked.mean()
    if reduction == "sum":
        return -picked.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class GanLossWeights:
    adversarial: float = 1.0
    l2: float = 1.0
    classification: float = 1.0


@dataclass
class GanLossParts:
    """Per-batch loss components feeding the combined objectives.

    adversarial: discriminator-ascent value (real/fake terms).
    generator_adversarial: fooling term the generator minimizes.
    l2: reconstruction norm. classification_real: identity loss on real
    images. classification_generated: identity loss on generated images
    against the source identity.
    """

    adversarial: torch.Tensor | float = 0.0
    generator_adversarial: torch.Tensor | float = 0.0
    l2: torch.Tensor | float = 0.0
    classification_real: torch.Tensor | float = 0.0
    classification_generated: torch.Tensor | float = 0.0


def total_gan_loss(parts: GanLossParts, weights: GanLossWeights = GanLossWeights()) -> tuple[torch.Tensor, torch.Tensor]:
    """Combine the parts into (generator_loss, discriminator_loss).

    The discriminator descends on the negated adversarial value plus the
    identity loss on real images; the generator descends on the fooling
    term plus reconstruction and the identity loss on generated images.
    Both are linear in the configured weights.
    """
    gen = (
        weights.adversarial * _as_tensor(parts.generator_adversarial)
        + weights.l2 * _as_tensor(parts.l2)
        + weights.classification * _as_tensor(parts.classification_generated)
    )
    disc = -weights.adversarial * _as_tensor(parts.adversarial) + weights.classification * _as_tensor(
        parts.classification_real
    )
    return gen, disc
