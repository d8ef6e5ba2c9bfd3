"""Backbone feature extractors and the pose-conditioned generator/discriminator.

The generator consumes a source-image descriptor concatenated with a 50-dim
target pose encoding and renders a fixed-size image through residual blocks
and transposed-convolution upsampling, with a bounded (sigmoid) output. The
discriminator has a shared convolutional trunk with two heads: a real/fake
probability and identity-class logits. All trainable blocks use LeakyReLU
activations and Kaiming-normal initialization.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .datasets import PoseVector
from .imageops import resize_bilinear

POSE_ENCODING_DIM = 50
LEAKY_SLOPE = 0.2
PROB_CLAMP = 1e-7

EXTRACTOR_VARIANTS = ("toy", "generic", "reid_finetuned")


def kaiming_init(module: nn.Module) -> None:
    """Kaiming-normal weight init for conv/linear layers; zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def encode_pose(pose: PoseVector) -> np.ndarray:
    """Flatten a pose to the generator's 50-dim conditioning vector.

    Missing joints are encoded as (0, 0); confidences are dropped.
    """
    xy = pose.xy.copy()
    xy[~pose.present] = 0.0
    return xy.reshape(-1).astype(np.float64)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 float array in [0, 1] -> (3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype=np.float32)
    return torch.from_numpy(arr)


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    arr = tensor.detach().cpu().numpy()
    return np.ascontiguousarray(np.transpose(arr, (1, 2, 0)))


class ToyTrunk(nn.Module):
    """Small convolutional trunk trained from scratch for desk-scale runs."""

    def __init__(self, descriptor_dim: int, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(2 * c, descriptor_dim, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return h.mean(dim=(2, 3))  # global average pooling


def _resnet50_trunk() -> nn.Module:
    from torchvision.models import resnet50

    class ResnetTrunk(nn.Module):
        def __init__(self) -> None:
            super().__init__()
            net = resnet50(weights=None)
            self.body = nn.Sequential(*list(net.children())[:-1])  # up to global pool

        def forward(self, x: torch.Tensor) -> torch.Tensor:
            return self.body(x).flatten(1)

    return ResnetTrunk()


class FeatureExtractor(nn.Module):
    """Descriptor extractor contract: deterministic, fixed-length output."""

    def __init__(
        self,
        variant: str,
        descriptor_dim: int,
        input_size: tuple[int, int],
        base_channels: int = 32,
        provenance: str = "random-init",
    ):
        super().__init__()
        if variant not in EXTRACTOR_VARIANTS:
            raise ValueError(f"unknown extractor variant {variant!r}")
        if variant in ("generic", "reid_finetuned") and descriptor_dim != 2048:
            raise ValueError(f"variant {variant!r} produces 2048-dim descriptors")
        self.variant = variant
        self.descriptor_dim = descriptor_dim
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.base_channels = base_channels
        self.provenance = provenance
        self.trunk = ToyTrunk(descriptor_dim, base_channels) if variant == "toy" else _resnet50_trunk()
        kaiming_init(self)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        if tuple(images.shape[2:]) != self.input_size:
            raise ValueError(f"expected {self.input_size} images, got {tuple(images.shape[2:])}")
        return self.trunk(images)


def extract(extractor: FeatureExtractor, image: np.ndarray) -> np.ndarray:
    """Descriptor of one image; the image must already match the expected shape."""
    if image.shape[:2] != extractor.input_size:
        raise ValueError(f"image shape {image.shape[:2]} does not match extractor input {extractor.input_size}")
    was_training = extractor.training
    extractor.eval()
    with torch.no_grad():
        desc = extractor(image_to_tensor(image).unsqueeze(0))[0]
    extractor.train(was_training)
    return desc.cpu().numpy().astype(np.float64)


def extract_batch(extractor: FeatureExtractor, images: list[np.ndarray]) -> np.ndarray:
    resized = [img if img.shape[:2] == extractor.input_size else resize_bilinear(img, extractor.input_size) for img in images]
    was_training = extractor.training
    extractor.eval()
    with torch.no_grad():
        batch = torch.stack([image_to_tensor(img) for img in resized])
        descs = extractor(batch)
    extractor.train(was_training)
    return descs.cpu().numpy().astype(np.float64)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.BatchNorm2d(channels)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(x + h)


def _upsample_stages(image_size: tuple[int, int], max_stages: int = 3) -> int:
    stages = 0
    h, w = image_size
    while stages < max_stages and h % 2 == 0 and w % 2 == 0 and h > 2 and w > 2:
        h, w = h // 2, w // 2
        stages += 1
    if stages == 0:
        raise ValueError(f"image size {image_size} cannot be generated (need even dimensions)")
    return stages


def pose_heatmaps(pose_encodings: torch.Tensor, size: tuple[int, int], sigma: float = 1.0) -> torch.Tensor:
    """Render one Gaussian heatmap per joint on a (height, width) grid.

    Joints whose encoded coordinates are exactly (0, 0) are treated as
    missing (the vector encoding erases confidences) and render blank.
    """
    batch = pose_encodings.shape[0]
    height, width = size
    coords = pose_encodings.reshape(batch, -1, 2)
    xs = coords[:, :, 0, None, None] * width - 0.5
    ys = coords[:, :, 1, None, None] * height - 0.5
    grid_y = torch.arange(height, dtype=pose_encodings.dtype, device=pose_encodings.device)[None, None, :, None]
    grid_x = torch.arange(width, dtype=pose_encodings.dtype, device=pose_encodings.device)[None, None, None, :]
    maps = torch.exp(-((grid_x - xs) ** 2 + (grid_y - ys) ** 2) / (2.0 * sigma**2))
    present = ((coords[:, :, 0] != 0.0) | (coords[:, :, 1] != 0.0)).to(pose_encodings.dtype)
    return maps * present[:, :, None, None]


class Generator(nn.Module):
    """Renders a person in a target pose from a descriptor and a pose vector.

    conditioning="vector" concatenates the 50-dim pose encoding with the
    descriptor at the input; "heatmap" instead injects per-joint Gaussian
    heatmaps as channels at the base resolution.
    """

    def __init__(
        self,
        descriptor_dim: int,
        image_size: tuple[int, int] = (128, 64),
        base_channels: int = 64,
        residual_blocks: int = 6,
        pose_dim: int = POSE_ENCODING_DIM,
        conditioning: str = "vector",
    ):
        super().__init__()
        if conditioning not in ("vector", "heatmap"):
            raise ValueError(f"unknown conditioning {conditioning!r}")
        self.descriptor_dim = descriptor_dim
        self.pose_dim = pose_dim
        self.conditioning = conditioning
        self.image_size = (int(image_size[0]), int(image_size[1]))
        stages = _upsample_stages(self.image_size)
        self.base_size = (self.image_size[0] >> stages, self.image_size[1] >> stages)
        c = base_channels
        num_joints = pose_dim // 2
        fc_in = descriptor_dim + (pose_dim if conditioning == "vector" else 0)
        self.fc = nn.Linear(fc_in, 4 * c * self.base_size[0] * self.base_size[1])
        self.merge_pose = (
            nn.Conv2d(4 * c + num_joints, 4 * c, 1) if conditioning == "heatmap" else None
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * c) for _ in range(residual_blocks)])
        ups: list[nn.Module] = []
        channels = 4 * c
        for _ in range(stages):
            out_channels = max(c, channels // 2)
            ups.extend(
                [
                    nn.ConvTranspose2d(channels, out_channels, 4, stride=2, padding=1),
                    nn.BatchNorm2d(out_channels),
                    nn.LeakyReLU(LEAKY_SLOPE),
                ]
            )
            channels = out_channels
        self.upsample = nn.Sequential(*ups)
        self.to_rgb = nn.Conv2d(channels, 3, 3, padding=1)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        kaiming_init(self)

    def forward(self, descriptors: torch.Tensor, pose_encodings: torch.Tensor) -> torch.Tensor:
        if descriptors.dim() != 2 or descriptors.shape[1] != self.descriptor_dim:
            raise ValueError(f"expected (B, {self.descriptor_dim}) descriptors, got {tuple(descriptors.shape)}")
        if pose_encodings.dim() != 2 or pose_encodings.shape[1] != self.pose_dim:
            raise ValueError(f"expected (B, {self.pose_dim}) pose encodings, got {tuple(pose_encodings.shape)}")
        if self.conditioning == "vector":
            z = torch.cat([descriptors, pose_encodings], dim=1)
        else:
            z = descriptors
        h = self.act(self.fc(z))
        h = h.reshape(z.shape[0], -1, self.base_size[0], self.base_size[1])
        if self.merge_pose is not None:
            maps = pose_heatmaps(pose_encodings, self.base_size)
            h = self.act(self.merge_pose(torch.cat([h, maps], dim=1)))
        h = self.blocks(h)
        h = self.upsample(h)
        return torch.sigmoid(self.to_rgb(h))


def generate(generator: Generator, descriptor: np.ndarray, pose: PoseVector) -> np.ndarray:
    """One generated image as an H x W x 3 array in [0, 1]."""
    desc = np.asarray(descriptor, dtype=np.float64)
    if desc.shape != (generator.descriptor_dim,):
        raise ValueError(f"descriptor must have length {generator.descriptor_dim}, got {desc.shape}")
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        d = torch.from_numpy(desc.astype(np.float32)).unsqueeze(0)
        p = torch.from_numpy(encode_pose(pose).astype(np.float32)).unsqueeze(0)
        out = generator(d, p)[0]
    generator.train(was_training)
    return tensor_to_image(out).astype(np.float64)


class Discriminator(nn.Module):
    """Convolutional trunk with real/fake and identity-classification heads."""

    def __init__(self, num_classes: int, image_size: tuple[int, int] = (128, 64), base_channels: int = 32):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.image_size = (int(image_size[0]), int(image_size[1]))
        c = base_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head_adv = nn.Linear(4 * c, 1)
        self.head_cls = nn.Linear(4 * c, num_classes)
        kaiming_init(self)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.trunk(images).flatten(1)
        prob = torch.sigmoid(self.head_adv(feat)).squeeze(1)
        prob = torch.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
        logits = self.head_cls(feat)
        return prob, logits
