"""Synthetic articulated stick-figure dataset with exact pose ground truth.

Each identity gets distinct head/torso/leg colors; limb joint angles are
drawn per image from a bounded range. Every joint is stamped with a single
pixel whose color encodes the joint index (red channel saturated, blue zero,
green coding the index), so ground-truth poses can be re-extracted from the
rendered image. The emitted pose vector records the marker pixel centers,
making it exact by construction.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import NUM_JOINTS, PoseVector, Sample, quantize_image, save_image, write_manifest

log = logging.getLogger(__name__)

# BODY_25 joint indices
NOSE, NECK = 0, 1
R_SHOULDER, R_ELBOW, R_WRIST = 2, 3, 4
L_SHOULDER, L_ELBOW, L_WRIST = 5, 6, 7
MID_HIP = 8
R_HIP, R_KNEE, R_ANKLE = 9, 10, 11
L_HIP, L_KNEE, L_ANKLE = 12, 13, 14
R_EYE, L_EYE, R_EAR, L_EAR = 15, 16, 17, 18
L_BIG_TOE, L_SMALL_TOE, L_HEEL = 19, 20, 21
R_BIG_TOE, R_SMALL_TOE, R_HEEL = 22, 23, 24

BACKGROUND = 0.92
_MARKER_RED = 1.0
_MARKER_BLUE = 0.0


@dataclass(frozen=True)
class ToySpec:
    """Configuration of the synthetic dataset."""

    num_identities: int = 10
    images_per_identity: int = 8
    image_size: tuple[int, int] = (64, 32)
    appearance_seed: int = 7
    pose_range: float = 25.0

    def __post_init__(self) -> None:
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.images_per_identity < 2:
            raise ValueError("need at least 2 images per identity")
        if self.image_size[0] < 32 or self.image_size[1] < 16:
            raise ValueError("image size too small to render a figure")
        if self.pose_range < 0:
            raise ValueError("pose_range must be >= 0")


def marker_color(joint: int) -> tuple[float, float, float]:
    return (_MARKER_RED, (joint + 0.5) / NUM_JOINTS, _MARKER_BLUE)


def _identity_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw (n, 3 parts, 3 channels) colors, distinct across identities and parts."""
    palette: list[np.ndarray] = []
    while len(palette) < n:
        cand = rng.uniform(0.15, 0.85, size=(3, 3))
        if min(np.linalg.norm(cand[i] - cand[j]) for i in range(3) for j in range(i + 1, 3)) < 0.25:
            continue
        if any(np.linalg.norm(cand - prev) < 0.35 for prev in palette):
            continue
        palette.append(cand)
    return np.stack(palette)


def _dir(angle_deg: float) -> np.ndarray:
    """Unit vector at angle_deg from straight down (x right, y down)."""
    a = np.deg2rad(angle_deg)
    return np.array([np.sin(a), np.cos(a)])


def _skeleton(rng: np.random.Generator, height: int, width: int, pose_range: float) -> np.ndarray:
    """Sample joint angles and return (25, 2) pixel coordinates (x, y)."""
    u = height / 64.0
    b = pose_range
    pts = np.zeros((NUM_JOINTS, 2))

    hip = np.array([width / 2.0 + rng.uniform(-2, 2) * u, 0.60 * height + rng.uniform(-1, 1) * u])
    tilt = rng.uniform(-0.15 * b, 0.15 * b)
    neck = hip - 16.0 * u * _dir(tilt)
    pts[MID_HIP] = hip
    pts[NECK] = neck

    head_tilt = tilt + rng.uniform(-0.2 * b, 0.2 * b)
    up = -_dir(head_tilt)
    nose = neck + 7.0 * u * up
    pts[NOSE] = nose
    pts[R_EYE] = nose + np.array([-1.5 * u, -1.0 * u])
    pts[L_EYE] = nose + np.array([1.5 * u, -1.0 * u])
    pts[R_EAR] = nose + np.array([-3.0 * u, 0.5 * u])
    pts[L_EAR] = nose + np.array([3.0 * u, 0.5 * u])

    for side, sh, el, wr in ((-1, R_SHOULDER, R_ELBOW, R_WRIST), (1, L_SHOULDER, L_ELBOW, L_WRIST)):
        shoulder = neck + np.array([side * 4.5 * u, 1.0 * u])
        arm = side * rng.uniform(5.0, 5.0 + b)
        fore = arm + side * rng.uniform(-0.6 * b, 0.6 * b)
        elbow = shoulder + 7.0 * u * _dir(arm)
        wrist = elbow + 7.0 * u * _dir(fore)
        pts[sh], pts[el], pts[wr] = shoulder, elbow, wrist

    for side, hp, kn, an, bt, st, hl in (
        (-1, R_HIP, R_KNEE, R_ANKLE, R_BIG_TOE, R_SMALL_TOE, R_HEEL),
        (1, L_HIP, L_KNEE, L_ANKLE, L_BIG_TOE, L_SMALL_TOE, L_HEEL),
    ):
        hjoint = hip + np.array([side * 3.0 * u, 0.0])
        thigh = side * rng.uniform(2.0, 2.0 + 0.6 * b)
        shin = thigh + side * rng.uniform(-0.4 * b, 0.4 * b)
        knee = hjoint + 9.0 * u * _dir(thigh)
        ankle = knee + 9.0 * u * _dir(shin)
        pts[hp], pts[kn], pts[an] = hjoint, knee, ankle
        pts[bt] = ankle + np.array([side * 2.5 * u, 1.5 * u])
        pts[st] = ankle + np.array([side * 4.0 * u, 1.2 * u])
        pts[hl] = ankle + np.array([-side * 1.5 * u, 1.0 * u])

    pts[:, 0] = np.clip(pts[:, 0], 0.5, width - 1.5)
    pts[:, 1] = np.clip(pts[:, 1], 0.5, height - 1.5)
    return pts


def _paint_disc(img: np.ndarray, center: np.ndarray, radius: float, color: np.ndarray) -> None:
    h, w = img.shape[:2]
    x0, y0 = center
    xs = np.arange(max(0, int(x0 - radius - 1)), min(w, int(x0 + radius + 2)))
    ys = np.arange(max(0, int(y0 - radius - 1)), min(h, int(y0 + radius + 2)))
    if xs.size == 0 or ys.size == 0:
        return
    gx, gy = np.meshgrid(xs, ys)
    mask = (gx - x0) ** 2 + (gy - y0) ** 2 <= radius**2
    img[gy[mask], gx[mask]] = color


def _paint_segment(img: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float, color: np.ndarray) -> None:
    steps = max(2, int(np.ceil(np.linalg.norm(p1 - p0) * 2)) + 1)
    for t in np.linspace(0.0, 1.0, steps):
        _paint_disc(img, p0 + t * (p1 - p0), radius, color)


def _place_markers(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Stamp one uniquely colored pixel per joint; nudge on collisions.

    Returns the (25, 2) integer pixel positions actually used.
    """
    h, w = img.shape[:2]
    offsets = [(0, 0)]
    for r in (1, 2, 3):
        ring = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if max(abs(dx), abs(dy)) == r]
        offsets.extend(sorted(ring))
    taken: set[tuple[int, int]] = set()
    placed = np.zeros((NUM_JOINTS, 2), dtype=np.int64)
    for j in range(NUM_JOINTS):
        px, py = int(round(pts[j, 0])), int(round(pts[j, 1]))
        for dx, dy in offsets:
            cand = (min(max(px + dx, 0), w - 1), min(max(py + dy, 0), h - 1))
            if cand not in taken:
                taken.add(cand)
                placed[j] = cand
                break
        else:
            raise RuntimeError("could not place a joint marker without collision")
        img[placed[j, 1], placed[j, 0]] = marker_color(j)
    return placed


def render_figure(
    colors: np.ndarray, rng: np.random.Generator, image_size: tuple[int, int], pose_range: float
) -> tuple[np.ndarray, PoseVector]:
    """Render one figure; returns (image, exact pose of the stamped markers)."""
    height, width = image_size
    img = np.full((height, width, 3), BACKGROUND, dtype=np.float64)
    head_c, torso_c, leg_c = colors
    pts = _skeleton(rng, height, width, pose_range)
    u = height / 64.0

    _paint_segment(img, pts[R_HIP], pts[L_HIP], 1.5 * u, torso_c)
    _paint_segment(img, pts[NECK], pts[MID_HIP], 2.5 * u, torso_c)
    _paint_segment(img, pts[R_SHOULDER], pts[L_SHOULDER], 1.2 * u, torso_c)
    for sh, el, wr in ((R_SHOULDER, R_ELBOW, R_WRIST), (L_SHOULDER, L_ELBOW, L_WRIST)):
        _paint_segment(img, pts[sh], pts[el], 1.2 * u, torso_c)
        _paint_segment(img, pts[el], pts[wr], 1.2 * u, torso_c)
    for hp, kn, an, bt in ((R_HIP, R_KNEE, R_ANKLE, R_BIG_TOE), (L_HIP, L_KNEE, L_ANKLE, L_BIG_TOE)):
        _paint_segment(img, pts[hp], pts[kn], 1.5 * u, leg_c)
        _paint_segment(img, pts[kn], pts[an], 1.5 * u, leg_c)
        _paint_segment(img, pts[an], pts[bt], 1.0 * u, leg_c)
    head_center = pts[NECK] + 4.5 * u * (pts[NOSE] - pts[NECK]) / max(np.linalg.norm(pts[NOSE] - pts[NECK]), 1e-9)
    _paint_disc(img, head_center, 3.2 * u, head_c)

    placed = _place_markers(img, pts)
    joints = np.ones((NUM_JOINTS, 3))
    joints[:, 0] = (placed[:, 0] + 0.5) / width
    joints[:, 1] = (placed[:, 1] + 0.5) / height
    pose = PoseVector(joints=joints, source="synthetic")
    return quantize_image(img), pose


def detect_joint_markers(image: np.ndarray) -> np.ndarray:
    """Recover (25, 3) marker pixel positions (x, y, found) from a rendering."""
    red = image[:, :, 0] == _MARKER_RED
    blue = image[:, :, 2] == _MARKER_BLUE
    ys, xs = np.nonzero(red & blue)
    out = np.zeros((NUM_JOINTS, 3))
    for y, x in zip(ys, xs):
        g = float(image[y, x, 1])
        j = int(round(g * NUM_JOINTS - 0.5))
        if 0 <= j < NUM_JOINTS and abs(g - (j + 0.5) / NUM_JOINTS) < 0.5 / NUM_JOINTS:
            out[j] = (x, y, 1.0)
    return out


def synth_toy_dataset(spec: ToySpec) -> tuple[list[Sample], list[PoseVector]]:
    """Render the full synthetic dataset in memory.

    Cameras alternate 0/1 across the images of an identity. Deterministic:
    the same spec yields bit-identical images and poses.
    """
    palette = _identity_colors(np.random.default_rng([spec.appearance_seed, 0]), spec.num_identities)
    samples: list[Sample] = []
    poses: list[PoseVector] = []
    for identity in range(spec.num_identities):
        for k in range(spec.images_per_identity):
            rng = np.random.default_rng([spec.appearance_seed, identity, k])
            image, pose = render_figure(palette[identity], rng, spec.image_size, spec.pose_range)
            camera = k % 2
            path = f"images/id{identity:04d}_{k:02d}_c{camera}.png"
            samples.append(Sample(image=image, identity=identity, camera=camera, path=path, pose=pose))
            poses.append(pose)
    return samples, poses


def write_toy_dataset(spec: ToySpec, out_dir: str | Path) -> list[Sample]:
    """Write PNG images, one keypoint JSON per image, and a manifest CSV."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "poses").mkdir(parents=True, exist_ok=True)
    samples, _ = synth_toy_dataset(spec)
    height, width = spec.image_size
    rows = []
    for sample in samples:
        rel = Path(sample.path)
        save_image(out_dir / rel, sample.image)
        keypoints: list[float] = []
        assert sample.pose is not None
        for x, y, c in sample.pose.joints:
            keypoints.extend((x * width, y * height, c))
        pose_doc = {
            "canvas_height": height,
            "canvas_width": width,
            "people": [{"pose_keypoints_2d": keypoints}],
        }
        with open(out_dir / "poses" / f"{rel.stem}_keypoints.json", "w", encoding="utf-8") as fh:
            json.dump(pose_doc, fh, sort_keys=True)
        rows.append({"path": sample.path, "identity": sample.identity, "camera": sample.camera})
    write_manifest(out_dir / "manifest.csv", rows)
    log.info("wrote %d toy images to %s", len(samples), out_dir)
    return samples
