"""Data model and ingestion for person re-identification corpora.

Images are float32 H x W x 3 arrays in [0, 1]. Pose keypoints follow the
BODY_25 convention: 25 joints, each (x, y, confidence) with x normalized by
image width and y by image height. Confidence 0 marks a missing joint and
forces its coordinates to (0, 0); consumers must branch on confidence, never
on coordinates.
"""
from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

NUM_JOINTS = 25
POSE_SOURCES = ("detected", "clustered", "synthetic")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")
PROTOCOLS = ("market1501", "duke", "cuhk03", "cuhk01", "toy")

_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


class PoseFormatError(ValueError):
    """Keypoint file does not match the detector's output schema."""


@dataclass(frozen=True)
class PoseVector:
    """25 body-joint keypoints with per-joint confidence.

    joints: (25, 3) array of (x, y, confidence); coordinates are in [0, 1].
    """

    joints: np.ndarray
    source: str = "detected"

    def __post_init__(self) -> None:
        arr = np.array(self.joints, dtype=np.float64)
        if arr.shape != (NUM_JOINTS, 3):
            raise ValueError(f"expected ({NUM_JOINTS}, 3) joints, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("pose contains non-finite values")
        if self.source not in POSE_SOURCES:
            raise ValueError(f"unknown pose source {self.source!r}")
        missing = arr[:, 2] <= 0.0
        arr[missing, 0] = 0.0
        arr[missing, 1] = 0.0
        arr[missing, 2] = 0.0
        if np.any(arr[:, :2] < 0.0) or np.any(arr[:, :2] > 1.0):
            raise ValueError("joint coordinates must lie in [0, 1]")
        if np.any(arr[:, 2] > 1.0):
            raise ValueError("confidences must lie in [0, 1]")
        if self.source != "detected" and not np.all(np.isin(arr[:, 2], (0.0, 1.0))):
            raise ValueError(f"{self.source} poses must have confidence 1 on present joints")
        arr.setflags(write=False)
        object.__setattr__(self, "joints", arr)

    @property
    def xy(self) -> np.ndarray:
        return self.joints[:, :2]

    @property
    def confidence(self) -> np.ndarray:
        return self.joints[:, 2]

    @property
    def present(self) -> np.ndarray:
        return self.joints[:, 2] > 0.0

    @property
    def num_present(self) -> int:
        return int(np.count_nonzero(self.present))

    def to_json_dict(self) -> dict:
        return {"source": self.source, "joints": [[float(v) for v in row] for row in self.joints]}

    @classmethod
    def from_json_dict(cls, data: dict) -> "PoseVector":
        return cls(joints=np.array(data["joints"], dtype=np.float64), source=data["source"])

    @classmethod
    def all_missing(cls, source: str = "detected") -> "PoseVector":
        return cls(joints=np.zeros((NUM_JOINTS, 3)), source=source)


@dataclass(frozen=True)
class Sample:
    """One pedestrian image with identity and camera labels."""

    image: np.ndarray
    identity: int
    camera: int
    path: str
    pose: PoseVector | None = None

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"image must be HxWx3, got shape {img.shape}")
        if img.dtype != np.float32:
            img = img.astype(np.float32)
        if float(img.min()) < 0.0 or float(img.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if self.identity < 0:
            raise ValueError("identity must be >= 0")
        if self.camera < 0:
            raise ValueError("camera must be >= 0")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)

    def with_pose(self, pose: PoseVector | None) -> "Sample":
        return replace(self, pose=pose)

    def metadata(self) -> dict:
        meta = {"path": self.path, "identity": self.identity, "camera": self.camera}
        if self.pose is not None:
            meta["pose"] = self.pose.to_json_dict()
        return meta


@dataclass(frozen=True)
class DatasetSplit:
    """Train/gallery/query partition of a sample collection."""

    train: tuple[Sample, ...]
    gallery: tuple[Sample, ...]
    query: tuple[Sample, ...]

    @property
    def num_identities_train(self) -> int:
        return len({s.identity for s in self.train})


def load_image(path: str | Path) -> np.ndarray:
    """Decode a raster image to float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory pixels equal a PNG round trip."""
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0)
    return (data / 255.0).astype(np.float32)


def parse_market_name(name: str) -> tuple[int, int] | None:
    """Extract (identity, camera) from ID_cCsS_frame_bbox style file names."""
    m = _MARKET_NAME.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def load_pose_file(path: str | Path, image_size: tuple[int, int] | None = None) -> PoseVector:
    """Parse a BODY_25 keypoint JSON file.

    image_size is (height, width) used to normalize pixel coordinates; when
    omitted the file must carry "canvas_height"/"canvas_width" keys. Files
    with several people keep the one with the largest summed confidence;
    files with zero people yield an all-missing pose.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PoseFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict) or "people" not in data:
        raise PoseFormatError(f"{path}: missing 'people' key")
    if image_size is None:
        if "canvas_height" in data and "canvas_width" in data:
            image_size = (int(data["canvas_height"]), int(data["canvas_width"]))
        else:
            raise PoseFormatError(f"{path}: image size required to normalize coordinates")
    height, width = int(image_size[0]), int(image_size[1])
    if height < 1 or width < 1:
        raise PoseFormatError(f"{path}: invalid image size {image_size}")
    people = data["people"]
    if not isinstance(people, list):
        raise PoseFormatError(f"{path}: 'people' must be a list")
    if not people:
        return PoseVector.all_missing()

    def keypoints(person: dict) -> np.ndarray:
        raw = person.get("pose_keypoints_2d")
        if raw is None:
            raise PoseFormatError(f"{path}: person without 'pose_keypoints_2d'")
        arr = np.asarray(raw, dtype=np.float64)
        if arr.shape != (3 * NUM_JOINTS,):
            raise PoseFormatError(f"{path}: expected {3 * NUM_JOINTS} values, got {arr.size}")
        return arr.reshape(NUM_JOINTS, 3)

    candidates = [keypoints(p) for p in people]
    best = max(candidates, key=lambda k: float(k[:, 2].sum()))
    out = best.copy()
    out[:, 0] = np.clip(out[:, 0] / width, 0.0, 1.0)
    out[:, 1] = np.clip(out[:, 1] / height, 0.0, 1.0)
    out[:, 2] = np.clip(out[:, 2], 0.0, 1.0)
    return PoseVector(joints=out, source="detected")


def _find_pose_file(pose_dir: Path, image_path: Path) -> Path | None:
    for candidate in (f"{image_path.stem}_keypoints.json", f"{image_path.stem}.json"):
        p = pose_dir / candidate
        if p.exists():
            return p
    return None


def _attach_pose(sample: Sample, pose_dir: Path | None) -> Sample:
    if pose_dir is None:
        return sample
    pose_path = _find_pose_file(pose_dir, Path(sample.path))
    if pose_path is None:
        return sample
    try:
        pose = load_pose_file(pose_path, image_size=sample.image.shape[:2])
    except PoseFormatError as exc:
        log.warning("skipping pose file %s: %s", pose_path, exc)
        return sample
    return sample.with_pose(pose)


def load_image_dir(root: str | Path, naming: str = "market1501", pose_dir: str | Path | None = None) -> list[Sample]:
    """Ingest an image folder into Samples, sorted by path.

    naming="market1501" parses identity/camera from file names and skips
    junk (< 0) or unparseable entries with a warning. naming="flat" reads a
    manifest.csv (columns path,identity,camera) next to the images. Decode
    failures skip the file with a warning; an empty result is an error.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    pose_root = Path(pose_dir) if pose_dir is not None else None
    samples: list[Sample] = []
    if naming == "market1501":
        files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
        for path in files:
            parsed = parse_market_name(path.name)
            if parsed is None:
                log.warning("skipping %s: unparseable file name", path)
                continue
            identity, camera = parsed
            if identity < 0:
                log.warning("skipping %s: junk identity %d", path, identity)
                continue
            try:
                image = load_image(path)
            except (OSError, UnidentifiedImageError) as exc:
                log.warning("skipping %s: decode failed (%s)", path, exc)
                continue
            sample = Sample(image=image, identity=identity, camera=camera, path=str(path))
            samples.append(_attach_pose(sample, pose_root))
    elif naming == "flat":
        manifest = root / "manifest.csv"
        if not manifest.exists():
            raise FileNotFoundError(f"flat naming requires {manifest}")
        with open(manifest, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for field in ("path", "identity", "camera"):
            if rows and field not in rows[0]:
                raise ValueError(f"manifest {manifest} lacks column {field!r}")
        rows.sort(key=lambda r: r["path"])
        for row in rows:
            path = root / row["path"]
            try:
                image = load_image(path)
            except (OSError, UnidentifiedImageError) as exc:
                log.warning("skipping %s: decode failed (%s)", path, exc)
                continue
            sample = Sample(
                image=image,
                identity=int(row["identity"]),
                camera=int(row["camera"]),
                path=str(path),
            )
            samples.append(_attach_pose(sample, pose_root))
    else:
        raise ValueError(f"unknown naming scheme {naming!r}")
    if not samples:
        raise ValueError(f"no samples found under {root}")
    return samples


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    """Write a path,identity,camera manifest sorted by path."""
    rows = sorted(rows, key=lambda r: r["path"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["path", "identity", "camera"])
        writer.writeheader()
        writer.writerows(rows)


def _check_cameras(samples: list[Sample], protocol: str) -> None:
    if len({s.camera for s in samples}) < 2:
        raise ValueError(f"protocol {protocol!r} requires camera labels, but samples share one camera")


def _validate_split(split: DatasetSplit, protocol: str) -> DatasetSplit:
    train_ids = {s.identity for s in split.train}
    test_ids = {s.identity for s in split.gallery} | {s.identity for s in split.query}
    if train_ids & test_ids:
        raise ValueError(f"protocol {protocol!r} produced overlapping train/test identities")
    gallery_ids = {s.identity for s in split.gallery}
    for s in split.query:
        if s.identity not in gallery_ids:
            raise ValueError(f"query identity {s.identity} absent from gallery")
    return split


def make_split(samples: list[Sample], protocol: str, seed: int = 0, test_identities: int = 100) -> DatasetSplit:
    """Deterministic train/gallery/query split under a named protocol.

    toy: even identities train, odd identities test with camera 0 as query
    and the rest as gallery. market1501/duke: membership read from the
    standard directory names in each sample path. cuhk03: seeded random
    held-out identities (first image per camera is the probe). cuhk01:
    seeded halves with camera 0 as probe and camera 1 as gallery.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")

    if protocol == "toy":
        train = [s for s in samples if s.identity % 2 == 0]
        test = [s for s in samples if s.identity % 2 == 1]
        query = [s for s in test if s.camera == 0]
        gallery = [s for s in test if s.camera != 0]
    elif protocol in ("market1501", "duke"):
        _check_cameras(samples, protocol)
        train, gallery, query = [], [], []
        for s in samples:
            parts = Path(s.path).parts
            if "bounding_box_train" in parts:
                train.append(s)
            elif "bounding_box_test" in parts:
                gallery.append(s)
            elif "query" in parts:
                query.append(s)
            else:
                log.warning("skipping %s: not in a standard split directory", s.path)
    elif protocol == "cuhk03":
        _check_cameras(samples, protocol)
        ids = sorted({s.identity for s in samples})
        rng = np.random.default_rng(seed)
        perm = [ids[i] for i in rng.permutation(len(ids))]
        n_test = max(1, min(test_identities, len(ids) // 2))
        test_set = set(perm[:n_test])
        train = [s for s in samples if s.identity not in test_set]
        test = sorted((s for s in samples if s.identity in test_set), key=lambda s: s.path)
        query, gallery = [], []
        probe_seen: set[tuple[int, int]] = set()
        for s in test:
            key = (s.identity, s.camera)
            if key not in probe_seen:
                probe_seen.add(key)
                query.append(s)
            else:
                gallery.append(s)
    else:  # cuhk01
        _check_cameras(samples, protocol)
        ids = sorted({s.identity for s in samples})
        rng = np.random.default_rng(seed)
        perm = [ids[i] for i in rng.permutation(len(ids))]
        test_set = set(perm[: max(1, len(ids) // 2)])
        train = [s for s in samples if s.identity not in test_set]
        test = [s for s in samples if s.identity in test_set]
        query = [s for s in test if s.camera == 0]
        gallery = [s for s in test if s.camera != 0]

    split = DatasetSplit(train=tuple(train), gallery=tuple(gallery), query=tuple(query))
    return _validate_split(split, protocol)
