"""Canonical pose derivation by clustering detected body keypoints.

Two feature modes: the full pose as one 50-dim point (x, y per joint), or
each joint clustered independently in 2-D. Two methods: Lloyd k-means with
k-means++ seeding, and a diagonal-covariance Gaussian mixture fitted by EM
and initialized from k-means. Poses with too few detected joints are
excluded; missing joints in the survivors are imputed with the per-joint
dataset mean.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import NUM_JOINTS, PoseVector

log = logging.getLogger(__name__)

POSE_FEATURE_DIM = 2 * NUM_JOINTS
COVARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class ClusterConfig:
    method: str = "gmm"  # kmeans | gmm
    mode: str = "fullbody"  # fullbody | bodyjoint
    num_poses: int = 12
    clusters_per_joint: int = 3
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    min_present_frac: float = 0.7
    n_init: int = 10

    def __post_init__(self) -> None:
        if self.method not in ("kmeans", "gmm"):
            raise ValueError(f"unknown clustering method {self.method!r}")
        if self.mode not in ("fullbody", "bodyjoint"):
            raise ValueError(f"unknown clustering mode {self.mode!r}")
        if self.num_poses < 1 or self.clusters_per_joint < 1:
            raise ValueError("num_poses and clusters_per_joint must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if not (0.0 <= self.min_present_frac <= 1.0):
            raise ValueError("min_present_frac must lie in [0, 1]")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")


@dataclass(frozen=True)
class PoseSet:
    """The derived canonical poses plus the configuration that produced them."""

    poses: tuple[PoseVector, ...]
    provenance: ClusterConfig

    def __post_init__(self) -> None:
        if len(self.poses) != self.provenance.num_poses:
            raise ValueError("pose count does not match configuration")
        for p in self.poses:
            if p.num_present != NUM_JOINTS:
                raise ValueError("canonical poses must have every joint present")

    def __len__(self) -> int:
        return len(self.poses)

    def to_json_dict(self) -> dict:
        return {
            "poses": [p.to_json_dict() for p in self.poses],
            "provenance": asdict(self.provenance),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PoseSet":
        cfg = ClusterConfig(**data["provenance"])
        return cls(poses=tuple(PoseVector.from_json_dict(p) for p in data["poses"]), provenance=cfg)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "PoseSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d)
    log_likelihoods: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        c = np.asarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or m.shape[0] != w.size or c.shape != m.shape:
            raise ValueError("inconsistent mixture shapes")
        if abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("weights must form a simplex")
        if np.any(c < COVARIANCE_FLOOR - 1e-12):
            raise ValueError("covariances below the variance floor")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", c)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means


def joint_mean_table(poses: list[PoseVector]) -> np.ndarray:
    """Per-joint mean location over present joints; absent joints fall back to center."""
    table = np.full((NUM_JOINTS, 2), 0.5)
    if not poses:
        return table
    xy = np.stack([p.xy for p in poses])
    present = np.stack([p.present for p in poses])
    counts = present.sum(axis=0)
    for j in range(NUM_JOINTS):
        if counts[j] > 0:
            table[j] = xy[present[:, j], j].mean(axis=0)
    return table


def pose_to_feature(pose: PoseVector, impute: np.ndarray | None = None) -> np.ndarray:
    """Flatten to a 50-vector of (x, y) per joint, imputing missing joints.

    impute is a (25, 2) table of fallback locations; None fills zeros.
    """
    xy = pose.xy.copy()
    missing = ~pose.present
    if impute is not None:
        xy[missing] = impute[missing]
    else:
        xy[missing] = 0.0
    return xy.reshape(-1)


def feature_to_pose(vec: np.ndarray, source: str = "clustered") -> PoseVector:
    """Inverse of pose_to_feature for complete poses; clamps into [0, 1]."""
    xy = np.clip(np.asarray(vec, dtype=np.float64).reshape(NUM_JOINTS, 2), 0.0, 1.0)
    joints = np.concatenate([xy, np.ones((NUM_JOINTS, 1))], axis=1)
    return PoseVector(joints=joints, source=source)


def filter_poses(poses: list[PoseVector], min_present_frac: float) -> list[PoseVector]:
    kept = [p for p in poses if p.num_present >= min_present_frac * NUM_JOINTS]
    dropped = len(poses) - len(kept)
    if dropped:
        log.info("excluded %d/%d poses below %.0f%% joint coverage", dropped, len(poses), 100 * min_present_frac)
    return kept


def _inertia(points: np.ndarray, centers: np.ndarray, assignments: np.ndarray) -> float:
    return float(((points - centers[assignments]) ** 2).sum())


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[i] = points[idx]
        closest = np.minimum(closest, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(
    points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    centers = centers.copy()
    assignments = np.argmin(_sq_distances(points, centers), axis=1)
    history = [_inertia(points, centers, assignments)]
    for _ in range(max_iter):
        new_centers = centers.copy()
        for i in range(centers.shape[0]):
            members = points[assignments == i]
            if members.shape[0] > 0:
                new_centers[i] = members.mean(axis=0)
            else:
                # empty cluster: re-seed to the point farthest from its center
                dist_own = ((points - new_centers[assignments]) ** 2).sum(axis=1)
                new_centers[i] = points[int(np.argmax(dist_own))]
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        assignments = np.argmin(_sq_distances(points, centers), axis=1)
        history.append(_inertia(points, centers, assignments))
        if shift < tol:
            break
    return centers, assignments, history


def kmeans_fit(points: np.ndarray, k: int, cfg: ClusterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd k-means with k-means++ seeding and n_init restarts; returns (centers, assignments)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    best: tuple[float, np.ndarray, np.ndarray] | None = None
    seeds = np.random.SeedSequence([int(cfg.seed), k, n]).spawn(cfg.n_init)
    for seq in seeds:
        rng = np.random.default_rng(seq)
        centers, assignments, _ = _lloyd(points, _kmeans_pp_init(points, k, rng), cfg.max_iter, cfg.tol)
        inertia = _inertia(points, centers, assignments)
        if best is None or inertia < best[0] - 1e-15:
            best = (inertia, centers, assignments)
    assert best is not None
    return best[1], best[2]


def _diag_gaussian_logpdf(points: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log density of each point under each component; (n, k)."""
    d = points.shape[1]
    log_det = np.log(covs).sum(axis=1)  # (k,)
    diff_sq = (points[:, None, :] - means[None, :, :]) ** 2 / covs[None, :, :]
    return -0.5 * (d * np.log(2 * np.pi) + log_det[None, :] + diff_sq.sum(axis=2))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(a - m).sum(axis=axis))


def gmm_fit(points: np.ndarray, k: int, cfg: ClusterConfig) -> GmmModel:
    """EM for a diagonal-covariance mixture, initialized from k-means.

    Stops when the per-point log-likelihood improves by less than cfg.tol.
    The fitted model records the log-likelihood trajectory.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    centers, assignments = kmeans_fit(points, k, cfg)
    weights = np.maximum(np.bincount(assignments, minlength=k) / n, 1e-6)
    weights = weights / weights.sum()
    means = centers.copy()
    covs = np.empty((k, d))
    overall_var = np.maximum(points.var(axis=0), COVARIANCE_FLOOR)
    for i in range(k):
        members = points[assignments == i]
        covs[i] = np.maximum(members.var(axis=0), COVARIANCE_FLOOR) if members.shape[0] > 1 else overall_var

    history: list[float] = []
    prev_ll = -np.inf
    for _ in range(cfg.max_iter):
        log_prob = _diag_gaussian_logpdf(points, means, covs) + np.log(weights)[None, :]
        log_norm = _logsumexp(log_prob, axis=1)  # (n,)
        ll = float(log_norm.mean())
        history.append(ll)
        resp = np.exp(log_prob - log_norm[:, None])  # (n, k)
        mass = resp.sum(axis=0)  # (k,)
        weights = np.maximum(mass / n, 1e-12)
        weights = weights / weights.sum()
        safe_mass = np.maximum(mass, 1e-12)
        means = (resp.T @ points) / safe_mass[:, None]
        diff_sq = (points[:, None, :] - means[None, :, :]) ** 2
        covs = np.einsum("nk,nkd->kd", resp, diff_sq) / safe_mass[:, None]
        covs = np.maximum(covs, COVARIANCE_FLOOR)
        if ll - prev_ll < cfg.tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return GmmModel(weights=weights, means=means, covariances=covs, log_likelihoods=tuple(history))


def gmm_sample(model: GmmModel, n: int, seed: int) -> np.ndarray:
    """Draw n vectors from the mixture, clamped to [0, 1]; deterministic per seed."""
    rng = np.random.default_rng(seed)
    components = rng.choice(model.num_components, size=n, p=model.weights)
    noise = rng.standard_normal((n, model.dim))
    draws = model.means[components] + noise * np.sqrt(model.covariances[components])
    return np.clip(draws, 0.0, 1.0)


def derive_pose_set(poses: list[PoseVector], cfg: ClusterConfig) -> PoseSet:
    """Derive the canonical pose set from detected poses per the configuration.

    fullbody/kmeans: the cluster centers. fullbody/gmm: draws from the fitted
    mixture. bodyjoint/kmeans: each output joint picks one of that joint's
    cluster centers at random. bodyjoint/gmm: each output joint draws from
    that joint's own mixture.
    """
    kept = filter_poses(poses, cfg.min_present_frac)
    needed = max(cfg.num_poses, cfg.clusters_per_joint)
    if len(kept) < needed:
        raise ValueError(f"need at least {needed} usable poses, got {len(kept)}")
    impute = joint_mean_table(kept)
    features = np.stack([pose_to_feature(p, impute) for p in kept])

    k = cfg.num_poses
    if cfg.mode == "fullbody":
        if cfg.method == "kmeans":
            centers, _ = kmeans_fit(features, k, cfg)
            vectors = centers
        else:
            model = gmm_fit(features, k, cfg)
            sample_seed = int(np.random.SeedSequence([int(cfg.seed), 1]).generate_state(1)[0])
            vectors = gmm_sample(model, k, seed=sample_seed)
    else:
        per_joint = []
        for j in range(NUM_JOINTS):
            pts = features[:, 2 * j : 2 * j + 2]
            sub = replace(cfg, seed=int(np.random.SeedSequence([int(cfg.seed), 2, j]).generate_state(1)[0]))
            if cfg.method == "kmeans":
                centers, _ = kmeans_fit(pts, cfg.clusters_per_joint, sub)
                per_joint.append(centers)
            else:
                model = gmm_fit(pts, cfg.clusters_per_joint, sub)
                draw_seed = int(np.random.SeedSequence([int(cfg.seed), 3, j]).generate_state(1)[0])
                per_joint.append(gmm_sample(model, k, seed=draw_seed))
        vectors = np.empty((k, POSE_FEATURE_DIM))
        if cfg.method == "kmeans":
            rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 4]))
            for i in range(k):
                for j in range(NUM_JOINTS):
                    choice = int(rng.integers(cfg.clusters_per_joint))
                    vectors[i, 2 * j : 2 * j + 2] = per_joint[j][choice]
        else:
            for i in range(k):
                for j in range(NUM_JOINTS):
                    vectors[i, 2 * j : 2 * j + 2] = per_joint[j][i]

    pose_list = tuple(feature_to_pose(v) for v in vectors)
    return PoseSet(poses=pose_list, provenance=cfg)
