"""Gallery indexing, ranking, CMC/mAP scoring, re-ranking and evaluation.

Ranking follows the common cross-camera protocol: gallery entries sharing
both the identity and the camera of the query are masked out (except for
protocols without a junk set). CMC and average precision are computed with
plain Python arithmetic over the ranked relevance lists so they can be
checked exactly against brute-force recomputation.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import DatasetSplit
from .fusion import ReidPipeline, extract_fused
from .imageops import resize_bilinear

log = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")
DESCRIPTOR_MAGIC = b"PTDM"
DESCRIPTOR_VERSION = 1


@dataclass(frozen=True)
class GalleryIndex:
    """Immutable descriptor matrix with identity and camera labels."""

    descriptors: np.ndarray  # (M, D)
    identities: np.ndarray  # (M,)
    cameras: np.ndarray  # (M,)
    metric: str = "euclidean"

    def __post_init__(self) -> None:
        desc = np.asarray(self.descriptors, dtype=np.float64)
        ids = np.asarray(self.identities, dtype=np.int64)
        cams = np.asarray(self.cameras, dtype=np.int64)
        if desc.ndim != 2 or desc.shape[0] == 0:
            raise ValueError("gallery must be a non-empty (M, D) matrix")
        if not np.all(np.isfinite(desc)):
            raise ValueError("gallery descriptors must be finite")
        if ids.shape != (desc.shape[0],) or cams.shape != (desc.shape[0],):
            raise ValueError("labels must match the gallery row count")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        for name, arr in (("descriptors", desc), ("identities", ids), ("cameras", cams)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def build_index(descriptors, identities, cameras, metric: str = "euclidean") -> GalleryIndex:
    return GalleryIndex(
        descriptors=np.asarray(descriptors, dtype=np.float64),
        identities=np.asarray(identities, dtype=np.int64),
        cameras=np.asarray(cameras, dtype=np.int64),
        metric=metric,
    )


@dataclass(frozen=True)
class QueryRef:
    descriptor: np.ndarray
    identity: int
    camera: int
    path: str = ""


@dataclass(frozen=True)
class RetrievalResult:
    """Ranking of the valid gallery entries for one probe.

    ranked_indices is a permutation of the valid gallery rows ordered by
    ascending distance; relevant marks, along that order, the entries that
    share the query identity.
    """

    query: QueryRef
    ranked_indices: np.ndarray
    distances: np.ndarray
    valid_mask: np.ndarray
    relevant: np.ndarray

    @property
    def num_relevant(self) -> int:
        return int(np.count_nonzero(self.relevant))


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    """(len(a), len(b)) distance matrix; cosine uses 1 - cosine similarity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("qmd,qmd->qm", diff, diff))
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    raise ValueError(f"unknown metric {metric!r}")


def _rank_distances(index: GalleryIndex, distances: np.ndarray, identity: int, camera: int, protocol: str) -> RetrievalResult:
    valid = np.ones(index.size, dtype=bool)
    if protocol != "cuhk01":
        # standard junk filtering: same identity seen by the same camera
        valid &= ~((index.identities == identity) & (index.cameras == camera))
    order = np.argsort(distances, kind="stable")  # ties broken by gallery index
    order = order[valid[order]]
    result = RetrievalResult(
        query=QueryRef(descriptor=np.empty(0), identity=identity, camera=camera),
        ranked_indices=order,
        distances=distances[order],
        valid_mask=valid,
        relevant=index.identities[order] == identity,
    )
    return result


def rank(
    index: GalleryIndex,
    query_descriptor: np.ndarray,
    query_identity: int,
    query_camera: int,
    protocol: str = "market1501",
    query_path: str = "",
) -> RetrievalResult:
    """Rank the gallery for one probe under the protocol's junk filtering."""
    q = np.asarray(query_descriptor, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query descriptor must have length {index.dim}, got {q.shape}")
    distances = pairwise_distances(q[None, :], index.descriptors, index.metric)[0]
    result = _rank_distances(index, distances, query_identity, query_camera, protocol)
    return RetrievalResult(
        query=QueryRef(descriptor=q, identity=query_identity, camera=query_camera, path=query_path),
        ranked_indices=result.ranked_indices,
        distances=result.distances,
        valid_mask=result.valid_mask,
        relevant=result.relevant,
    )


def multi_query_rank(
    index: GalleryIndex,
    query_descriptors: np.ndarray,
    query_identity: int,
    query_camera: int,
    protocol: str = "market1501",
    pooling: str = "mean",
) -> RetrievalResult:
    """Pool several probe descriptors of one (identity, camera) into a single rank."""
    descs = np.asarray(query_descriptors, dtype=np.float64)
    if descs.ndim == 1:
        descs = descs[None, :]
    if descs.shape[0] < 1:
        raise ValueError("need at least one query descriptor")
    if pooling == "mean":
        probe = descs.mean(axis=0)
    elif pooling == "max":
        probe = descs.max(axis=0)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return rank(index, probe, query_identity, query_camera, protocol)


def _usable(results: list[RetrievalResult]) -> list[RetrievalResult]:
    usable = [r for r in results if r.num_relevant > 0]
    skipped = len(results) - len(usable)
    if skipped:
        log.warning("excluded %d queries without any valid relevant gallery entry", skipped)
    if not usable:
        raise ValueError("no query has a valid relevant gallery entry")
    return usable


def cmc(results: list[RetrievalResult], max_rank: int = 20) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first hit appears at rank <= k."""
    usable = _usable(results)
    curve = [0.0] * max_rank
    for res in usable:
        hits = np.nonzero(res.relevant)[0]
        first = int(hits[0])  # 0-based rank of the first relevant entry
        for k in range(first, max_rank):
            curve[k] += 1.0
    return np.array([c / len(usable) for c in curve])


def average_precision(result: RetrievalResult) -> float:
    """Mean over relevant entries of the precision at their rank."""
    total_relevant = result.num_relevant
    if total_relevant == 0:
        raise ValueError("query has no valid relevant entry")
    hits = 0
    precision_sum = 0.0
    for position, rel in enumerate(result.relevant, start=1):
        if rel:
            hits += 1
            precision_sum += hits / position
    return precision_sum / total_relevant


def mean_average_precision(results: list[RetrievalResult]) -> float:
    usable = _usable(results)
    return sum(average_precision(r) for r in usable) / len(usable)


def _k_neighbors(distances: np.ndarray, k: int) -> list[np.ndarray]:
    """k nearest neighbors (self excluded) per row of a square distance matrix."""
    n = distances.shape[0]
    neighbors = []
    for i in range(n):
        order = np.argsort(distances[i], kind="stable")
        order = order[order != i]
        neighbors.append(order[:k])
    return neighbors


def _reciprocal_sets(distances: np.ndarray, k: int) -> list[set[int]]:
    neighbors = _k_neighbors(distances, k)
    neighbor_sets = [set(n.tolist()) for n in neighbors]
    return [{j for j in neighbors[i] if i in neighbor_sets[j]} for i in range(distances.shape[0])]


def rerank(
    index: GalleryIndex,
    results: list[RetrievalResult],
    k1: int = 20,
    k2: int = 6,
    lam: float = 0.3,
) -> list[RetrievalResult]:
    """k-reciprocal re-ranking of existing results.

    New distance = (1 - lam) * Jaccard distance between reciprocal-neighbor
    membership vectors + lam * original distance. Membership vectors weight
    each reciprocal neighbor by exp(-d), expand half-size reciprocal sets of
    reciprocal neighbors, and are smoothed over the k2 nearest neighbors.
    lam = 1 keeps every ordering unchanged.
    """
    if k1 >= index.size:
        raise ValueError(f"k1 ({k1}) must be smaller than the gallery size ({index.size})")
    if k2 < 1:
        raise ValueError("k2 must be >= 1")
    if not results:
        return []
    queries = np.stack([r.query.descriptor for r in results])
    if queries.shape[1] != index.dim:
        raise ValueError("results do not carry query descriptors of the gallery dimension")
    n_q = queries.shape[0]
    all_desc = np.concatenate([queries, index.descriptors], axis=0)
    dist = pairwise_distances(all_desc, all_desc, index.metric)
    n = dist.shape[0]

    reciprocal = _reciprocal_sets(dist, k1)
    half = _reciprocal_sets(dist, max(1, int(round(k1 / 2))))
    expanded: list[set[int]] = []
    for i in range(n):
        grown = set(reciprocal[i])
        for j in reciprocal[i]:
            if len(half[j] & reciprocal[i]) >= (2.0 / 3.0) * len(half[j]) and half[j]:
                grown |= half[j]
        expanded.append(grown)

    weights = np.zeros((n, n))
    for i in range(n):
        members = sorted(expanded[i])
        if members:
            weights[i, members] = np.exp(-dist[i, members])

    smoothed = np.zeros_like(weights)
    nn = _k_neighbors(dist, k2)
    for i in range(n):
        rows = [i] + nn[i][: max(0, k2 - 1)].tolist()
        smoothed[i] = weights[rows].mean(axis=0)

    out: list[RetrievalResult] = []
    for qi, res in enumerate(results):
        vq = smoothed[qi]
        vg = smoothed[n_q:]
        minimum = np.minimum(vq[None, :], vg).sum(axis=1)
        maximum = np.maximum(vq[None, :], vg).sum(axis=1)
        jaccard = 1.0 - minimum / np.maximum(maximum, 1e-12)
        original = dist[qi, n_q:]
        final = (1.0 - lam) * jaccard + lam * original
        order = np.argsort(final, kind="stable")
        order = order[res.valid_mask[order]]
        out.append(
            RetrievalResult(
                query=res.query,
                ranked_indices=order,
                distances=final[order],
                valid_mask=res.valid_mask,
                relevant=index.identities[order] == res.query.identity,
            )
        )
    return out


def distance_study(descriptors: np.ndarray, labels: np.ndarray, scale: float = 1e3) -> tuple[float, float]:
    """Mean within-identity vs cross-identity pairwise distance, scaled.

    Classes with a single member contribute no within pairs. Reported with
    the conventional 1e3 scaling of small descriptor distances.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    if len({int(v) for v in labels}) < 2:
        raise ValueError("need at least two identities")
    dist = pairwise_distances(descriptors, descriptors, "euclidean")
    intra_vals: list[float] = []
    inter_vals: list[float] = []
    n = len(labels)
    for i in range(n):
        for j in range(i + 1, n):
            (intra_vals if labels[i] == labels[j] else inter_vals).append(dist[i, j])
    intra = float(np.mean(intra_vals)) * scale if intra_vals else 0.0
    inter = float(np.mean(inter_vals)) * scale
    return intra, inter


@dataclass(frozen=True)
class EvalOptions:
    metric: str = "euclidean"
    protocol: str = "market1501"
    multi_query: bool = False
    use_rerank: bool = False
    rerank_k1: int = 20
    rerank_k2: int = 6
    rerank_lambda: float = 0.3
    max_rank: int = 20
    descriptor_source: str = "fused"  # fused | backbone


@dataclass(frozen=True)
class EvalReport:
    cmc: tuple[float, ...]
    rank1: float
    rank5: float
    rank10: float
    map: float
    per_query_ap: tuple[float, ...]
    intra_mean: float
    inter_mean: float
    num_queries: int = 0
    num_gallery: int = 0
    skipped_queries: int = 0

    def __post_init__(self) -> None:
        curve = np.asarray(self.cmc)
        if np.any(curve < -1e-12) or np.any(curve > 1.0 + 1e-12) or np.any(np.diff(curve) < -1e-12):
            raise ValueError("cmc must be a non-decreasing curve in [0, 1]")
        if not (0.0 <= self.map <= 1.0):
            raise ValueError("map must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "cmc": list(self.cmc),
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "map": self.map,
            "per_query_ap": list(self.per_query_ap),
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
            "skipped_queries": self.skipped_queries,
        }

    def format_table(self) -> str:
        lines = [
            "metric        value",
            "------------  -------",
            f"rank-1        {self.rank1:.4f}",
            f"rank-5        {self.rank5:.4f}",
            f"rank-10       {self.rank10:.4f}",
            f"mAP           {self.map:.4f}",
            f"intra (x1e3)  {self.intra_mean:.4f}",
            f"inter (x1e3)  {self.inter_mean:.4f}",
            f"queries       {self.num_queries}",
            f"gallery       {self.num_gallery}",
        ]
        return "\n".join(lines)


def _descriptor_fn(pipeline: ReidPipeline, source: str):
    if source == "fused":
        return lambda image: extract_fused(image, pipeline)
    if source == "backbone":
        return lambda image: pipeline.backbone_descriptor(
            image if image.shape[:2] == pipeline.f2.input_size else resize_bilinear(image, pipeline.f2.input_size)
        )
    if source == "max_fusion":
        # element-wise maximum over the source and generated-view descriptors,
        # kept only as a comparison baseline for the learned fusion
        def describe(image: np.ndarray) -> np.ndarray:
            if image.shape[:2] != pipeline.image_size:
                image = resize_bilinear(image, pipeline.image_size)
            src = pipeline.source_descriptor(image)
            gen = pipeline.generated_descriptors(src)
            return np.maximum(src, gen.max(axis=0))

        return describe
    raise ValueError(f"unknown descriptor source {source!r}")


def evaluate(split: DatasetSplit, pipeline: ReidPipeline, options: EvalOptions = EvalOptions()) -> EvalReport:
    """Score retrieval of the query set against the gallery."""
    describe = _descriptor_fn(pipeline, options.descriptor_source)
    gallery_desc = np.stack([describe(s.image) for s in split.gallery])
    gallery_ids = np.array([s.identity for s in split.gallery])
    gallery_cams = np.array([s.camera for s in split.gallery])
    index = build_index(gallery_desc, gallery_ids, gallery_cams, options.metric)
    query_desc = [describe(s.image) for s in split.query]

    results: list[RetrievalResult] = []
    if options.multi_query:
        groups: dict[tuple[int, int], list[np.ndarray]] = {}
        for s, desc in zip(split.query, query_desc):
            groups.setdefault((s.identity, s.camera), []).append(desc)
        for (identity, camera), descs in sorted(groups.items()):
            results.append(multi_query_rank(index, np.stack(descs), identity, camera, options.protocol))
    else:
        for s, desc in zip(split.query, query_desc):
            results.append(rank(index, desc, s.identity, s.camera, options.protocol, query_path=s.path))

    if options.use_rerank:
        results = rerank(index, results, options.rerank_k1, options.rerank_k2, options.rerank_lambda)

    usable = [r for r in results if r.num_relevant > 0]
    skipped = len(results) - len(usable)
    max_rank = min(options.max_rank, index.size)
    curve = cmc(usable, max_rank=max_rank)
    aps = [average_precision(r) for r in usable]

    test_desc = np.concatenate([gallery_desc, np.stack(query_desc)])
    test_ids = np.concatenate([gallery_ids, np.array([s.identity for s in split.query])])
    intra, inter = distance_study(test_desc, test_ids)

    def at(k: int) -> float:
        return float(curve[min(k, max_rank) - 1])

    return EvalReport(
        cmc=tuple(float(v) for v in curve),
        rank1=at(1),
        rank5=at(5),
        rank10=at(10),
        map=float(sum(aps) / len(aps)),
        per_query_ap=tuple(aps),
        intra_mean=intra,
        inter_mean=inter,
        num_queries=len(usable),
        num_gallery=index.size,
        skipped_queries=skipped,
    )


def save_descriptor_matrix(
    path: str | Path,
    descriptors: np.ndarray,
    paths: list[str],
    identities: list[int],
    cameras: list[int],
    metric: str = "euclidean",
) -> None:
    """Binary row-major float32 matrix with a JSON sidecar of labels."""
    desc = np.ascontiguousarray(np.asarray(descriptors, dtype=np.float32))
    if desc.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    m, d = desc.shape
    if not (len(paths) == len(identities) == len(cameras) == m):
        raise ValueError("sidecar lists must match the matrix row count")
    metric_bytes = metric.encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<IIII", DESCRIPTOR_VERSION, m, d, len(metric_bytes)))
        fh.write(metric_bytes)
        fh.write(desc.tobytes())
    sidecar = {
        "paths": list(paths),
        "identities": [int(v) for v in identities],
        "cameras": [int(v) for v in cameras],
        "metric": metric,
    }
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_descriptor_matrix(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DESCRIPTOR_MAGIC:
            raise ValueError(f"{path}: not a descriptor matrix file")
        version, m, d, metric_len = struct.unpack("<IIII", fh.read(16))
        if version != DESCRIPTOR_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        metric = fh.read(metric_len).decode("utf-8")
        data = np.frombuffer(fh.read(m * d * 4), dtype="<f4").reshape(m, d).copy()
    with open(path.with_suffix(path.suffix + ".json"), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    sidecar["metric"] = metric
    return data, sidecar
