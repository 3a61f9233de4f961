"""Superpixel detection and density-aware greedy instance segmentation.

Detection thresholds each superpixel on its mean predicted probability.
Segmentation starts from singleton clusters and greedily merges adjacent
pairs while the merge lowers total fitness, where a cluster's fitness
penalizes color/coordinate variance and deviation of its density mass
from one instance's worth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .grid import RasterGrid, nearest_upsample
from .slic import SuperpixelMap, adjacency

DEFAULT_GAMMA = 10.0
DEFAULT_DELTA = 46775.0
DEFAULT_BETA = 1.0

N_FEATURES = 5  # gamma*i, gamma*j, red, green, blue


@dataclass(frozen=True)
class FitnessParams:
    """Weights of the cluster fitness f = n * (delta*(d - beta)^2 + var)."""

    gamma: float = DEFAULT_GAMMA
    delta: float = DEFAULT_DELTA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.gamma <= 0 or self.delta <= 0 or self.beta <= 0:
            raise ParameterError("gamma, delta, and beta must be positive")


@dataclass(frozen=True)
class PanicleSuperpixels:
    """Superpixels whose mean detection probability cleared the threshold."""

    ids: frozenset
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "ids", frozenset(int(i) for i in self.ids))


@dataclass(frozen=True)
class ClusterAssignment:
    """Superpixel ID -> cluster ID; cluster IDs are IDs of member superpixels."""

    assignment: dict = field(default_factory=dict)

    def __post_init__(self):
        mapping = {int(s): int(c) for s, c in self.assignment.items()}
        object.__setattr__(self, "assignment", mapping)
        for cid, members in self.clusters().items():
            if cid not in members:
                raise ParameterError(f"cluster id {cid} is not one of its members")

    def clusters(self) -> dict:
        out = {}
        for sp, cid in self.assignment.items():
            out.setdefault(cid, set()).add(sp)
        return {cid: frozenset(m) for cid, m in out.items()}

    @property
    def n_clusters(self) -> int:
        return len(set(self.assignment.values()))


def upsample_detection(pred: RasterGrid, shape, factor: int) -> RasterGrid:
    """Nearest-upsample a pooled detection map to image resolution, clipped to [0,1]."""
    up = nearest_upsample(pred, factor)
    h, w = shape
    if up.height < h or up.width < w:
        raise ShapeError("upsampled map is smaller than the requested shape")
    return RasterGrid(np.clip(up.data[:h, :w, :], 0.0, 1.0))


def upsample_density(pred: RasterGrid, shape, factor: int) -> RasterGrid:
    """Nearest-upsample a pooled density map, rescaled so total mass is preserved."""
    up = nearest_upsample(pred, factor)
    h, w = shape
    if up.height < h or up.width < w:
        raise ShapeError("upsampled map is smaller than the requested shape")
    return RasterGrid(up.data[:h, :w, :] / float(factor * factor))


def detect_superpixels(detection_map, spmap: SuperpixelMap, alpha: float) -> PanicleSuperpixels:
    """Superpixels whose mean detection probability is at least alpha."""
    plane = detection_map.plane(0) if isinstance(detection_map, RasterGrid) else np.asarray(detection_map, dtype=np.float64)
    if plane.shape != spmap.labels.shape:
        raise ShapeError(
            f"detection map {plane.shape} does not match superpixel map {spmap.labels.shape}"
        )
    if plane.min() < 0.0 or plane.max() > 1.0:
        raise ParameterError("detection map values must lie in [0, 1]")
    labels = spmap.labels.ravel()
    sums = np.bincount(labels, weights=plane.ravel(), minlength=spmap.n_superpixels)
    counts = np.bincount(labels, minlength=spmap.n_superpixels)
    means = sums / counts
    ids = frozenset(int(i) for i in np.flatnonzero(means >= alpha))
    return PanicleSuperpixels(ids=ids, alpha=alpha)


def _feature_planes(image, spmap: SuperpixelMap, gamma: float) -> np.ndarray:
    img = image.data if isinstance(image, RasterGrid) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("image must be H x W x 3 (RGB in 0-255)")
    if img.shape[:2] != spmap.labels.shape:
        raise ShapeError("image and superpixel map shapes differ")
    h, w = spmap.labels.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([gamma * ii, gamma * jj, img[:, :, 0], img[:, :, 1], img[:, :, 2]], axis=-1)


def _superpixel_stats(image, spmap: SuperpixelMap, density, gamma: float):
    """Per-superpixel sufficient statistics: pixel count, feature sums and
    squared sums, and density mass.  Cluster fitness of any union follows in
    O(1) from their sums."""
    feats = _feature_planes(image, spmap, gamma).reshape(-1, N_FEATURES)
    dens = density.plane(0) if isinstance(density, RasterGrid) else np.asarray(density, dtype=np.float64)
    if dens.shape != spmap.labels.shape:
        raise ShapeError("density map and superpixel map shapes differ")
    labels = spmap.labels.ravel()
    k = spmap.n_superpixels
    n = np.bincount(labels, minlength=k).astype(np.float64)
    s = np.empty((k, N_FEATURES))
    q = np.empty((k, N_FEATURES))
    for dim in range(N_FEATURES):
        s[:, dim] = np.bincount(labels, weights=feats[:, dim], minlength=k)
        q[:, dim] = np.bincount(labels, weights=feats[:, dim] ** 2, minlength=k)
    d = np.bincount(labels, weights=dens.ravel(), minlength=k)
    return n, s, q, d


def _fitness_from_stats(n, s, q, d, params: FitnessParams):
    """Vectorized fitness for stacked cluster statistics."""
    mean = s / n[..., None]
    var = (q / n[..., None] - mean**2).sum(axis=-1)
    var = np.maximum(var, 0.0)
    return n * (params.delta * (d - params.beta) ** 2 + var)


def cluster_fitness(cluster, image, spmap: SuperpixelMap, region_density, params: FitnessParams | None = None) -> float:
    """Fitness n*(delta*(d-beta)^2 + var) of one superpixel cluster.

    var sums the per-dimension population variances of the five per-pixel
    features [gamma*i, gamma*j, R, G, B]; d is the cluster's density mass.
    """
    params = params or FitnessParams()
    ids = sorted(int(c) for c in cluster)
    if not ids:
        raise ParameterError("cluster must contain at least one superpixel")
    n, s, q, d = _superpixel_stats(image, spmap, region_density, params.gamma)
    idx = np.array(ids)
    return float(
        _fitness_from_stats(n[idx].sum(), s[idx].sum(axis=0), q[idx].sum(axis=0), d[idx].sum(), params)
    )


def connected_components_segmentation(detected: PanicleSuperpixels, spmap: SuperpixelMap) -> ClusterAssignment:
    """Clusters = connected components of the detected set; each keeps its
    smallest member's ID."""
    ids = sorted(detected.ids)
    if not ids:
        return ClusterAssignment({})
    inside = set(ids)
    neighbors = {i: set() for i in ids}
    for a, b in adjacency(spmap):
        if a in inside and b in inside:
            neighbors[a].add(b)
            neighbors[b].add(a)
    assignment = {}
    seen = set()
    for root in ids:
        if root in seen:
            continue
        stack = [root]
        seen.add(root)
        component = []
        while stack:
            cur = stack.pop()
            component.append(cur)
            for nxt in neighbors[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        cid = min(component)
        for sp in component:
            assignment[sp] = cid
    return ClusterAssignment(assignment)


def segment_instances(
    detected: PanicleSuperpixels,
    image,
    spmap: SuperpixelMap,
    region_density,
    params: FitnessParams | None = None,
) -> ClusterAssignment:
    """Greedy bottom-up clustering of detected superpixels.

    Starts from singletons and repeatedly merges the adjacent cluster pair
    with the most negative fitness change, stopping when no merge lowers
    total fitness.  Ties break on the smallest (id1, id2) pair and the
    merged cluster keeps the first ID.
    """
    params = params or FitnessParams()
    ids = sorted(detected.ids)
    if not ids:
        return ClusterAssignment({})
    sp_n, sp_s, sp_q, sp_d = _superpixel_stats(image, spmap, region_density, params.gamma)

    # Dense cluster stats indexed by superpixel ID; inactive rows are ignored.
    k = spmap.n_superpixels
    n = sp_n.copy()
    s = sp_s.copy()
    q = sp_q.copy()
    d = sp_d.copy()
    members = {i: [i] for i in ids}

    inside = set(ids)
    edges = sorted(
        (a, b) for a, b in adjacency(spmap) if a in inside and b in inside
    )
    e1 = np.array([a for a, _ in edges], dtype=np.int64)
    e2 = np.array([b for _, b in edges], dtype=np.int64)

    while e1.size:
        f1 = _fitness_from_stats(n[e1], s[e1], q[e1], d[e1], params)
        f2 = _fitness_from_stats(n[e2], s[e2], q[e2], d[e2], params)
        fm = _fitness_from_stats(
            n[e1] + n[e2], s[e1] + s[e2], q[e1] + q[e2], d[e1] + d[e2], params
        )
        delta_f = fm - f1 - f2
        order = np.lexsort((e2, e1, delta_f))
        best = order[0]
        if not delta_f[best] < 0.0:
            break
        c1 = int(e1[best])
        c2 = int(e2[best])
        n[c1] += n[c2]
        s[c1] += s[c2]
        q[c1] += q[c2]
        d[c1] += d[c2]
        members[c1].extend(members.pop(c2))
        # Re-point edges at the surviving cluster, drop self-loops, dedupe.
        e1 = np.where(e1 == c2, c1, e1)
        e2 = np.where(e2 == c2, c1, e2)
        lo = np.minimum(e1, e2)
        hi = np.maximum(e1, e2)
        keep = lo != hi
        pairs = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
        e1 = pairs[:, 0] if pairs.size else np.empty(0, dtype=np.int64)
        e2 = pairs[:, 1] if pairs.size else np.empty(0, dtype=np.int64)

    assignment = {sp: cid for cid, mem in members.items() for sp in mem}
    return ClusterAssignment(assignment)


def instance_pixel_sets(assignment: ClusterAssignment, spmap: SuperpixelMap) -> dict:
    """Flat pixel-index set of every cluster, keyed by cluster ID."""
    lut = np.full(spmap.n_superpixels, -1, dtype=np.int64)
    for sp, cid in assignment.assignment.items():
        lut[sp] = cid
    cluster_of_pixel = lut[spmap.labels.ravel()]
    out = {}
    for cid in sorted(set(assignment.assignment.values())):
        out[cid] = frozenset(np.flatnonzero(cluster_of_pixel == cid).tolist())
    return out


def segmentation_to_json(image_id: str, assignment: ClusterAssignment, alpha: float, beta: float) -> dict:
    clusters = [
        {"id": int(cid), "superpixels": sorted(int(s) for s in mem)}
        for cid, mem in sorted(assignment.clusters().items())
    ]
    return {"image": image_id, "alpha": float(alpha), "beta": float(beta), "clusters": clusters}


def segmentation_from_json(doc: dict) -> ClusterAssignment:
    assignment = {}
    for cluster in doc["clusters"]:
        for sp in cluster["superpixels"]:
            assignment[int(sp)] = int(cluster["id"])
    return ClusterAssignment(assignment)


def save_segmentation(path, image_id: str, assignment: ClusterAssignment, alpha: float, beta: float) -> None:
    with open(path, "w") as fh:
        json.dump(segmentation_to_json(image_id, assignment, alpha, beta), fh, indent=1)
        fh.write("\n")


def load_segmentation(path) -> tuple[dict, ClusterAssignment]:
    with open(path) as fh:
        doc = json.load(fh)
    return doc, segmentation_from_json(doc)
