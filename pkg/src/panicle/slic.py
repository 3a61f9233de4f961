"""SLIC superpixels at the three annotation granularities.

Localized k-means over (weighted row, weighted col, R, G, B) features with
seeds on a regular grid, followed by a connectivity cleanup that folds small
fragments into their largest neighbour.  Colors are used as-is (RGB, 0-255);
the clustering stage downstream uses the same feature space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import ParameterError, ShapeError
from .grid import RasterGrid, read_pdm1, write_pdm1

LEVEL_SIZES = {"small": 30, "medium": 60, "large": 110}

DEFAULT_COMPACTNESS = 10.0
DEFAULT_ITERS = 10


@dataclass(frozen=True)
class SuperpixelMap:
    """Partition of an image into 4-connected superpixels, labels 0..n-1."""

    labels: np.ndarray
    n_superpixels: int
    level: str | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"superpixel labels must be 2-d, got shape {labels.shape}")
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        if labels.size == 0:
            raise ShapeError("superpixel map must be non-empty")
        if labels.min() < 0 or labels.max() >= self.n_superpixels:
            raise ParameterError("superpixel labels must lie in [0, n_superpixels)")
        counts = np.bincount(labels.ravel(), minlength=self.n_superpixels)
        if (counts == 0).any():
            raise ParameterError("every superpixel label must be non-empty")
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self):
        return self.labels.shape

    def pixel_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_superpixels)

    def mask(self, superpixel_ids) -> np.ndarray:
        """Boolean mask of all pixels belonging to the given superpixels."""
        ids = np.asarray(sorted(superpixel_ids), dtype=np.int64)
        if ids.size == 0:
            return np.zeros(self.labels.shape, dtype=bool)
        if ids.min() < 0 or ids.max() >= self.n_superpixels:
            raise ParameterError("superpixel id out of range")
        lut = np.zeros(self.n_superpixels, dtype=bool)
        lut[ids] = True
        return lut[self.labels]


def _seed_grid(h: int, w: int, k: int):
    """Regular grid of k-ish seed centers, rows x cols chosen to match k."""
    step = math.sqrt(h * w / k)
    best = None
    for ny in {max(1, math.floor(h / step)), max(1, math.ceil(h / step))}:
        for nx in {max(1, math.floor(w / step)), max(1, math.ceil(w / step)), max(1, round(k / ny))}:
            score = abs(ny * nx - k)
            if best is None or score < best[0] or (score == best[0] and (ny, nx) < best[1:]):
                best = (score, ny, nx)
    _, ny, nx = best
    ci = (np.arange(ny) + 0.5) * h / ny
    cj = (np.arange(nx) + 0.5) * w / nx
    ii, jj = np.meshgrid(ci, cj, indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1), step


def _label_components(labels: np.ndarray):
    """4-connected components of a label map as consecutive component ids."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    rows = []
    cols = []
    same = labels[:, :-1] == labels[:, 1:]
    rows.append(idx[:, :-1][same])
    cols.append(idx[:, 1:][same])
    same = labels[:-1, :] == labels[1:, :]
    rows.append(idx[:-1, :][same])
    cols.append(idx[1:, :][same])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = sparse.coo_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w)
    )
    ncomp, comp = connected_components(graph, directed=False)
    return comp.reshape(h, w).astype(np.int64), ncomp


def _merge_fragments(comp: np.ndarray, min_area: float):
    """Union-find merge of components below min_area into their largest neighbour."""
    ncomp = int(comp.max()) + 1
    area = np.bincount(comp.ravel(), minlength=ncomp).astype(np.int64)

    pairs = set()
    a, b = comp[:, :-1], comp[:, 1:]
    diff = a != b
    pairs.update(zip(a[diff].tolist(), b[diff].tolist()))
    a, b = comp[:-1, :], comp[1:, :]
    diff = a != b
    pairs.update(zip(a[diff].tolist(), b[diff].tolist()))
    neighbours = [set() for _ in range(ncomp)]
    for x, y in pairs:
        neighbours[x].add(y)
        neighbours[y].add(x)

    parent = np.arange(ncomp)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    changed = True
    while changed:
        changed = False
        roots = [r for r in range(ncomp) if find(r) == r]
        for r in sorted(roots, key=lambda r: (area[r], r)):
            if find(r) != r or area[r] >= min_area:
                continue
            cand = {find(n) for n in neighbours[r]} - {r}
            if not cand:
                continue
            target = max(cand, key=lambda c: (area[c], -c))
            parent[r] = target
            area[target] += area[r]
            neighbours[target] |= neighbours[r]
            changed = True

    root = np.array([find(r) for r in range(ncomp)])
    return root[comp]


def slic_segment(
    image,
    target_size: float | None = None,
    compactness: float = DEFAULT_COMPACTNESS,
    iters: int = DEFAULT_ITERS,
    level: str | None = None,
) -> SuperpixelMap:
    """Segment a 3-channel image into superpixels of roughly target_size pixels.

    target_size may be omitted when level names one of the canonical sizes.
    """
    if not isinstance(image, RasterGrid):
        image = RasterGrid.from_array(np.asarray(image, dtype=np.float64))
    if image.channels != 3:
        raise ShapeError(f"slic_segment expects a 3-channel image, got {image.channels}")
    if target_size is None:
        if level not in LEVEL_SIZES:
            raise ParameterError("pass target_size or a canonical level name")
        target_size = LEVEL_SIZES[level]
    if target_size <= 0:
        raise ParameterError(f"target_size must be positive, got {target_size}")
    h, w = image.height, image.width
    if h * w < target_size:
        raise ShapeError(f"image {h}x{w} is smaller than one seed cell ({target_size} px)")

    k = math.ceil(h * w / target_size)
    centers_xy, step = _seed_grid(h, w, k)
    nseeds = len(centers_xy)
    color = image.data
    spatial_w = compactness / step

    ii = np.arange(h, dtype=np.float64)
    jj = np.arange(w, dtype=np.float64)
    center_color = np.empty((nseeds, 3))
    for t, (ci, cj) in enumerate(centers_xy):
        center_color[t] = color[min(h - 1, int(ci)), min(w - 1, int(cj))]
    centers = np.concatenate([centers_xy, center_color], axis=1)

    reach = int(math.ceil(2 * step))
    labels = np.full((h, w), -1, dtype=np.int64)
    grid_i, grid_j = np.meshgrid(ii, jj, indexing="ij")
    for _ in range(iters):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for t in range(nseeds):
            ci, cj = centers[t, 0], centers[t, 1]
            i0, i1 = max(0, int(ci) - reach), min(h, int(ci) + reach + 1)
            j0, j1 = max(0, int(cj) - reach), min(w, int(cj) + reach + 1)
            if i0 >= i1 or j0 >= j1:
                continue
            di = (ii[i0:i1] - ci) * spatial_w
            dj = (jj[j0:j1] - cj) * spatial_w
            dc = color[i0:i1, j0:j1] - centers[t, 2:]
            dist = di[:, None] ** 2 + dj[None, :] ** 2 + (dc**2).sum(axis=2)
            window = best[i0:i1, j0:j1]
            closer = dist < window
            window[closer] = dist[closer]
            labels[i0:i1, j0:j1][closer] = t

        stray = labels < 0
        if stray.any():
            si, sj = np.nonzero(stray)
            feats = np.concatenate(
                [si[:, None] * spatial_w, sj[:, None] * spatial_w, color[si, sj]], axis=1
            )
            scaled = centers.copy()
            scaled[:, :2] *= spatial_w
            d2 = ((feats[:, None, :] - scaled[None, :, :]) ** 2).sum(axis=2)
            labels[si, sj] = d2.argmin(axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=nseeds).astype(np.float64)
        occupied = counts > 0
        sums = np.zeros((nseeds, 5))
        sums[:, 0] = np.bincount(flat, weights=grid_i.ravel(), minlength=nseeds)
        sums[:, 1] = np.bincount(flat, weights=grid_j.ravel(), minlength=nseeds)
        for c in range(3):
            sums[:, 2 + c] = np.bincount(flat, weights=color[:, :, c].ravel(), minlength=nseeds)
        centers[occupied] = sums[occupied] / counts[occupied, None]

    comp, _ = _label_components(labels)
    comp = _merge_fragments(comp, target_size / 4.0)
    vals, first_idx = np.unique(comp.ravel(), return_index=True)
    rank = np.argsort(first_idx)
    order = np.empty(int(vals.max()) + 1, dtype=np.int64)
    order[vals[rank]] = np.arange(len(vals))
    final = order[comp]
    return SuperpixelMap(final, int(len(vals)), level=level)


def adjacency(spmap: SuperpixelMap) -> set[tuple[int, int]]:
    """Pairs (a, b), a < b, of superpixels sharing a 4-adjacent pixel boundary."""
    labels = spmap.labels
    pairs = set()
    left, right = labels[:, :-1], labels[:, 1:]
    diff = left != right
    lo = np.minimum(left[diff], right[diff])
    hi = np.maximum(left[diff], right[diff])
    pairs.update(zip(lo.tolist(), hi.tolist()))
    up, down = labels[:-1, :], labels[1:, :]
    diff = up != down
    lo = np.minimum(up[diff], down[diff])
    hi = np.maximum(up[diff], down[diff])
    pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def save_superpixels(path, spmap: SuperpixelMap) -> None:
    """Persist a superpixel map as PDM1 labels plus a JSON sidecar."""
    write_pdm1(path, RasterGrid.from_array(spmap.labels.astype(np.float64)))
    sidecar = {"n_superpixels": spmap.n_superpixels, "level": spmap.level}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh)


def load_superpixels(path) -> SuperpixelMap:
    grid = read_pdm1(path)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    labels = np.rint(grid.plane()).astype(np.int32)
    return SuperpixelMap(labels, int(sidecar["n_superpixels"]), sidecar.get("level"))
