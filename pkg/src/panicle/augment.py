"""Eight-fold dihedral augmentation for training and test-time ensembling."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .grid import (
    RasterGrid,
    dihedral_transform_array,
    sum_pool,
)
from . import net as cnn

N_DIHEDRAL = 8


def augment_pair(image, target, element: int):
    """Apply one dihedral element jointly to an image and its target map."""
    img = image.data if isinstance(image, RasterGrid) else np.asarray(image)
    tgt = target.data if isinstance(target, RasterGrid) else np.asarray(target)
    return (
        dihedral_transform_array(img, element),
        dihedral_transform_array(tgt, element),
    )


def augment_dataset(pairs: list) -> list:
    """Expand (image, target) pairs by all eight dihedral elements.

    Output order is pair-major: all eight views of the first pair, then the
    next.  An n-pair input yields exactly 8n pairs.
    """
    out = []
    for image, target in pairs:
        for element in range(N_DIHEDRAL):
            out.append(augment_pair(image, target, element))
    return out


def tta_predictions(model, image) -> np.ndarray:
    """Per-element predicted counts over all eight dihedral views."""
    img = image.data if isinstance(image, RasterGrid) else np.asarray(image)
    counts = np.empty(N_DIHEDRAL, dtype=np.float64)
    for element in range(N_DIHEDRAL):
        view = dihedral_transform_array(img, element)
        counts[element] = cnn.predict_count(model, view)
    return counts


def tta_count(model, image, reduce: str = "median") -> float:
    """Ensembled count over the eight dihedral views (median by default)."""
    counts = tta_predictions(model, image)
    if reduce == "median":
        return float(np.median(counts))
    if reduce == "mean":
        return float(np.mean(counts))
    raise ParameterError(f"unknown reduction {reduce!r}")


def pooled_target(target, factor: int) -> RasterGrid:
    """Sum-pool a full-resolution target down to the network output grid."""
    grid = target if isinstance(target, RasterGrid) else RasterGrid.from_array(target)
    return sum_pool(grid, factor)
