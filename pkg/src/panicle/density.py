"""Regression targets built from dot and region annotations.

Dot and region targets carry exactly one unit of mass per annotated panicle;
mass clipped away by the blur at image borders is restored by renormalizing
each instance's contribution, so the target total always equals the count.
The detection target is a smoothed foreground indicator in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationError, ParameterError, ShapeError
from .grid import PixelCoord, RasterGrid, dihedral_transform_point, gaussian_blur, gaussian_kernel_1d
from .slic import SuperpixelMap

DEFAULT_SIGMA_DOT = 6.0
DEFAULT_SIGMA_REGION = 2.0
DEFAULT_SIGMA_DET = 2.0

MODES = ("dot", "region")
LEVELS = ("small", "medium", "large")


@dataclass
class AnnotationSet:
    """Per-image annotation: dot coordinates or per-instance superpixel sets."""

    image_id: str
    mode: str
    dots: list = field(default_factory=list)
    instances: list = field(default_factory=list)
    level: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"annotation mode must be one of {MODES}, got {self.mode!r}")
        if self.level is not None and self.level not in LEVELS:
            raise ParameterError(f"superpixel level must be one of {LEVELS}, got {self.level!r}")
        self.dots = [PixelCoord(int(i), int(j)) for i, j in self.dots]
        self.instances = [(int(iid), frozenset(int(s) for s in sps)) for iid, sps in self.instances]

    @property
    def count(self) -> int:
        return len(self.dots) if self.mode == "dot" else len(self.instances)

    def to_json(self) -> dict:
        return {
            "image": self.image_id,
            "mode": self.mode,
            "level": self.level,
            "dots": [[int(i), int(j)] for i, j in self.dots],
            "instances": [
                {"id": iid, "superpixels": sorted(sps)} for iid, sps in self.instances
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AnnotationSet":
        return cls(
            image_id=doc["image"],
            mode=doc["mode"],
            dots=[tuple(d) for d in doc.get("dots", [])],
            instances=[(inst["id"], inst["superpixels"]) for inst in doc.get("instances", [])],
            level=doc.get("level"),
        )


def load_annotation(path) -> AnnotationSet:
    with open(path) as fh:
        return AnnotationSet.from_json(json.load(fh))


def save_annotation(path, ann: AnnotationSet) -> None:
    with open(path, "w") as fh:
        json.dump(ann.to_json(), fh, indent=1)


@dataclass(frozen=True)
class DensityTarget:
    grid: RasterGrid
    kind: str  # dot | region | detection
    count: float


def _check_region_annotation(ann: AnnotationSet, spmap: SuperpixelMap) -> None:
    if ann.mode != "region":
        raise ParameterError(f"expected a region annotation, got mode {ann.mode!r}")
    seen = set()
    for iid, sps in ann.instances:
        if not sps:
            raise AnnotationError(f"instance {iid} has no superpixels")
        for sp in sps:
            if sp < 0 or sp >= spmap.n_superpixels:
                raise AnnotationError(f"instance {iid} references unknown superpixel {sp}")
            if sp in seen:
                raise AnnotationError(f"superpixel {sp} belongs to more than one instance")
        seen |= sps


def build_dot_density(
    ann: AnnotationSet, shape, sigma_dot: float = DEFAULT_SIGMA_DOT
) -> DensityTarget:
    """Unit Gaussian bump per dot; per-dot mass is exactly 1 even at borders."""
    if ann.mode != "dot":
        raise ParameterError(f"expected a dot annotation, got mode {ann.mode!r}")
    h, w = int(shape[0]), int(shape[1])
    kernel = gaussian_kernel_1d(sigma_dot)
    radius = len(kernel) // 2
    dens = np.zeros((h, w))
    for i, j in ann.dots:
        if not (0 <= i < h and 0 <= j < w):
            raise AnnotationError(f"dot ({i}, {j}) lies outside the {h}x{w} image")
        r0, r1 = max(0, i - radius), min(h, i + radius + 1)
        c0, c1 = max(0, j - radius), min(w, j + radius + 1)
        krow = kernel[r0 - (i - radius) : r1 - (i - radius)]
        kcol = kernel[c0 - (j - radius) : c1 - (j - radius)]
        patch = np.outer(krow, kcol)
        dens[r0:r1, c0:c1] += patch / patch.sum()
    return DensityTarget(RasterGrid.from_array(dens), "dot", float(len(ann.dots)))


def build_region_density(
    ann: AnnotationSet,
    spmap: SuperpixelMap,
    shape,
    sigma_region: float = DEFAULT_SIGMA_REGION,
) -> DensityTarget:
    """Uniform unit mass over each instance's pixels, lightly blurred.

    After blurring, each instance is rescaled back to mass exactly 1, so the
    target total equals the instance count regardless of border truncation.
    """
    _check_region_annotation(ann, spmap)
    h, w = int(shape[0]), int(shape[1])
    if spmap.shape != (h, w):
        raise ShapeError(f"superpixel map {spmap.shape} does not match target shape {(h, w)}")
    dens = np.zeros((h, w))
    for iid, sps in ann.instances:
        mask = spmap.mask(sps)
        npix = int(mask.sum())
        raw = np.where(mask, 1.0 / npix, 0.0)
        blurred = gaussian_blur(RasterGrid.from_array(raw), sigma_region).plane()
        dens += blurred / blurred.sum()
    return DensityTarget(RasterGrid.from_array(dens), "region", float(len(ann.instances)))


def build_detection_target(
    ann: AnnotationSet,
    spmap: SuperpixelMap,
    shape,
    sigma_det: float = DEFAULT_SIGMA_DET,
) -> DensityTarget:
    """Smoothed binary foreground indicator of all panicle pixels, in [0, 1]."""
    _check_region_annotation(ann, spmap)
    h, w = int(shape[0]), int(shape[1])
    if spmap.shape != (h, w):
        raise ShapeError(f"superpixel map {spmap.shape} does not match target shape {(h, w)}")
    mask = np.zeros((h, w), dtype=bool)
    for _, sps in ann.instances:
        mask |= spmap.mask(sps)
    blurred = gaussian_blur(RasterGrid.from_array(mask.astype(np.float64)), sigma_det).plane()
    smooth = np.clip(blurred, 0.0, 1.0)
    return DensityTarget(RasterGrid.from_array(smooth), "detection", float(len(ann.instances)))


def transform_dot_annotation(ann: AnnotationSet, shape, element: int) -> AnnotationSet:
    """Move every dot the way dihedral_transform moves its pixel."""
    if ann.mode != "dot":
        raise ParameterError("only dot annotations transform independently of a superpixel map")
    dots = [dihedral_transform_point(d, shape, element) for d in ann.dots]
    return AnnotationSet(ann.image_id, "dot", dots=dots, level=ann.level)
