"""Deterministic synthetic blob datasets for end-to-end experiments.

Renders textured elliptical blobs on a textured background with exact
per-pixel ownership, dot annotations at blob centers, a daily weather
table, and per-image thermal-time metadata.  Everything derives from one
integer seed, so reruns are byte-identical.
"""

from __future__ import annotations

import datetime
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from .density import AnnotationSet, save_annotation
from .errors import ParameterError
from .grid import PixelCoord, RasterGrid, write_pdm1
from .slic import SuperpixelMap
from .thermal import WeatherSeries, compute_gdd, save_weather_csv

BACKGROUND_RGB = (34.0, 85.0, 35.0)
BLOB_RGB = (190.0, 170.0, 90.0)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator; defaults match the counting benchmark."""

    width: int = 128
    height: int = 128
    min_blobs: int = 5
    max_blobs: int = 20
    min_radius: float = 5.0
    max_radius: float = 10.0
    max_overlap: float = 0.1  # max pairwise |A∩B| / min(|A|,|B|)
    placement_tries: int = 40
    background_noise: float = 6.0
    blob_noise: float = 6.0
    n_segments: int = 8

    def __post_init__(self):
        if self.min_blobs < 0 or self.max_blobs < self.min_blobs:
            raise ParameterError("blob count range is invalid")
        if self.min_radius <= 0 or self.max_radius < self.min_radius:
            raise ParameterError("blob radius range is invalid")
        if not 0.0 <= self.max_overlap <= 1.0:
            raise ParameterError("max_overlap must lie in [0, 1]")


@dataclass
class SynthImage:
    """One rendered image plus its ground truth."""

    image_id: str
    rgb: np.ndarray  # H x W x 3 uint8
    owner: np.ndarray  # H x W int32, -1 background, else blob index
    dots: list  # PixelCoord blob centers, one per placed blob
    count: int


def _ellipse_mask(h, w, cy, cx, a, b, theta):
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    di = ii - cy
    dj = jj - cx
    u = di * np.cos(theta) + dj * np.sin(theta)
    v = -di * np.sin(theta) + dj * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_image(config: SynthConfig, rng: np.random.Generator, image_id: str) -> SynthImage:
    """Render one image: textured background, then blobs in placement order."""
    h, w = config.height, config.width
    img = np.empty((h, w, 3), dtype=np.float64)
    rows = np.linspace(-10.0, 10.0, h)[:, None]
    for c, base in enumerate(BACKGROUND_RGB):
        img[:, :, c] = base + rows + rng.normal(0.0, config.background_noise, size=(h, w))

    n_requested = int(rng.integers(config.min_blobs, config.max_blobs + 1))
    owner = np.full((h, w), -1, dtype=np.int32)
    masks = []
    dots = []
    placed = 0
    for _ in range(n_requested):
        for _attempt in range(config.placement_tries):
            a = rng.uniform(config.min_radius, config.max_radius)
            b = rng.uniform(config.min_radius, config.max_radius)
            theta = rng.uniform(0.0, np.pi)
            margin = max(a, b)
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            mask = _ellipse_mask(h, w, cy, cx, a, b, theta)
            area = int(mask.sum())
            if area == 0:
                continue
            ok = True
            for other in masks:
                inter = int(np.count_nonzero(mask & other))
                if inter / min(area, int(other.sum())) > config.max_overlap:
                    ok = False
                    break
            if ok:
                jitter = rng.normal(0.0, 18.0, size=3)
                noise = rng.normal(0.0, config.blob_noise, size=(h, w, 3))
                color = np.array(BLOB_RGB) + jitter
                img[mask] = color + noise[mask]
                owner[mask] = placed
                masks.append(mask)
                dots.append(PixelCoord(int(round(cy)), int(round(cx))))
                placed += 1
                break
    rgb = np.clip(img, 0.0, 255.0).round().astype(np.uint8)
    return SynthImage(image_id=image_id, rgb=rgb, owner=owner, dots=dots, count=placed)


def synthetic_weather(seed: int, start: datetime.date, n_days: int) -> WeatherSeries:
    """Smooth seasonal temperature table with mild day-to-day noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    phase = np.arange(n_days) / 120.0 * np.pi
    tmin = 58.0 + 8.0 * np.sin(phase) + rng.normal(0.0, 1.5, n_days)
    tmax = tmin + 15.0 + rng.normal(0.0, 2.0, n_days)
    return WeatherSeries(
        tuple(
            (start + datetime.timedelta(days=i), float(tmin[i]), float(tmax[i]))
            for i in range(n_days)
        )
    )


def generate_dataset(
    root,
    config: SynthConfig,
    seed: int,
    n_train: int,
    n_test: int,
) -> dict:
    """Write the full dataset layout under root and return its manifest.

    Layout: images/{id}.png, owner/{id}.pdm1 (per-pixel blob index as one
    float channel), ann_dot/{id}.json, weather.csv, meta.json.
    """
    n_total = n_train + n_test
    ss = np.random.SeedSequence(entropy=seed)
    children = ss.spawn(n_total)
    planting = datetime.date(2021, 5, 15)
    n_rounds = (n_total + config.n_segments - 1) // config.n_segments
    weather = synthetic_weather(seed, planting, 30 + 3 * n_rounds + 2)

    for sub in ("images", "owner", "ann_dot"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    save_weather_csv(os.path.join(root, "weather.csv"), weather)

    entries = []
    for i in range(n_total):
        image_id = f"img{i:04d}"
        rng = np.random.default_rng(children[i])
        sample = render_image(config, rng, image_id)
        Image.fromarray(sample.rgb).save(os.path.join(root, "images", image_id + ".png"))
        write_pdm1(
            os.path.join(root, "owner", image_id + ".pdm1"),
            RasterGrid.from_array(sample.owner.astype(np.float64)),
        )
        ann = AnnotationSet(image_id=image_id, mode="dot", dots=list(sample.dots))
        save_annotation(os.path.join(root, "ann_dot", image_id + ".json"), ann)
        segment = i % config.n_segments
        date = planting + datetime.timedelta(days=30 + 3 * (i // config.n_segments))
        gdd = compute_gdd(weather, planting, date).gdd
        entries.append(
            {
                "id": image_id,
                "split": "train" if i < n_train else "test",
                "count": sample.count,
                "segment": segment,
                "date": date.isoformat(),
                "gdd": gdd,
            }
        )
    manifest = {
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "planting": planting.isoformat(),
        "config": asdict(config),
        "images": entries,
    }
    with open(os.path.join(root, "meta.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_owner(path) -> np.ndarray:
    from .grid import read_pdm1

    return read_pdm1(path).plane(0).astype(np.int32)


def owner_instance_sets(owner: np.ndarray) -> dict:
    """Truth pixel-index sets per blob from the ownership map."""
    flat = owner.ravel()
    out = {}
    for blob in range(flat.max() + 1):
        pixels = np.flatnonzero(flat == blob)
        if pixels.size:
            out[int(blob)] = frozenset(pixels.tolist())
    return out


def region_annotation_from_owner(
    owner: np.ndarray, spmap: SuperpixelMap, image_id: str, level: str, min_cover: float = 0.5
) -> AnnotationSet:
    """Region annotation: each superpixel joins the blob covering most of it,
    provided that blob covers at least min_cover of the superpixel."""
    if owner.shape != spmap.labels.shape:
        raise ParameterError("owner map and superpixel map shapes differ")
    labels = spmap.labels.ravel()
    flat = owner.ravel()
    k = spmap.n_superpixels
    n_blobs = int(flat.max()) + 1
    sizes = np.bincount(labels, minlength=k).astype(np.float64)
    instances = {}
    if n_blobs > 0:
        cover = np.zeros((k, n_blobs))
        on = flat >= 0
        np.add.at(cover, (labels[on], flat[on]), 1.0)
        best = cover.argmax(axis=1)
        frac = cover[np.arange(k), best] / sizes
        for sp in range(k):
            if frac[sp] >= min_cover:
                instances.setdefault(int(best[sp]), set()).add(sp)
    inst_list = [(blob, frozenset(sps)) for blob, sps in sorted(instances.items())]
    return AnnotationSet(image_id=image_id, mode="region", instances=inst_list, level=level)
