"""HTTP annotation service: images, superpixels, model guesses, and
revision-checked annotation writes, with density-target export.

State lives under the data directory: PNGs in images/, optional metadata
in meta.json, annotations in annotations/{level}/{id}.json.  Superpixel
maps are computed on first request and cached per (image, level).
Writes use optimistic concurrency: each accepted write increments the
annotation's revision and a stale expected revision is rejected with 409.
"""

from __future__ import annotations

import json
import os
import re
import threading

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from . import density, instseg, net, slic
from .errors import AnnotationError, PanicleError, ParameterError, ShapeError
from .grid import pdm1_bytes

_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")

DEFAULT_ALPHA = 0.4


def _check_id(image_id: str) -> str:
    if not _ID_RE.match(image_id):
        raise HTTPException(status_code=400, detail="invalid image id")
    return image_id


def _check_level(level: str) -> str:
    if level not in slic.LEVEL_SIZES:
        raise HTTPException(status_code=400, detail=f"invalid level {level!r}")
    return level


def rle_encode(labels: np.ndarray) -> list:
    """Row-major run-length encoding: [[label, run_length], ...]."""
    flat = labels.ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    return [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs: list, shape) -> np.ndarray:
    flat = np.concatenate([np.full(length, label, dtype=np.int32) for label, length in runs])
    return flat.reshape(shape)


def boundary_segments(labels: np.ndarray) -> list:
    """Unit segments [y0, x0, y1, x1] in pixel-corner coordinates separating
    differing labels; drawn as-is they trace every superpixel boundary."""
    segments = []
    vdiff = labels[:, 1:] != labels[:, :-1]
    for i, j in zip(*np.nonzero(vdiff)):
        segments.append([int(i), int(j) + 1, int(i) + 1, int(j) + 1])
    hdiff = labels[1:, :] != labels[:-1, :]
    for i, j in zip(*np.nonzero(hdiff)):
        segments.append([int(i) + 1, int(j), int(i) + 1, int(j) + 1])
    return segments


class ServiceState:
    def __init__(self, data_dir, model_path=None, default_alpha=DEFAULT_ALPHA):
        self.data_dir = data_dir
        self.default_alpha = default_alpha
        self.model = net.load_checkpoint(model_path) if model_path else None
        self.spmaps = {}
        self.lock = threading.Lock()
        self.meta = {}
        meta_path = os.path.join(data_dir, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                doc = json.load(fh)
            self.meta = {entry["id"]: entry for entry in doc.get("images", [])}

    def image_path(self, image_id: str) -> str:
        path = os.path.join(self.data_dir, "images", image_id + ".png")
        if not os.path.exists(path):
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        return path

    def list_images(self) -> list:
        img_dir = os.path.join(self.data_dir, "images")
        if not os.path.isdir(img_dir):
            return []
        ids = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png"))
        return [{"id": i, **{k: v for k, v in self.meta.get(i, {}).items() if k != "id"}} for i in ids]

    def load_rgb(self, image_id: str) -> np.ndarray:
        with Image.open(self.image_path(image_id)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64)

    def spmap(self, image_id: str, level: str) -> slic.SuperpixelMap:
        key = (image_id, level)
        with self.lock:
            cached = self.spmaps.get(key)
        if cached is not None:
            return cached
        spmap = slic.slic_segment(self.load_rgb(image_id), level=level)
        with self.lock:
            self.spmaps.setdefault(key, spmap)
            return self.spmaps[key]

    def annotation_path(self, image_id: str, level: str) -> str:
        return os.path.join(self.data_dir, "annotations", level, image_id + ".json")

    def read_annotation(self, image_id: str, level: str) -> dict:
        path = self.annotation_path(image_id, level)
        if not os.path.exists(path):
            return {"revision": 0, "annotation": None}
        with open(path) as fh:
            return json.load(fh)


def create_app(data_dir, model_path=None, default_alpha=DEFAULT_ALPHA) -> FastAPI:
    app = FastAPI(title="panicle annotation service")
    # the annotator page may be served from a different origin/port
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Annotation-Revision", "X-Target-Sum"],
    )
    state = ServiceState(data_dir, model_path=model_path, default_alpha=default_alpha)
    app.state.panicle = state

    @app.get("/images")
    def list_images():
        return {"images": state.list_images()}

    @app.get("/images/{image_id}")
    def get_image(image_id: str):
        path = state.image_path(_check_id(image_id))
        with open(path, "rb") as fh:
            return Response(content=fh.read(), media_type="image/png")

    @app.get("/images/{image_id}/superpixels")
    def get_superpixels(image_id: str, level: str = Query("small")):
        spmap = state.spmap(_check_id(image_id), _check_level(level))
        return {
            "image": image_id,
            "level": level,
            "shape": list(spmap.labels.shape),
            "n_superpixels": spmap.n_superpixels,
            "rle": rle_encode(spmap.labels),
            "boundaries": boundary_segments(spmap.labels),
        }

    @app.get("/images/{image_id}/guess")
    def get_guess(image_id: str, alpha: float | None = Query(None), level: str = Query("small")):
        if state.model is None:
            raise HTTPException(status_code=409, detail="no detection model loaded; train one and restart with --model")
        alpha = state.default_alpha if alpha is None else alpha
        if not 0.0 < alpha < 1.0:
            raise HTTPException(status_code=400, detail="alpha must lie in (0, 1)")
        rgb = state.load_rgb(_check_id(image_id))
        spmap = state.spmap(image_id, _check_level(level))
        pooled = net.predict_density(state.model, net.input_stack(rgb))
        det = instseg.upsample_detection(pooled, rgb.shape[:2], state.model.config.pool_factor)
        detected = instseg.detect_superpixels(det, spmap, alpha)
        plane = det.plane(0).ravel()
        labels = spmap.labels.ravel()
        sums = np.bincount(labels, weights=plane, minlength=spmap.n_superpixels)
        counts = np.bincount(labels, minlength=spmap.n_superpixels)
        means = sums / counts
        ids = sorted(detected.ids)
        return {
            "image": image_id,
            "level": level,
            "alpha": alpha,
            "ids": ids,
            "means": {str(i): float(means[i]) for i in ids},
        }

    @app.get("/images/{image_id}/annotation")
    def get_annotation(image_id: str, level: str = Query("small")):
        state.image_path(_check_id(image_id))
        doc = state.read_annotation(image_id, _check_level(level))
        return {"image": image_id, "level": level, **doc}

    @app.put("/images/{image_id}/annotation")
    def put_annotation(image_id: str, payload: dict = Body(...), level: str = Query("small")):
        rgb = state.load_rgb(_check_id(image_id))
        _check_level(level)
        if "annotation" not in payload or "expected_revision" not in payload:
            raise HTTPException(status_code=422, detail="body needs annotation and expected_revision")
        try:
            ann = density.AnnotationSet.from_json(payload["annotation"])
        except (PanicleError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"invalid annotation: {exc}")
        if ann.image_id != image_id:
            raise HTTPException(status_code=422, detail="annotation image id mismatch")
        try:
            if ann.mode == "region":
                spmap = state.spmap(image_id, level)
                density.build_region_density(ann, spmap, rgb.shape[:2])
            else:
                density.build_dot_density(ann, rgb.shape[:2])
        except (AnnotationError, ShapeError, ParameterError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        with state.lock:
            current = state.read_annotation(image_id, level)
            if int(payload["expected_revision"]) != current["revision"]:
                raise HTTPException(
                    status_code=409,
                    detail=f"revision conflict: expected {current['revision']}",
                )
            revision = current["revision"] + 1
            path = state.annotation_path(image_id, level)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tmp = path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump({"revision": revision, "annotation": ann.to_json()}, fh, indent=1)
                fh.write("\n")
            os.replace(tmp, path)
        return {"image": image_id, "level": level, "revision": revision}

    @app.get("/images/{image_id}/export")
    def export_target(image_id: str, level: str = Query("small"), kind: str = Query("density")):
        rgb = state.load_rgb(_check_id(image_id))
        doc = state.read_annotation(image_id, _check_level(level))
        if doc["annotation"] is None:
            raise HTTPException(status_code=404, detail="no annotation stored")
        ann = density.AnnotationSet.from_json(doc["annotation"])
        if kind not in ("density", "detection"):
            raise HTTPException(status_code=400, detail="kind must be density or detection")
        if ann.mode == "region":
            spmap = state.spmap(image_id, level)
            if kind == "detection":
                target = density.build_detection_target(ann, spmap, rgb.shape[:2])
            else:
                target = density.build_region_density(ann, spmap, rgb.shape[:2])
        else:
            if kind == "detection":
                raise HTTPException(status_code=400, detail="detection export needs a region annotation")
            target = density.build_dot_density(ann, rgb.shape[:2])
        return Response(
            content=pdm1_bytes(target.grid),
            media_type="application/octet-stream",
            headers={"X-Annotation-Revision": str(doc["revision"]), "X-Target-Sum": f"{target.grid.total:.9f}"},
        )

    return app
