"""Small convolutional density regressor: forward, backprop, and training.

Every layer is a same-padded convolution followed by batch norm and ReLU,
except the last, which is a plain linear convolution.  Optional 2x2 max
pools sit in front of selected layers, so the predicted map is the input
down-sampled by 2 per pool (4x for the canonical two-pool configs).
Implemented directly on numpy arrays (NHWC) with im2col convolutions;
training is plain SGD with momentum and is deterministic given its seed.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ParameterError, ShapeError, TrainingError
from .grid import RasterGrid

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Layer widths, kernel sizes, and pool placement (0-based layer indices).

    target_scale is the factor training targets were multiplied by; predicted
    densities and counts are divided by it, so callers always see true counts.
    """

    dims: tuple
    kernels: tuple
    pool_before: frozenset = frozenset()
    input_channels: int = 3
    target_scale: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        kernels = tuple(int(k) for k in self.kernels)
        pools = frozenset(int(p) for p in self.pool_before)
        if len(dims) != len(kernels):
            raise ParameterError("dims and kernels must have the same length")
        if not dims or dims[-1] != 1:
            raise ParameterError("the final layer must have a single output channel")
        if any(d < 1 for d in dims):
            raise ParameterError("layer widths must be positive")
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ParameterError("kernel sizes must be odd and positive")
        if any(p < 0 or p >= len(dims) for p in pools):
            raise ParameterError("pool indices must name existing layers")
        if self.input_channels < 1:
            raise ParameterError("input_channels must be positive")
        if self.target_scale <= 0:
            raise ParameterError("target_scale must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "pool_before", pools)

    @property
    def n_layers(self) -> int:
        return len(self.dims)

    @property
    def pool_factor(self) -> int:
        return 2 ** len(self.pool_before)

    def layer_channels(self, layer: int) -> tuple[int, int]:
        cin = self.input_channels if layer == 0 else self.dims[layer - 1]
        return cin, self.dims[layer]

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "kernels": list(self.kernels),
            "pool_before": sorted(self.pool_before),
            "input_channels": self.input_channels,
            "target_scale": self.target_scale,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetConfig":
        return cls(
            dims=tuple(doc["dims"]),
            kernels=tuple(doc["kernels"]),
            pool_before=frozenset(doc["pool_before"]),
            input_channels=int(doc["input_channels"]),
            target_scale=float(doc.get("target_scale", 1.0)),
        )


def tuned_config(input_channels: int = 3, width_scale: float = 1.0, target_scale: float = 1.0) -> NetConfig:
    """The tuned 8-layer regressor; two pools, before the 2nd and 3rd layers."""
    dims = [20, 40, 100, 400, 800, 1500, 100, 1]
    if width_scale != 1.0:
        dims = [max(1, round(d * width_scale)) for d in dims[:-1]] + [1]
    return NetConfig(
        dims=tuple(dims),
        kernels=(13, 9, 5, 5, 5, 3, 1, 1),
        pool_before=frozenset({1, 2}),
        input_channels=input_channels,
        target_scale=target_scale,
    )


def ccnn_config(input_channels: int = 3, target_scale: float = 1.0) -> NetConfig:
    """The 6-layer counting-CNN baseline, same two-pool placement."""
    return NetConfig(
        dims=(32, 32, 32, 1000, 400, 1),
        kernels=(7, 7, 3, 1, 1, 1),
        pool_before=frozenset({1, 2}),
        input_channels=input_channels,
        target_scale=target_scale,
    )


@dataclass
class ModelState:
    """All learnable tensors plus batch-norm running statistics."""

    config: NetConfig
    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    bn_mean: list
    bn_var: list
    seed: int = 0
    step: int = 0
    loss_trace: list = field(default_factory=list)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def named_params(self):
        """(name, array) pairs in declaration order; views, not copies."""
        out = []
        for l in range(self.config.n_layers):
            out.append((f"layer{l}.weight", self.weights[l]))
            out.append((f"layer{l}.bias", self.biases[l]))
            if self.bn_scale[l] is not None:
                out.append((f"layer{l}.bn_scale", self.bn_scale[l]))
                out.append((f"layer{l}.bn_shift", self.bn_shift[l]))
        return out

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


def init_model(config: NetConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """He-initialized hidden weights, zero-initialized regression head."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights, biases, scales, shifts, means, variances = [], [], [], [], [], []
    last = config.n_layers - 1
    for l in range(config.n_layers):
        cin, cout = config.layer_channels(l)
        k = config.kernels[l]
        fan_in = k * k * cin
        if l == last:
            w = np.zeros((k, k, cin, cout))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, cin, cout))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
        if l < last:
            scales.append(np.ones(cout, dtype=dtype))
            shifts.append(np.zeros(cout, dtype=dtype))
            means.append(np.zeros(cout, dtype=dtype))
            variances.append(np.ones(cout, dtype=dtype))
        else:
            scales.append(None)
            shifts.append(None)
            means.append(None)
            variances.append(None)
    return ModelState(config, weights, biases, scales, shifts, means, variances, seed=seed)


def _as_hwc(x, channels: int) -> np.ndarray:
    arr = x.data if isinstance(x, RasterGrid) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an H x W x C input, got shape {arr.shape}")
    if arr.shape[2] != channels:
        raise ShapeError(f"model expects {channels} input channels, got {arr.shape[2]}")
    return arr


# Above this column-matrix size the im2col gather is slower than summing
# shifted slices, so large-kernel low-channel layers take the shift path.
_SHIFT_PATH_COLS = 32_000_000


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, cin = x.shape
    if k == 1:
        return x.reshape(n * h * w, cin)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, cin, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * cin)


def _use_shift_path(x_shape, k: int) -> bool:
    n, h, w, cin = x_shape
    return k > 1 and n * h * w * k * k * cin > _SHIFT_PATH_COLS


def _col2im(dcols: np.ndarray, x_shape, k: int) -> np.ndarray:
    n, h, w, cin = x_shape
    if k == 1:
        return dcols.reshape(n, h, w, cin)
    p = k // 2
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=dcols.dtype)
    dc = dcols.reshape(n, h, w, k, k, cin)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki : ki + h, kj : kj + w, :] += dc[:, :, :, ki, kj, :]
    return dxp[:, p : p + h, p : p + w, :]


def _conv_forward(x, w, b):
    n, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    if _use_shift_path(x.shape, k):
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        out = np.zeros((n * h * wd, cout), dtype=np.result_type(x, w))
        for ki in range(k):
            for kj in range(k):
                sl = np.ascontiguousarray(xp[:, ki : ki + h, kj : kj + wd, :]).reshape(-1, cin)
                out += sl @ w[ki, kj]
        out += b
        return out.reshape(n, h, wd, cout)
    cols = _im2col(x, k)
    out = cols @ w.reshape(-1, cout) + b
    return out.reshape(n, h, wd, cout)


def _conv_backward(x, w, dout, need_dx: bool = True):
    n, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    dflat = dout.reshape(-1, cout)
    db = dflat.sum(axis=0)
    if _use_shift_path(x.shape, k):
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp) if need_dx else None
        for ki in range(k):
            for kj in range(k):
                sl = np.ascontiguousarray(xp[:, ki : ki + h, kj : kj + wd, :]).reshape(-1, cin)
                dw[ki, kj] = sl.T @ dflat
                if need_dx:
                    dxp[:, ki : ki + h, kj : kj + wd, :] += (dflat @ w[ki, kj].T).reshape(
                        n, h, wd, cin
                    )
        dx = dxp[:, p : p + h, p : p + wd, :] if need_dx else None
        return dx, dw, db
    cols = _im2col(x, k)
    dw = (cols.T @ dflat).reshape(w.shape)
    if not need_dx:
        return None, dw, db
    dcols = dflat @ w.reshape(-1, cout).T
    dx = _col2im(dcols, x.shape, k)
    return dx, dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
    xr = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    xr = xr.reshape(n, h // 2, w // 2, 4, c)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def _pool_backward(dout, cache):
    idx, (n, h, w, c) = cache
    dxr = np.zeros((n, h // 2, w // 2, 4, c), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dxr = dxr.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return dxr.reshape(n, h, w, c)


def _bn_forward_train(x, scale, shift):
    m = x.shape[0] * x.shape[1] * x.shape[2]
    mu = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    ivar = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * ivar
    out = scale * xhat + shift
    return out, (xhat, ivar, m), (mu, var)


def _bn_forward_eval(x, scale, shift, rmean, rvar):
    return scale * (x - rmean) / np.sqrt(rvar + BN_EPS) + shift


def _bn_backward(dout, scale, cache):
    xhat, ivar, m = cache
    dshift = dout.sum(axis=(0, 1, 2))
    dscale = (dout * xhat).sum(axis=(0, 1, 2))
    dxhat = dout * scale
    dx = (ivar / m) * (
        m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dscale, dshift


def _forward_batch(model: ModelState, x: np.ndarray, training: bool):
    """Run the net on an NHWC batch; returns (output, caches, batch bn stats)."""
    cfg = model.config
    factor = cfg.pool_factor
    if x.shape[1] % factor or x.shape[2] % factor:
        raise ShapeError(
            f"input {x.shape[1]}x{x.shape[2]} must be divisible by the pool factor {factor}"
        )
    x = x.astype(model.dtype, copy=False)
    caches = []
    bn_stats = []
    last = cfg.n_layers - 1
    for l in range(cfg.n_layers):
        pool_cache = None
        if l in cfg.pool_before:
            x, pool_cache = _pool_forward(x)
        conv_in = x
        x = _conv_forward(x, model.weights[l], model.biases[l])
        if l < last:
            if training:
                x, bn_cache, stats = _bn_forward_train(x, model.bn_scale[l], model.bn_shift[l])
                bn_stats.append(stats)
            else:
                x = _bn_forward_eval(
                    x, model.bn_scale[l], model.bn_shift[l], model.bn_mean[l], model.bn_var[l]
                )
                bn_cache = None
            relu_mask = x > 0
            x = x * relu_mask
        else:
            bn_cache = None
            relu_mask = None
        caches.append((pool_cache, conv_in, bn_cache, relu_mask))
    return x, caches, bn_stats


def _backward_batch(model: ModelState, caches, dout: np.ndarray) -> dict:
    cfg = model.config
    grads = {}
    last = cfg.n_layers - 1
    dx = dout
    for l in range(last, -1, -1):
        pool_cache, conv_in, bn_cache, relu_mask = caches[l]
        if l < last:
            dx = dx * relu_mask
            dx, dscale, dshift = _bn_backward(dx, model.bn_scale[l], bn_cache)
            grads[f"layer{l}.bn_scale"] = dscale
            grads[f"layer{l}.bn_shift"] = dshift
        dx, dw, db = _conv_backward(conv_in, model.weights[l], dx, need_dx=l > 0)
        grads[f"layer{l}.weight"] = dw
        grads[f"layer{l}.bias"] = db
        if pool_cache is not None and dx is not None:
            dx = _pool_backward(dx, pool_cache)
    return grads


def forward(model: ModelState, image, training: bool = False) -> RasterGrid:
    """Predict the down-sampled density map for one image.

    Inference output is clamped at zero; training mode returns the raw
    linear output and normalizes with batch statistics.
    """
    x = _as_hwc(image, model.config.input_channels)[None, :, :, :]
    out, _, _ = _forward_batch(model, x, training=training)
    plane = out[0].astype(np.float64)
    if not training:
        plane = np.maximum(plane, 0.0)
    return RasterGrid(plane)


def loss_and_gradients(model: ModelState, image, target) -> tuple[float, dict]:
    """Mean squared error against a pooled-resolution target, plus all gradients.

    Pure: batch-norm running statistics are not touched.  The target must
    already be at the network's output resolution (sum_pool the full-size
    target by the pool factor first).
    """
    x = _as_hwc(image, model.config.input_channels)[None, :, :, :]
    t = target.grid if hasattr(target, "grid") else target
    t = t.data if isinstance(t, RasterGrid) else np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    t = t[None, :, :, :]
    return _loss_and_gradients_batch(model, x, t)


def _loss_and_gradients_batch(model: ModelState, x, t):
    out, caches, _ = _forward_batch(model, x, training=True)
    if out.shape != t.shape:
        raise ShapeError(f"target shape {t.shape[1:]} does not match output {out.shape[1:]}")
    t = t.astype(model.dtype, copy=False)
    diff = out - t
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dout = (2.0 / diff.size) * diff
    grads = _backward_batch(model, caches, dout.astype(model.dtype, copy=False))
    return loss, grads


def predict_count(model: ModelState, image) -> float:
    """Total of the clamped predicted density map, descaled to true counts."""
    return forward(model, image, training=False).total / model.config.target_scale


def predict_density(model: ModelState, image) -> RasterGrid:
    """Clamped, descaled predicted map for an image of any size (zero-pads to
    the pool factor, then crops the pooled map back)."""
    x = _as_hwc(image, model.config.input_channels)
    factor = model.config.pool_factor
    h, w = x.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)))
    out = forward(model, x, training=False)
    hh = -((-h) // factor)
    ww = -((-w) // factor)
    return RasterGrid(out.data[:hh, :ww, :] / model.config.target_scale)


def train(
    model: ModelState,
    dataset: list,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    momentum: float = 0.9,
    lr_decay: float = 1.0,
) -> ModelState:
    """SGD with momentum over (input, pooled-target) pairs; deterministic per seed.

    The learning rate for epoch e is lr * lr_decay**e; the default keeps it
    constant.  Density nets need the decay: with a fixed rate the predicted
    total mass keeps oscillating around the true count instead of settling.

    Returns a trained copy; running batch-norm statistics are refreshed from
    each training batch and the per-step loss trace is kept on the model.
    """
    if not dataset:
        raise ParameterError("training dataset must not be empty")
    if epochs < 1:
        raise ParameterError("epochs must be >= 1")
    if not 0.0 < lr_decay <= 1.0:
        raise ParameterError("lr_decay must lie in (0, 1]")
    model = model.copy()
    cfg = model.config
    inputs = [np.ascontiguousarray(_as_hwc(x, cfg.input_channels), dtype=model.dtype) for x, _ in dataset]
    targets = []
    for _, t in dataset:
        t = t.grid if hasattr(t, "grid") else t
        t = t.data if isinstance(t, RasterGrid) else np.asarray(t)
        if t.ndim == 2:
            t = t[:, :, None]
        targets.append(np.ascontiguousarray(t, dtype=model.dtype))

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    velocity = {name: np.zeros_like(p) for name, p in model.named_params()}
    params = dict(model.named_params())
    n = len(inputs)
    last = cfg.n_layers - 1
    for epoch in range(epochs):
        lr_epoch = lr * lr_decay**epoch
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            x = np.stack([inputs[i] for i in batch])
            t = np.stack([targets[i] for i in batch])
            out, caches, bn_stats = _forward_batch(model, x, training=True)
            if out.shape != t.shape:
                raise ShapeError(
                    f"target shape {t.shape[1:]} does not match output {out.shape[1:]}"
                )
            diff = out - t
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at step {model.step}")
            dout = ((2.0 / diff.size) * diff).astype(model.dtype, copy=False)
            grads = _backward_batch(model, caches, dout)
            for l in range(last):
                mu, var = bn_stats[l]
                model.bn_mean[l] += BN_MOMENTUM * (mu.astype(model.dtype) - model.bn_mean[l])
                model.bn_var[l] += BN_MOMENTUM * (var.astype(model.dtype) - model.bn_var[l])
            for name, p in params.items():
                v = velocity[name]
                v *= momentum
                v -= lr_epoch * grads[name]
                p += v
            model.loss_trace.append(loss)
            model.step += 1
    return model


def input_stack(rgb, thermal: float | None = None, detection=None) -> np.ndarray:
    """Stack network input channels: RGB scaled to [0,1], an optional constant
    thermal-time plane, and an optional full-resolution detection plane."""
    img = rgb.data if isinstance(rgb, RasterGrid) else np.asarray(rgb, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError("rgb input must be H x W x 3")
    planes = [img / 255.0]
    if thermal is not None:
        planes.append(np.full(img.shape[:2] + (1,), float(thermal)))
    if detection is not None:
        det = detection.data if isinstance(detection, RasterGrid) else np.asarray(detection, dtype=np.float64)
        if det.ndim == 2:
            det = det[:, :, None]
        if det.shape[:2] != img.shape[:2]:
            raise ShapeError("detection plane shape does not match the image")
        planes.append(det)
    return np.concatenate(planes, axis=2)


def save_checkpoint(path, model: ModelState) -> None:
    """Write the PCNN checkpoint: magic, version, config JSON, f32 tensors."""
    meta = model.config.to_json()
    meta["seed"] = model.seed
    meta["step"] = model.step
    blob = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for l in range(model.config.n_layers):
            tensors = [model.weights[l], model.biases[l]]
            if model.bn_scale[l] is not None:
                tensors += [model.bn_scale[l], model.bn_shift[l], model.bn_mean[l], model.bn_var[l]]
            for t in tensors:
                fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a PCNN checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    blob_len = struct.unpack("<I", raw[8:12])[0]
    meta = json.loads(raw[12 : 12 + blob_len].decode())
    config = NetConfig.from_json(meta)
    model = init_model(config, seed=int(meta.get("seed", 0)), dtype=dtype)
    model.step = int(meta.get("step", 0))
    offset = 12 + blob_len
    last = config.n_layers - 1
    for l in range(config.n_layers):
        tensors = [("weights", model.weights[l].shape)]
        tensors.append(("biases", model.biases[l].shape))
        if l < last:
            for field_name in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
                tensors.append((field_name, (config.dims[l],)))
        for field_name, shape in tensors:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise FormatError("checkpoint truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            getattr(model, field_name)[l] = arr.reshape(shape).astype(dtype)
            offset = end
    if offset != len(raw):
        raise FormatError("checkpoint has trailing bytes")
    return model
