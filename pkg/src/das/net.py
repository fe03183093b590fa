"""Residual convolutional classifier: construction, forward pass, analytic
backward pass, softmax cross-entropy, and checkpoint I/O.

Architecture (depth = 6n + 2, n blocks per stage):

    stem:    3x3 conv (in -> w1, no bias) + batch norm + ReLU
    stage 1: n basic blocks at width w1, stride 1, identity shortcuts
    stage 2: n basic blocks at width w2, first block stride 2 with a
             1x1-conv + batch-norm projection shortcut
    stage 3: same as stage 2 at width w3
    head:    global average pool + fully connected (w3 -> num_classes)

A basic block is conv-bn-relu-conv-bn, plus the shortcut, then ReLU.
Convolutions carry no bias; stride-2 3x3 convs with padding 1 map size S to
ceil(S / 2), so odd sizes (50 -> 25 -> 13) are valid.

Checkpoint container:

    bytes 0-3   ASCII magic "DASN"
    bytes 4-7   version u32 little-endian (currently 1)
    bytes 8-15  header length u64 little-endian
    header      UTF-8 JSON: config, epoch, history, manifest (list of
                {name, shape, offset}; offset counts float32 elements)
    payload     float32 little-endian values in manifest order (trainable
                parameters first, then batch-norm running statistics)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from .store import LABELS

CHECKPOINT_MAGIC = b"DASN"
CHECKPOINT_VERSION = 1

SUPPORTED_DEPTHS = (8, 14, 20)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# Index of the "waves" class in the logits (labels are indexed alphabetically).
WAVES_INDEX = LABELS.index("waves")


@dataclass
class ModelConfig:
    depth: int = 8
    stage_widths: tuple = (16, 32, 64)
    in_channels: int = 1
    num_classes: int = 2
    input_size: int = 200
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth not in SUPPORTED_DEPTHS:
            raise ValueError(f"unsupported depth {self.depth}, expected one of {SUPPORTED_DEPTHS}")
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if len(self.stage_widths) != 3 or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage_widths must be three positive integers")
        if self.input_size < 4:
            raise ValueError("input_size must be at least 4")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "stage_widths": list(self.stage_widths),
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["stage_widths"] = tuple(doc.get("stage_widths", (16, 32, 64)))
        return cls(**doc)


@dataclass
class _BlockSpec:
    name: str
    in_ch: int
    out_ch: int
    stride: int
    has_proj: bool


class Model:
    """Parameter container plus the static layer plan derived from a config.

    `params` holds the trainable arrays, `buffers` the batch-norm running
    statistics; both are keyed by dotted layer names.  `manifest_names()`
    fixes the canonical ordering used by checkpoints and gradient buffers.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.blocks = _block_specs(config)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.epoch = 0
        self.history: dict = {}
        self._cache = None

    def param_names(self) -> list:
        names = ["stem.conv.w", "stem.bn.gamma", "stem.bn.beta"]
        for spec in self.blocks:
            names += [
                f"{spec.name}.conv1.w", f"{spec.name}.bn1.gamma", f"{spec.name}.bn1.beta",
                f"{spec.name}.conv2.w", f"{spec.name}.bn2.gamma", f"{spec.name}.bn2.beta",
            ]
            if spec.has_proj:
                names += [
                    f"{spec.name}.proj.w",
                    f"{spec.name}.projbn.gamma", f"{spec.name}.projbn.beta",
                ]
        names += ["fc.w", "fc.b"]
        return names

    def buffer_names(self) -> list:
        names = []
        for bn in self._bn_names():
            names += [f"{bn}.running_mean", f"{bn}.running_var"]
        return names

    def _bn_names(self) -> list:
        names = ["stem.bn"]
        for spec in self.blocks:
            names += [f"{spec.name}.bn1", f"{spec.name}.bn2"]
            if spec.has_proj:
                names.append(f"{spec.name}.projbn")
        return names

    def manifest_names(self) -> list:
        return self.param_names() + self.buffer_names()

    def n_params(self) -> int:
        return sum(self.params[name].size for name in self.param_names())

    def copy(self) -> "Model":
        dup = Model(self.config)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return dup


def _block_specs(config: ModelConfig) -> list:
    specs = []
    w1, w2, w3 = config.stage_widths
    in_ch = w1
    for stage_idx, width in enumerate((w1, w2, w3), start=1):
        for block_idx in range(1, config.blocks_per_stage + 1):
            stride = 2 if (stage_idx > 1 and block_idx == 1) else 1
            has_proj = stride != 1 or in_ch != width
            specs.append(_BlockSpec(
                name=f"s{stage_idx}.b{block_idx}",
                in_ch=in_ch, out_ch=width, stride=stride, has_proj=has_proj,
            ))
            in_ch = width
    return specs


def build_model(config: ModelConfig) -> Model:
    """Deterministically initialize a model from its config seed.

    Conv weights are fan-in-scaled normals (std = sqrt(2 / fan_in)); batch
    norm starts at scale 1, shift 0, running stats (0, 1); the fully
    connected layer uses std = sqrt(1 / fan_in) weights and zero bias.
    """
    model = Model(config)
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype

    def conv_init(kh, kw, c_in, c_out):
        fan_in = c_in * kh * kw
        return (rng.standard_normal((kh, kw, c_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dt)

    def bn_init(prefix, c):
        model.params[f"{prefix}.gamma"] = np.ones(c, dtype=dt)
        model.params[f"{prefix}.beta"] = np.zeros(c, dtype=dt)
        model.buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=dt)
        model.buffers[f"{prefix}.running_var"] = np.ones(c, dtype=dt)

    w1 = config.stage_widths[0]
    model.params["stem.conv.w"] = conv_init(3, 3, config.in_channels, w1)
    bn_init("stem.bn", w1)
    for spec in model.blocks:
        model.params[f"{spec.name}.conv1.w"] = conv_init(3, 3, spec.in_ch, spec.out_ch)
        bn_init(f"{spec.name}.bn1", spec.out_ch)
        model.params[f"{spec.name}.conv2.w"] = conv_init(3, 3, spec.out_ch, spec.out_ch)
        bn_init(f"{spec.name}.bn2", spec.out_ch)
        if spec.has_proj:
            model.params[f"{spec.name}.proj.w"] = (
                rng.standard_normal((spec.in_ch, spec.out_ch))
                * np.sqrt(2.0 / spec.in_ch)
            ).astype(dt)
            bn_init(f"{spec.name}.projbn", spec.out_ch)
    w3 = config.stage_widths[2]
    model.params["fc.w"] = (
        rng.standard_normal((w3, config.num_classes)) * np.sqrt(1.0 / w3)
    ).astype(dt)
    model.params["fc.b"] = np.zeros(config.num_classes, dtype=dt)
    return model


def _bn_apply(model, name, x, train, freeze_bn, update_stats):
    effective_train = train and not freeze_bn
    return layers.batchnorm_forward(
        x, model.params[f"{name}.gamma"], model.params[f"{name}.beta"],
        model.buffers[f"{name}.running_mean"], model.buffers[f"{name}.running_var"],
        BN_MOMENTUM, BN_EPS, train=effective_train,
        update_stats=update_stats and effective_train,
    )


def _forward_pass(model: Model, x: np.ndarray, train: bool, freeze_bn: bool,
                  update_stats: bool):
    """Run the network on an NHWC batch; returns (logits, cache list)."""
    caches = []
    out, c = layers.conv3x3_forward(x, model.params["stem.conv.w"], 1)
    caches.append(("conv", "stem.conv.w", c))
    out, c = _bn_apply(model, "stem.bn", out, train, freeze_bn, update_stats)
    caches.append(("bn", "stem.bn", c))
    out, c = layers.relu_forward(out)
    caches.append(("relu", None, c))
    for spec in model.blocks:
        identity = out
        out, c = layers.conv3x3_forward(out, model.params[f"{spec.name}.conv1.w"], spec.stride)
        caches.append(("conv", f"{spec.name}.conv1.w", c))
        out, c = _bn_apply(model, f"{spec.name}.bn1", out, train, freeze_bn, update_stats)
        caches.append(("bn", f"{spec.name}.bn1", c))
        out, c = layers.relu_forward(out)
        caches.append(("relu", None, c))
        out, c = layers.conv3x3_forward(out, model.params[f"{spec.name}.conv2.w"], 1)
        caches.append(("conv", f"{spec.name}.conv2.w", c))
        out, c = _bn_apply(model, f"{spec.name}.bn2", out, train, freeze_bn, update_stats)
        caches.append(("bn", f"{spec.name}.bn2", c))
        if spec.has_proj:
            shortcut, c = layers.conv1x1_forward(
                identity, model.params[f"{spec.name}.proj.w"], spec.stride)
            caches.append(("proj", f"{spec.name}.proj.w", c))
            shortcut, c = _bn_apply(model, f"{spec.name}.projbn", shortcut,
                                    train, freeze_bn, update_stats)
            caches.append(("bn", f"{spec.name}.projbn", c))
        else:
            shortcut = identity
            caches.append(("identity", None, None))
        out = out + shortcut
        caches.append(("add", None, None))
        out, c = layers.relu_forward(out)
        caches.append(("relu", None, c))
    out, c = layers.global_avg_pool_forward(out)
    caches.append(("pool", None, c))
    logits, c = layers.linear_forward(out, model.params["fc.w"], model.params["fc.b"])
    caches.append(("fc", None, c))
    return logits, caches


def forward(model: Model, batch: np.ndarray, mode: str = "eval",
            freeze_bn: bool = False, eval_chunk: int = 16) -> np.ndarray:
    """Forward pass on a (B, in_channels, S, S) batch of [0, 1] pixels.

    Train mode normalizes with batch statistics, updates the running
    statistics (unless `freeze_bn`), and caches activations for
    :func:`backward`.  Eval mode uses running statistics, is a pure
    function, and processes the batch in chunks to bound memory.
    """
    batch = np.asarray(batch)
    s = model.config.input_size
    if batch.ndim != 4 or batch.shape[1] != model.config.in_channels or \
            batch.shape[2] != s or batch.shape[3] != s:
        raise ValueError(
            f"batch shape {batch.shape} does not match "
            f"[B, {model.config.in_channels}, {s}, {s}]"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dt = model.config.np_dtype
    with layers.single_thread_blas():
        if mode == "train":
            x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=dt)
            logits, caches = _forward_pass(model, x, train=True, freeze_bn=freeze_bn,
                                           update_stats=not freeze_bn)
            model._cache = caches
            return logits
        outs = []
        for start in range(0, batch.shape[0], eval_chunk):
            x = np.ascontiguousarray(
                batch[start : start + eval_chunk].transpose(0, 2, 3, 1), dtype=dt)
            logits, _ = _forward_pass(model, x, train=False, freeze_bn=False,
                                      update_stats=False)
            outs.append(logits)
        return np.concatenate(outs, axis=0)


def backward(model: Model, dlogits: np.ndarray) -> dict:
    """Analytic gradients for every trainable parameter.

    Must follow a train-mode :func:`forward` on the same batch; the returned
    dict is keyed like `model.params`.
    """
    if model._cache is None:
        raise RuntimeError("backward called without a cached train-mode forward")
    with layers.single_thread_blas():
        return _backward_pass(model, dlogits)


def _backward_pass(model: Model, dlogits: np.ndarray) -> dict:
    caches = model._cache
    grads = {name: None for name in model.param_names()}
    d = np.asarray(dlogits, dtype=model.config.np_dtype)

    kind, _, c = caches[-1]
    assert kind == "fc"
    d, grads["fc.w"], grads["fc.b"] = layers.linear_backward(d, c)
    kind, _, c = caches[-2]
    assert kind == "pool"
    d = layers.global_avg_pool_backward(d, c)

    idx = len(caches) - 3
    for spec in reversed(model.blocks):
        kind, _, c = caches[idx]; idx -= 1
        assert kind == "relu"
        d = layers.relu_backward(d, c)
        assert caches[idx][0] == "add"
        idx -= 1
        kind, name, c = caches[idx]; idx -= 1
        if kind == "bn":
            d_short, dg, db = layers.batchnorm_backward(d, c)
            grads[f"{spec.name}.projbn.gamma"] = dg
            grads[f"{spec.name}.projbn.beta"] = db
            kind, name, c = caches[idx]; idx -= 1
            assert kind == "proj"
            d_short, grads[f"{spec.name}.proj.w"] = layers.conv1x1_backward(d_short, c)
        else:
            assert kind == "identity"
            d_short = d
        kind, name, c = caches[idx]; idx -= 1
        assert kind == "bn"
        d, dg, db = layers.batchnorm_backward(d, c)
        grads[f"{spec.name}.bn2.gamma"] = dg
        grads[f"{spec.name}.bn2.beta"] = db
        kind, name, c = caches[idx]; idx -= 1
        assert kind == "conv"
        d, grads[f"{spec.name}.conv2.w"] = layers.conv3x3_backward(d, c)
        kind, _, c = caches[idx]; idx -= 1
        assert kind == "relu"
        d = layers.relu_backward(d, c)
        kind, name, c = caches[idx]; idx -= 1
        assert kind == "bn"
        d, dg, db = layers.batchnorm_backward(d, c)
        grads[f"{spec.name}.bn1.gamma"] = dg
        grads[f"{spec.name}.bn1.beta"] = db
        kind, name, c = caches[idx]; idx -= 1
        assert kind == "conv"
        d, grads[f"{spec.name}.conv1.w"] = layers.conv3x3_backward(d, c)
        d = d + d_short

    kind, _, c = caches[idx]; idx -= 1
    assert kind == "relu"
    d = layers.relu_backward(d, c)
    kind, name, c = caches[idx]; idx -= 1
    assert kind == "bn"
    d, dg, db = layers.batchnorm_backward(d, c)
    grads["stem.bn.gamma"] = dg
    grads["stem.bn.beta"] = db
    kind, name, c = caches[idx]; idx -= 1
    assert kind == "conv" and idx == -1
    _, grads["stem.conv.w"] = layers.conv3x3_backward(d, c, need_dx=False)
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, dloss/dlogits) with the gradient already divided by the
    batch size: (softmax - onehot) / B.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    probs = softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def predict_proba(model: Model, tiles: np.ndarray, eval_chunk: int = 16) -> np.ndarray:
    """Probability of the "waves" class for a batch of [0, 1] tiles."""
    logits = forward(model, tiles, mode="eval", eval_chunk=eval_chunk)
    return softmax(logits)[:, WAVES_INDEX]


def model_summary(model: Model) -> list:
    """Per-layer (type, output shape, parameter count) trace rows.

    Shapes are reported as (-1, C, H, W); block boundary rows mirror the
    container entries of a layer-hook trace and carry zero parameters.
    """
    cfg = model.config
    s = cfg.input_size
    rows = []

    def conv_row(c_out, size, n_par):
        rows.append(("Conv2d", (-1, c_out, size, size), n_par))

    def bn_row(c_out, size):
        rows.append(("BatchNorm2d", (-1, c_out, size, size), 2 * c_out))

    def relu_row(c_out, size):
        rows.append(("ReLU", (-1, c_out, size, size), 0))

    w1 = cfg.stage_widths[0]
    conv_row(w1, s, w1 * cfg.in_channels * 9)
    bn_row(w1, s)
    relu_row(w1, s)
    size = s
    for spec in model.blocks:
        out_size = layers.conv_out_size(size, spec.stride)
        conv_row(spec.out_ch, out_size, spec.out_ch * spec.in_ch * 9)
        bn_row(spec.out_ch, out_size)
        relu_row(spec.out_ch, out_size)
        conv_row(spec.out_ch, out_size, spec.out_ch * spec.out_ch * 9)
        bn_row(spec.out_ch, out_size)
        if spec.has_proj:
            conv_row(spec.out_ch, out_size, spec.out_ch * spec.in_ch)
            bn_row(spec.out_ch, out_size)
        relu_row(spec.out_ch, out_size)
        rows.append(("BasicBlock", (-1, spec.out_ch, out_size, out_size), 0))
        size = out_size
    w3 = cfg.stage_widths[2]
    rows.append(("AdaptiveAvgPool2d", (-1, w3, 1, 1), 0))
    rows.append(("Linear", (-1, cfg.num_classes), w3 * cfg.num_classes + cfg.num_classes))
    return rows


def format_summary(model: Model) -> str:
    lines = [f"{'Layer (type)':>20} {'Output Shape':>22} {'Param #':>10}"]
    total = 0
    for kind, shape, n_par in model_summary(model):
        lines.append(f"{kind:>20} {str(list(shape)):>22} {n_par:>10,}")
        total += n_par
    lines.append(f"Total trainable params: {total:,}")
    return "\n".join(lines)


def save_checkpoint(model: Model, path, epoch: int = 0, history: dict | None = None) -> None:
    """Serialize parameters and running statistics (float32 payload)."""
    manifest = []
    offset = 0
    arrays = []
    for name in model.manifest_names():
        arr = model.params.get(name)
        if arr is None:
            arr = model.buffers[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    header = {
        "config": model.config.to_dict(),
        "epoch": epoch,
        "history": history or {},
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    The stored epoch and metric history land on `model.epoch` and
    `model.history`.  When `config` is given it must match the stored one
    exactly.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config.to_dict() != stored.to_dict():
        raise ValueError(
            f"checkpoint config mismatch: stored {stored.to_dict()}, "
            f"requested {config.to_dict()}"
        )
    model = build_model(stored)
    payload = np.frombuffer(raw[16 + header_len :], dtype="<f4")
    total = sum(
        int(np.prod(entry["shape"])) if entry["shape"] else 1
        for entry in header["manifest"]
    )
    if payload.size != total:
        raise ValueError(f"{path}: payload has {payload.size} values, manifest says {total}")
    dt = stored.np_dtype
    for entry in header["manifest"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        arr = payload[offset : offset + size].reshape(shape).astype(dt)
        if name in model.params:
            model.params[name] = arr
        elif name in model.buffers:
            model.buffers[name] = arr
        else:
            raise ValueError(f"{path}: unknown manifest entry {name!r}")
    model.epoch = int(header["epoch"])
    model.history = header["history"]
    return model
