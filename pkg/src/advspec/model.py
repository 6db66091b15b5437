"""A small VGG-style classifier: definition, training, checkpoints, layer taps.

The network is a fixed chain of 3x3 conv + ReLU blocks with 2x2 max pooling,
one hidden dense layer and a final dense classifier. Activation layers are
addressed by ordinal: 0 is the raw input image, 1..n are the ReLU layers in
forward order (conv and dense ReLUs alike).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import as_f64

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    conv_blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    num_classes: int = 4
    hidden_units: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(tuple(b) for b in self.conv_blocks))
        c, h, w = self.input_shape
        div = 2 ** len(self.conv_blocks)
        if h % div or w % div:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{len(self.conv_blocks)} blocks")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class LabeledImageSet:
    """Images in [0,1]^{C,H,W} stacked as [N,C,H,W] with integer labels."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = as_f64(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0,1]")

    def __len__(self):
        return len(self.images)


def _layer_plan(config: ModelConfig):
    """Chain layout: list of (kind, *dims) plus parameter shape table."""
    c, h, w = config.input_shape
    plan = []
    shapes = []  # (name, shape) in flat-vector order
    c_in = c
    for bi, (c_out, n_layers) in enumerate(config.conv_blocks):
        for li in range(n_layers):
            plan.append(("conv", c_in, c_out))
            shapes.append((f"block{bi}.conv{li}.kernels", (c_out, c_in, 3, 3)))
            shapes.append((f"block{bi}.conv{li}.bias", (c_out,)))
            plan.append(("relu",))
            c_in = c_out
        plan.append(("pool",))
        h //= 2
        w //= 2
    plan.append(("flatten",))
    d_in = c_in * h * w
    plan.append(("dense", d_in, config.hidden_units))
    shapes.append(("hidden.weights", (config.hidden_units, d_in)))
    shapes.append(("hidden.bias", (config.hidden_units,)))
    plan.append(("relu",))
    plan.append(("dense", config.hidden_units, config.num_classes))
    shapes.append(("out.weights", (config.num_classes, config.hidden_units)))
    shapes.append(("out.bias", (config.num_classes,)))
    return plan, shapes


def param_count(config: ModelConfig) -> int:
    _, shapes = _layer_plan(config)
    return sum(int(np.prod(s)) for _, s in shapes)


@dataclass
class ModelParams:
    """Flat float64 parameter vector plus the config that shapes it."""
    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        expected = param_count(self.config)
        if self.flat.shape != (expected,):
            raise ValueError(f"parameter vector has {self.flat.size} entries, expected {expected}")

    def shape_table(self):
        _, shapes = _layer_plan(self.config)
        out = []
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            out.append((name, shape, offset))
            offset += size
        return out

    def layers(self) -> list:
        """Materialize the forward chain; arrays are views into `flat`."""
        plan, _ = _layer_plan(self.config)
        layers = []
        offset = 0

        def take(shape):
            nonlocal offset
            size = int(np.prod(shape))
            arr = self.flat[offset:offset + size].reshape(shape)
            offset += size
            return arr

        for entry in plan:
            kind = entry[0]
            if kind == "conv":
                _, c_in, c_out = entry
                layers.append(nn.Conv(take((c_out, c_in, 3, 3)), take((c_out,)), padding=1))
            elif kind == "relu":
                layers.append(nn.ReLU())
            elif kind == "pool":
                layers.append(nn.MaxPool2())
            elif kind == "flatten":
                layers.append(nn.Flatten())
            else:
                _, d_in, d_out = entry
                layers.append(nn.Dense(take((d_out, d_in)), take((d_out,))))
        return layers

    def activation_positions(self) -> dict[int, int]:
        """Map activation ordinal (1-based; 0 = input) to chain position."""
        plan, _ = _layer_plan(self.config)
        positions = {}
        ordinal = 1
        for pos, entry in enumerate(plan):
            if entry[0] == "relu":
                positions[ordinal] = pos
                ordinal += 1
        return positions

    @property
    def num_activations(self) -> int:
        return len(self.activation_positions())


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded uniform fan-in init (bound sqrt(6/fan_in), which preserves
    activation scale through the ReLU chain); biases start at zero."""
    rng = np.random.default_rng(config.seed)
    _, shapes = _layer_plan(config)
    parts = []
    for name, shape in shapes:
        if name.endswith("bias"):
            parts.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ModelParams(config=config, flat=np.concatenate(parts))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(config: ModelConfig, train_set: LabeledImageSet, epochs: int, lr: float,
          batch_size: int = 32, momentum: float = 0.9, callback=None) -> ModelParams:
    """SGD with momentum; deterministic given config.seed (init and shuffles)."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.labels.max() >= config.num_classes:
        raise ValueError(f"label {train_set.labels.max()} >= num_classes {config.num_classes}")
    if train_set.images.shape[1:] != config.input_shape:
        raise ValueError(f"images {train_set.images.shape[1:]} do not match config {config.input_shape}")

    params = init_params(config)
    layers = params.layers()
    for layer in layers:
        if isinstance(layer, nn.Conv):
            layer.cache_stack = True  # reuse forward tap stacks in backward
    velocity = np.zeros_like(params.flat)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x5D7A)))
    n = len(train_set)

    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            x = train_set.images[idx]
            y = train_set.labels[idx]
            logits, caches = nn.chain_forward(layers, x)
            losses = nn.softmax_xent_forward(logits, y)
            total_loss += float(losses.sum())
            dlogits = nn.softmax_xent_backward(logits, y) / len(idx)
            _, grads = nn.chain_backward(layers, caches, dlogits, need_input_grad=False)
            g = nn.flatten_param_grads(layers, grads)
            velocity *= momentum
            velocity += g
            params.flat -= lr * velocity  # layer views see the update
        mean_loss = total_loss / n
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"training diverged: epoch {epoch} mean loss {mean_loss}")
        if callback is not None:
            callback(epoch, mean_loss)
    return params


# ---------------------------------------------------------------------------
# inference and layer taps
# ---------------------------------------------------------------------------

def _check_image(params: ModelParams, image: np.ndarray) -> np.ndarray:
    image = as_f64(image)
    if image.shape != params.config.input_shape:
        raise ValueError(f"image shape {image.shape} != model input {params.config.input_shape}")
    return image


def forward_logits(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Batched logits for [B,C,H,W]."""
    logits, _ = nn.chain_forward(params.layers(), as_f64(images), keep_caches=False)
    return logits


def predict(params: ModelParams, image: np.ndarray):
    """Returns (logits, label); argmax ties go to the lowest class index."""
    logits = forward_logits(params, _check_image(params, image)[None])[0]
    return logits, int(np.argmax(logits))


def predict_batch(params: ModelParams, images: np.ndarray) -> np.ndarray:
    return np.argmax(forward_logits(params, images), axis=1)


def feature_maps(params: ModelParams, image: np.ndarray, activation_ordinals) -> list[np.ndarray]:
    """Post-ReLU activations at the requested ordinals, in request order.

    Ordinal 0 denotes the input image itself. Conv activations come back as
    [C,H,W]; the hidden dense activation as a 1-D vector.
    """
    image = _check_image(params, image)
    positions = params.activation_positions()
    for o in activation_ordinals:
        if o != 0 and o not in positions:
            raise ValueError(f"activation ordinal {o} not in 0..{len(positions)}")
    wanted = {positions[o] for o in activation_ordinals if o != 0}
    layers = params.layers()
    tapped: dict[int, np.ndarray] = {}
    x = image[None]
    for pos, layer in enumerate(layers):
        if wanted and pos > max(wanted):
            break
        x, _ = layer.forward(x)
        if pos in wanted:
            tapped[pos] = x[0]
    return [image if o == 0 else tapped[positions[o]] for o in activation_ordinals]


def feature_maps_batch(params: ModelParams, images: np.ndarray, activation_ordinals) -> list[np.ndarray]:
    """Batched feature_maps: one [B,...] array per requested ordinal."""
    images = as_f64(images)
    positions = params.activation_positions()
    for o in activation_ordinals:
        if o != 0 and o not in positions:
            raise ValueError(f"activation ordinal {o} not in 0..{len(positions)}")
    wanted = {positions[o] for o in activation_ordinals if o != 0}
    tapped: dict[int, np.ndarray] = {}
    x = images
    for pos, layer in enumerate(params.layers()):
        if wanted and pos > max(wanted):
            break
        x, _ = layer.forward(x)
        if pos in wanted:
            tapped[pos] = x
    return [images if o == 0 else tapped[positions[o]] for o in activation_ordinals]


def resume_forward(params: ModelParams, activation_ordinal: int, activation: np.ndarray) -> np.ndarray:
    """Re-enter the chain just after the given activation and return logits."""
    layers = params.layers()
    if activation_ordinal == 0:
        start = 0
        x = as_f64(activation)[None]
    else:
        positions = params.activation_positions()
        if activation_ordinal not in positions:
            raise ValueError(f"activation ordinal {activation_ordinal} unknown")
        start = positions[activation_ordinal] + 1
        x = as_f64(activation)[None]
    for layer in layers[start:]:
        x, _ = layer.forward(x)
    return x[0]


# ---------------------------------------------------------------------------
# gradients used by the attacks and detectors
# ---------------------------------------------------------------------------

def input_loss_gradients(params: ModelParams, images: np.ndarray, labels: np.ndarray):
    """Per-sample loss and d(loss)/d(image) for a batch; no parameter grads."""
    layers = params.layers()
    x = as_f64(images)
    logits, caches = nn.chain_forward(layers, x)
    losses = nn.softmax_xent_forward(logits, labels)
    dlogits = nn.softmax_xent_backward(logits, labels)
    dx, _ = nn.chain_backward(layers, caches, dlogits, need_param_grads=False)
    return losses, dx


def logit_input_gradients(params: ModelParams, image: np.ndarray, dlogit_rows: np.ndarray):
    """Input gradients of scalar projections v.logits, one per row of dlogit_rows.

    Used by the decision-boundary attack, which needs gradients of several
    logit differences at the same point; the image is tiled so one batched
    backward pass serves all rows.
    """
    rows = np.asarray(dlogit_rows, dtype=np.float64)
    layers = params.layers()
    x = np.repeat(as_f64(image)[None], len(rows), axis=0)
    logits, caches = nn.chain_forward(layers, x)
    dx, _ = nn.chain_backward(layers, caches, rows, need_param_grads=False)
    return logits[0], dx


def activation_input_gradients(params: ModelParams, images: np.ndarray,
                               activation_ordinal: int, dactivation: np.ndarray):
    """Input gradients of scalars whose d/d(activation) seeds are given."""
    positions = params.activation_positions()
    pos = positions[activation_ordinal]
    layers = params.layers()
    x = as_f64(images)
    acts, caches = nn.chain_forward(layers[:pos + 1], x)
    dx, _ = nn.chain_backward(layers[:pos + 1], caches,
                              np.asarray(dactivation, dtype=np.float64),
                              need_param_grads=False)
    return dx


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_json(config: ModelConfig) -> bytes:
    doc = {
        "input_shape": list(config.input_shape),
        "conv_blocks": [list(b) for b in config.conv_blocks],
        "num_classes": config.num_classes,
        "hidden_units": config.hidden_units,
        "seed": config.seed,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _checksum(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()[:8]


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, version u16, config block, f64 payload, checksum."""
    cfg = _config_json(params.config)
    body = (CHECKPOINT_MAGIC
            + struct.pack("<H", CHECKPOINT_VERSION)
            + struct.pack("<I", len(cfg)) + cfg
            + struct.pack("<Q", params.flat.size)
            + params.flat.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(body + _checksum(body))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 2 + 4 + 8 + 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic or truncated)")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise ValueError(f"{path}: checksum mismatch, file corrupted")
    version, = struct.unpack_from("<H", body, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_len, = struct.unpack_from("<I", body, 6)
    cfg_end = 10 + cfg_len
    doc = json.loads(body[10:cfg_end].decode())
    config = ModelConfig(
        input_shape=tuple(doc["input_shape"]),
        conv_blocks=tuple(tuple(b) for b in doc["conv_blocks"]),
        num_classes=doc["num_classes"],
        hidden_units=doc["hidden_units"],
        seed=doc["seed"],
    )
    count, = struct.unpack_from("<Q", body, cfg_end)
    payload = body[cfg_end + 8:]
    if count != param_count(config) or len(payload) != 8 * count:
        raise ValueError(f"{path}: parameter payload truncated or inconsistent")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(config=config, flat=flat)
