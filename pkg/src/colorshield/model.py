"""Small wide DenseNet-style classifier, one instance per color space.

Layout: 3x3 stem conv, then dense blocks whose layers each run
affine -> relu -> 3x3 conv(growth_rate) on the concatenation of everything
earlier in the block; parameterless 2x2 average-pool transitions halve the
spatial extent; the head's affine -> relu output is the final activation map
consumed by progressive resizing, followed by global average pooling and a
linear classifier. Per-channel learnable affine stands in for normalization
layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .colorspace import ColorSpace

__all__ = ["DenseNetConfig", "Model", "ForwardOutput", "build", "forward", "forward_batch", "loss", "train", "parameter_count"]


@dataclass(frozen=True)
class DenseNetConfig:
    input_size: int = 32
    blocks: int = 3
    layers_per_block: int = 4
    growth_rate: int = 12
    initial_channels: int = 24
    num_classes: int = 10

    def __post_init__(self):
        for name in ("input_size", "blocks", "layers_per_block", "growth_rate", "initial_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"DenseNetConfig: {name} must be positive")
        if self.input_size % (2 ** (self.blocks - 1)) != 0:
            raise ValueError(
                f"DenseNetConfig: input_size {self.input_size} not divisible by 2^{self.blocks - 1}"
            )

    @property
    def map_size(self) -> int:
        return self.input_size // (2 ** (self.blocks - 1))

    def final_channels(self) -> int:
        return self.initial_channels + self.blocks * self.layers_per_block * self.growth_rate


def parameter_count(config: DenseNetConfig) -> int:
    """Closed-form parameter count for the layout above."""
    g, k = config.growth_rate, config.num_classes
    total = 27 * config.initial_channels  # stem 3x3x3 conv
    ch = config.initial_channels
    for _ in range(config.blocks):
        for _ in range(config.layers_per_block):
            total += 2 * ch + 9 * ch * g  # affine + conv
            ch += g
    total += 2 * ch  # head affine
    total += ch * k + k  # classifier
    return total


@dataclass
class Model:
    config: DenseNetConfig
    space: ColorSpace
    params: dict[str, Tensor]
    rng_seed: int

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def assert_finite(self) -> None:
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise ad.NumericError(f"model parameter {name} is non-finite")


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probs: np.ndarray
    activation_map: np.ndarray  # C x h x w, pre-pooling


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)


def build(config: DenseNetConfig, space: ColorSpace = ColorSpace.RGB, seed: int = 0) -> Model:
    """Deterministic He-initialized model for one color space."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def par(name: str, arr: np.ndarray) -> None:
        params[name] = Tensor(arr, requires_grad=True)

    par("stem/w", _he_conv(rng, config.initial_channels, 3, 3))
    ch = config.initial_channels
    for b in range(config.blocks):
        for l in range(config.layers_per_block):
            par(f"b{b}/l{l}/gamma", np.ones(ch, dtype=np.float32))
            par(f"b{b}/l{l}/beta", np.zeros(ch, dtype=np.float32))
            par(f"b{b}/l{l}/w", _he_conv(rng, config.growth_rate, ch, 3))
            ch += config.growth_rate
    par("head/gamma", np.ones(ch, dtype=np.float32))
    par("head/beta", np.zeros(ch, dtype=np.float32))
    std = np.sqrt(2.0 / ch)
    par("head/fc_w", (rng.standard_normal((ch, config.num_classes)) * std).astype(np.float32))
    par("head/fc_b", np.zeros(config.num_classes, dtype=np.float32))

    model = Model(config=config, space=space, params=params, rng_seed=seed)
    actual = sum(t.data.size for t in params.values())
    expected = parameter_count(config)
    assert actual == expected, f"parameter count {actual} != closed form {expected}"
    return model


def forward_graph(model: Model, x: Tensor, collect: list | None = None, ablate: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
    """Record the network on the active tape: returns (logits, activation_map).

    ``collect``/``ablate`` are test hooks: collect receives each dense layer's
    input array; ablate=(block, layer) zeroes that layer's output before the
    concat.
    """
    cfg = model.config
    p = model.params
    h = ad.conv2d(x, p["stem/w"], stride=1, padding=1)
    for b in range(cfg.blocks):
        feats = h
        for l in range(cfg.layers_per_block):
            if collect is not None:
                collect.append(feats.data.copy())
            a = ad.relu(ad.affine_channel(feats, p[f"b{b}/l{l}/gamma"], p[f"b{b}/l{l}/beta"]))
            o = ad.conv2d(a, p[f"b{b}/l{l}/w"], stride=1, padding=1)
            if ablate == (b, l):
                o = ad.scale(o, 0.0)
            feats = ad.concat_channels([feats, o])
        h = feats
        if b < cfg.blocks - 1:
            h = ad.avgpool2(h)
    amap = ad.relu(ad.affine_channel(h, p["head/gamma"], p["head/beta"]))
    pooled = ad.avgpool_global(amap)
    logits = ad.add(ad.matmul(pooled, p["head/fc_w"]), p["head/fc_b"])
    return logits, amap


def _check_input(model: Model, arr: np.ndarray) -> None:
    s = model.config.input_size
    if arr.shape[-3:] != (3, s, s) and arr.shape[-3:] != (s, s, 3):
        raise ad.ShapeError(f"forward: input shape {arr.shape} vs input_size {s}")


def forward_batch(model: Model, batch_nchw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference on an [N,3,S,S] batch: (logits [N,K], activation maps)."""
    _check_input(model, batch_nchw)
    logits, amap = forward_graph(model, Tensor(batch_nchw))
    return logits.data, amap.data


def forward(model: Model, img, train: bool = False) -> ForwardOutput:
    """Single-image forward; ``img`` is an Image in model.space or an HWC array.

    Inputs must already be normalized to [0,1] per the color-space contract.
    """
    data = img.data if hasattr(img, "data") else np.asarray(img)
    if hasattr(img, "space") and img.space != model.space:
        raise ValueError(f"forward: image space {img.space} != model space {model.space}")
    _check_input(model, data)
    x = np.transpose(data, (2, 0, 1))[None].astype(np.float32)
    logits, amap = forward_batch(model, x)
    z = logits[0].astype(np.float64)
    z -= z.max()
    e = np.exp(z)
    probs = (e / e.sum()).astype(np.float32)
    return ForwardOutput(logits=logits[0], probs=probs, activation_map=amap[0])


def loss(output: ForwardOutput, y_true: int) -> float:
    """Cross-entropy -log probs[y_true]."""
    k = output.logits.shape[0]
    if not 0 <= y_true < k:
        raise IndexError(f"loss: label {y_true} out of range for {k} classes")
    z = output.logits.astype(np.float64)
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) + m - z[y_true])


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float | None = None


@dataclass
class TrainSettings:
    epochs: int = 10
    lr: float = 0.05
    batch: int = 32
    momentum: float = 0.9
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = ()  # defaults to 50%/75% of epochs
    grad_clip: float = 2.0  # global L2 norm; 0 disables
    seed: int = 0

    def decay_points(self) -> tuple[int, ...]:
        if self.decay_epochs:
            return self.decay_epochs
        return (self.epochs // 2, (3 * self.epochs) // 4)


def train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    settings: TrainSettings,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
) -> list[TrainLogEntry]:
    """SGD with momentum and step decay; mutates model params in place.

    ``images`` is [N,H,W,C] in model space, already normalized to [0,1].
    """
    if len(images) == 0:
        raise ValueError("train: empty dataset")
    if len(images) != len(labels):
        raise ValueError("train: images/labels length mismatch")
    rng = np.random.default_rng(settings.seed)
    x_all = np.transpose(np.asarray(images, dtype=np.float32), (0, 3, 1, 2))
    y_all = np.asarray(labels)
    velocity = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    lr = settings.lr
    log: list[TrainLogEntry] = []

    for epoch in range(settings.epochs):
        if epoch in settings.decay_points() and epoch > 0:
            lr *= settings.lr_decay
        order = rng.permutation(len(x_all))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), settings.batch):
            idx = order[start : start + settings.batch]
            xb, yb = x_all[idx], y_all[idx]
            with ad.tape() as tp:
                logits, _ = forward_graph(model, Tensor(xb))
                batch_loss = ad.softmax_crossentropy(logits, yb)
            tp.backward(batch_loss)
            total_loss += float(batch_loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            if settings.lr > 0:
                clip_scale = 1.0
                if settings.grad_clip > 0:
                    gnorm = np.sqrt(
                        sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in model.params.values())
                    )
                    if gnorm > settings.grad_clip:
                        clip_scale = settings.grad_clip / gnorm
                for name, t in model.params.items():
                    v = velocity[name]
                    v *= settings.momentum
                    v -= (lr * clip_scale) * t.grad
                    t.data += v
                    t.zero_grad()
            else:
                for t in model.params.values():
                    t.zero_grad()
        model.assert_finite()
        entry = TrainLogEntry(
            epoch=epoch,
            train_loss=total_loss / len(order),
            train_acc=correct / len(order),
        )
        if val_images is not None and val_labels is not None:
            entry.val_acc = evaluate(model, val_images, val_labels)
        log.append(entry)
    return log


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch: int = 128) -> float:
    """Accuracy on [N,H,W,C] normalized inputs."""
    x_all = np.transpose(np.asarray(images, dtype=np.float32), (0, 3, 1, 2))
    y_all = np.asarray(labels)
    correct = 0
    for start in range(0, len(x_all), batch):
        logits, _ = forward_batch(model, x_all[start : start + batch])
        correct += int((logits.argmax(axis=1) == y_all[start : start + batch]).sum())
    return correct / len(x_all)


def save_model(path, model: Model) -> None:
    meta = {
        "meta/config": np.array(
            [
                model.config.input_size,
                model.config.blocks,
                model.config.layers_per_block,
                model.config.growth_rate,
                model.config.initial_channels,
                model.config.num_classes,
            ],
            dtype=np.float32,
        ),
        "meta/space": np.array([list(ColorSpace).index(model.space)], dtype=np.float32),
        "meta/seed": np.array([model.rng_seed], dtype=np.float32),
    }
    ad.save_checkpoint(path, {**meta, **model.param_arrays()})


def load_model(path) -> Model:
    tensors = ad.load_checkpoint(path)
    cfg_arr = tensors.pop("meta/config").astype(int)
    space = list(ColorSpace)[int(tensors.pop("meta/space")[0])]
    seed = int(tensors.pop("meta/seed")[0])
    config = DenseNetConfig(*cfg_arr)
    model = build(config, space, seed)
    for name, t in model.params.items():
        t.data = tensors[name].astype(np.float32)
    return model
