"""Three-stage defended classifier: denoise, four color-space DenseNets,
progressive activation-map resizing, mean-probability ensemble.

Every input is denoised once in RGB. Each member sees its own color-space
view; its activation map picks a high-density crop of the denoised RGB image
which is enlarged and fed through the member a second time. The final
distribution is the unweighted mean of all 2x4 softmax outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .colorspace import ColorSpace, Image, to_model_input, to_model_input_vjp
from .denoise import DenoiseParams, denoise_array, denoise_array_vjp
from .model import DenseNetConfig, Model, TrainSettings, build, forward_graph, train

__all__ = [
    "DefensePipeline",
    "PipelinePrediction",
    "progressive_crop",
    "best_crop_window",
    "predict",
    "predict_batch",
    "train_pipeline",
    "differentiable_view",
    "PipelineSurface",
]

_MEMBER_ORDER = (ColorSpace.RGB, ColorSpace.LAB, ColorSpace.HSV, ColorSpace.YUV)


@dataclass
class DefensePipeline:
    members: dict[ColorSpace, Model]
    denoiser: DenoiseParams = field(default_factory=DenoiseParams)
    crop_fraction: float = 2.0 / 3.0
    combine: str = "mean_prob"

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("DefensePipeline: crop_fraction must be in (0,1]")
        if self.combine != "mean_prob":
            raise ValueError(f"DefensePipeline: unknown combine rule {self.combine!r}")
        for space, m in self.members.items():
            if m.space != space:
                raise ValueError(f"DefensePipeline: member tagged {space} has space {m.space}")

    def validate_full(self) -> None:
        if set(self.members) != set(_MEMBER_ORDER):
            raise ValueError(
                f"DefensePipeline: members must be exactly RGB/LAB/HSV/YUV, got {sorted(s.value for s in self.members)}"
            )

    def spaces(self) -> list[ColorSpace]:
        return [s for s in _MEMBER_ORDER if s in self.members]

    @property
    def input_size(self) -> int:
        return next(iter(self.members.values())).config.input_size

    @property
    def num_classes(self) -> int:
        return next(iter(self.members.values())).config.num_classes


@dataclass
class PipelinePrediction:
    probs: np.ndarray
    per_member_pass_probs: dict[ColorSpace, tuple[np.ndarray, np.ndarray]]
    crop_boxes: dict[ColorSpace, tuple[int, int, int]]  # (row, col, side)


def best_crop_window(density: np.ndarray, side: int) -> tuple[int, int]:
    """Top-left corner of the side x side window maximizing summed density.

    Exact maximization over all positions via a 2-D prefix sum; ties break to
    the smallest (row, col) in row-major order.
    """
    h, w = density.shape
    if not 1 <= side <= min(h, w):
        raise ValueError(f"best_crop_window: side {side} outside 1..{min(h, w)}")
    ps = np.zeros((h + 1, w + 1), dtype=np.float64)
    ps[1:, 1:] = np.cumsum(np.cumsum(density.astype(np.float64), axis=0), axis=1)
    sums = ps[side:, side:] - ps[:-side, side:] - ps[side:, :-side] + ps[:-side, :-side]
    flat = int(sums.argmax())
    return flat // sums.shape[1], flat % sums.shape[1]


def _density_from_map(activation_map: np.ndarray, size: int) -> np.ndarray:
    density = activation_map.sum(axis=0, dtype=np.float64)[None, None]
    up = ad.resize_bilinear(Tensor(density), size, size)
    return up.data[0, 0]


def _crop_side(crop_fraction: float, size: int) -> int:
    side = int(round(crop_fraction * size))
    if side < 1:
        raise ValueError(f"progressive_crop: crop side {side} < 1 pixel")
    return min(side, size)


def progressive_crop(activation_map: np.ndarray, img: Image, crop_fraction: float) -> Image:
    """Crop the image around the activation map's densest window and resize back."""
    size = img.height
    if img.width != size:
        raise ValueError("progressive_crop: image must be square")
    side = _crop_side(crop_fraction, size)
    density = _density_from_map(activation_map, size)
    r0, c0 = best_crop_window(density, side)
    window = img.data[r0 : r0 + side, c0 : c0 + side, :]
    xt = Tensor(np.transpose(window, (2, 0, 1))[None].astype(np.float32))
    up = ad.resize_bilinear(xt, size, size)
    return Image(np.transpose(up.data[0], (1, 2, 0)), img.space)


def _member_inputs(pipeline: DefensePipeline, rgb_batch: np.ndarray) -> dict[ColorSpace, np.ndarray]:
    return {space: to_model_input(rgb_batch, space) for space in pipeline.spaces()}


def predict_batch(pipeline: DefensePipeline, rgb_batch: np.ndarray) -> np.ndarray:
    """Mean ensemble distribution for an [N,H,W,3] RGB batch in [0,1]."""
    n = len(rgb_batch)
    size = pipeline.input_size
    den = np.stack([denoise_array(rgb_batch[i], pipeline.denoiser) for i in range(n)])
    side = _crop_side(pipeline.crop_fraction, size)
    total = np.zeros((n, pipeline.num_classes), dtype=np.float64)
    for space in pipeline.spaces():
        member = pipeline.members[space]
        x1 = np.transpose(to_model_input(den, space), (0, 3, 1, 2)).astype(np.float32)
        logits1, amaps = _member_forward(member, x1)
        total += _softmax64(logits1).astype(np.float32)
        crops = np.empty_like(den)
        for i in range(n):
            density = _density_from_map(amaps[i], size)
            r0, c0 = best_crop_window(density, side)
            crops[i] = _resize_window(den[i], r0, c0, side, size)
        x2 = np.transpose(to_model_input(crops, space), (0, 3, 1, 2)).astype(np.float32)
        logits2, _ = _member_forward(member, x2)
        total += _softmax64(logits2).astype(np.float32)
    return (total / (2 * len(pipeline.spaces()))).astype(np.float32)


def _member_forward(member: Model, x_nchw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits, amap = forward_graph(member, Tensor(x_nchw))
    return logits.data, amap.data


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _resize_window(img_hwc: np.ndarray, r0: int, c0: int, side: int, size: int) -> np.ndarray:
    window = img_hwc[r0 : r0 + side, c0 : c0 + side, :]
    xt = Tensor(np.transpose(window, (2, 0, 1))[None].astype(np.float32))
    return np.transpose(ad.resize_bilinear(xt, size, size).data[0], (1, 2, 0))


def predict(pipeline: DefensePipeline, img: Image) -> PipelinePrediction:
    """Full defended prediction for one RGB image in [0,1]."""
    if img.space != ColorSpace.RGB:
        raise ValueError("predict: input must be RGB")
    size = pipeline.input_size
    if img.data.shape[:2] != (size, size):
        raise ad.ShapeError(f"predict: image {img.data.shape[:2]} vs pipeline size {size}")
    den = denoise_array(img.data, pipeline.denoiser)
    side = _crop_side(pipeline.crop_fraction, size)

    per_member: dict[ColorSpace, tuple[np.ndarray, np.ndarray]] = {}
    boxes: dict[ColorSpace, tuple[int, int, int]] = {}
    total = np.zeros(pipeline.num_classes, dtype=np.float64)
    for space in pipeline.spaces():
        member = pipeline.members[space]
        x1 = np.transpose(to_model_input(den[None], space), (0, 3, 1, 2)).astype(np.float32)
        logits1, amap = _member_forward(member, x1)
        p1 = _softmax64(logits1)[0].astype(np.float32)
        density = _density_from_map(amap[0], size)
        r0, c0 = best_crop_window(density, side)
        boxes[space] = (r0, c0, side)
        crop = _resize_window(den, r0, c0, side, size)
        x2 = np.transpose(to_model_input(crop[None], space), (0, 3, 1, 2)).astype(np.float32)
        logits2, _ = _member_forward(member, x2)
        p2 = _softmax64(logits2)[0].astype(np.float32)
        per_member[space] = (p1, p2)
        total += p1.astype(np.float64) + p2.astype(np.float64)
    probs = (total / (2 * len(pipeline.spaces()))).astype(np.float32)
    return PipelinePrediction(probs=probs, per_member_pass_probs=per_member, crop_boxes=boxes)


def train_pipeline(
    config: DenseNetConfig,
    images: np.ndarray,
    labels: np.ndarray,
    seeds: dict[ColorSpace, int] | None = None,
    denoiser: DenoiseParams | None = None,
    crop_fraction: float = 2.0 / 3.0,
    phase1: TrainSettings | None = None,
    phase2: TrainSettings | None = None,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
) -> tuple[DefensePipeline, dict[ColorSpace, list]]:
    """Train all four members on denoised data, then continue on the
    crop-augmented set so each image enters every member twice."""
    if len(images) == 0:
        raise ValueError("train_pipeline: empty dataset")
    seeds = seeds or {space: 100 + i for i, space in enumerate(_MEMBER_ORDER)}
    denoiser = denoiser or DenoiseParams()
    phase1 = phase1 or TrainSettings(epochs=6)
    phase2 = phase2 or TrainSettings(epochs=4)
    size = config.input_size
    den = np.stack([denoise_array(images[i], denoiser) for i in range(len(images))])
    side = _crop_side(crop_fraction, size)

    members: dict[ColorSpace, Model] = {}
    logs: dict[ColorSpace, list] = {}
    for space in _MEMBER_ORDER:
        member = build(config, space, seed=seeds[space])
        x_space = to_model_input(den, space)
        log1 = train(
            member,
            x_space,
            labels,
            TrainSettings(**{**phase1.__dict__, "seed": seeds[space]}),
        )
        # progressive resize: crop each training image with the current member
        crops = np.empty_like(den)
        for start in range(0, len(den), 128):
            batch = np.transpose(x_space[start : start + 128], (0, 3, 1, 2)).astype(np.float32)
            _, amaps = _member_forward(member, batch)
            for j in range(len(batch)):
                density = _density_from_map(amaps[j], size)
                r0, c0 = best_crop_window(density, side)
                crops[start + j] = _resize_window(den[start + j], r0, c0, side, size)
        aug_x = np.concatenate([x_space, to_model_input(crops, space)])
        aug_y = np.concatenate([labels, labels])
        log2 = train(
            member,
            aug_x,
            aug_y,
            TrainSettings(**{**phase2.__dict__, "seed": seeds[space] + 1}),
        )
        members[space] = member
        logs[space] = log1 + log2

    pipeline = DefensePipeline(members=members, denoiser=denoiser, crop_fraction=crop_fraction)
    pipeline.validate_full()
    if val_images is not None and val_labels is not None:
        for space in _MEMBER_ORDER:
            acc = _member_accuracy(pipeline, space, val_images, val_labels)
            logs[space].append(("val_acc_clean", acc))
    return pipeline, logs


def _member_accuracy(pipeline: DefensePipeline, space: ColorSpace, images: np.ndarray, labels: np.ndarray) -> float:
    den = np.stack([denoise_array(images[i], pipeline.denoiser) for i in range(len(images))])
    x = np.transpose(to_model_input(den, space), (0, 3, 1, 2)).astype(np.float32)
    correct = 0
    for start in range(0, len(x), 128):
        logits, _ = _member_forward(pipeline.members[space], x[start : start + 128])
        correct += int((logits.argmax(axis=1) == labels[start : start + 128]).sum())
    return correct / len(x)


# ---------------------------------------------------------------------------
# differentiable white-box view


class PipelineSurface:
    """Attack surface exposing the full defense as one differentiable function.

    Non-differentiable pieces are held constant w.r.t. the input
    (straight-through): the MAD sigma / universal threshold inside the
    denoiser, the shrinkage and clamp masks, and each member's crop-window
    argmax. Everything else (color conversions, both member passes, the
    bilinear enlargement, the probability mean) carries exact gradients.
    Exposed "logits" are log(mean probs), preserving argmax and CE semantics.
    """

    def __init__(self, pipeline: DefensePipeline, use_denoiser: bool = True, use_crop: bool = True):
        pipeline.validate_full()
        self.pipeline = pipeline
        self.space: ColorSpace = ColorSpace.RGB
        self.num_classes = pipeline.num_classes
        s = pipeline.input_size
        self.input_shape = (s, s, 3)
        self.use_denoiser = use_denoiser
        self.use_crop = use_crop
        self.queries = 0

    def _lift_space(self, xt: Tensor, space: ColorSpace) -> Tensor:
        if space == ColorSpace.RGB:
            return xt
        return ad.lift(
            xt,
            lambda d: to_model_input(d.transpose(0, 2, 3, 1), space).transpose(0, 3, 1, 2),
            lambda d, g: to_model_input_vjp(
                d.transpose(0, 2, 3, 1), space, g.transpose(0, 2, 3, 1)
            ).transpose(0, 3, 1, 2),
            name=f"to_{space.value}",
        )

    def _graph(self, x_hwc: np.ndarray) -> tuple[Tensor, Tensor]:
        """Build the single-image ensemble graph; returns (input leaf, logits)."""
        pipe = self.pipeline
        size = pipe.input_size
        xt = Tensor(np.transpose(x_hwc, (2, 0, 1))[None].astype(np.float32), requires_grad=True)
        if self.use_denoiser:
            params = pipe.denoiser
            den = ad.lift(
                xt,
                lambda d: np.transpose(denoise_array(np.transpose(d[0], (1, 2, 0)), params), (2, 0, 1))[None],
                lambda d, g: np.transpose(
                    denoise_array_vjp(np.transpose(d[0], (1, 2, 0)), np.transpose(g[0], (1, 2, 0)), params),
                    (2, 0, 1),
                )[None],
                name="denoise",
            )
        else:
            den = xt
        side = _crop_side(pipe.crop_fraction, size)

        prob_terms = []
        for space in pipe.spaces():
            member = pipe.members[space]
            x1 = self._lift_space(den, space)
            logits1, amap = forward_graph(member, x1)
            prob_terms.append(ad.softmax(logits1))
            if self.use_crop:
                density = _density_from_map(amap.data[0], size)
                r0, c0 = best_crop_window(density, side)
                window = ad.crop2d(den, r0, c0, side, side)
                up = ad.resize_bilinear(window, size, size)
            else:
                up = den
            logits2, _ = forward_graph(member, self._lift_space(up, space))
            prob_terms.append(ad.softmax(logits2))

        mean = prob_terms[0]
        for term in prob_terms[1:]:
            mean = ad.add(mean, term)
        mean = ad.scale(mean, 1.0 / len(prob_terms))
        return xt, ad.log(mean)

    def logits(self, x: np.ndarray) -> np.ndarray:
        self.queries += len(x)
        out = np.empty((len(x), self.num_classes), dtype=np.float32)
        for i in range(len(x)):
            _, log_probs = self._graph(x[i])
            out[i] = log_probs.data[0]
        return out

    def grad(self, x: np.ndarray, seed_fn) -> tuple[np.ndarray, np.ndarray]:
        self.queries += len(x)
        logits_out = np.empty((len(x), self.num_classes), dtype=np.float32)
        grads = np.empty_like(x, dtype=np.float32)
        for i in range(len(x)):
            with ad.tape() as tp:
                xt, log_probs = self._graph(x[i])
            logits_out[i] = log_probs.data[0]
            seed = seed_fn(log_probs.data)
            gx = tp.gradients(log_probs, [xt], seed)[0]
            grads[i] = np.transpose(gx[0], (1, 2, 0))
        return logits_out, grads

    def jacobian(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.queries += len(x)
        k = self.num_classes
        logits_out = np.empty((len(x), k), dtype=np.float32)
        jac = np.empty((len(x), k) + x.shape[1:], dtype=np.float32)
        for i in range(len(x)):
            with ad.tape() as tp:
                xt, log_probs = self._graph(x[i])
            logits_out[i] = log_probs.data[0]
            for cls in range(k):
                seed = np.zeros((1, k))
                seed[0, cls] = 1.0
                gx = tp.gradients(log_probs, [xt], seed)[0]
                jac[i, cls] = np.transpose(gx[0], (1, 2, 0))
        return logits_out, jac


def differentiable_view(pipeline: DefensePipeline, use_denoiser: bool = True, use_crop: bool = True) -> PipelineSurface:
    """Expose the defended pipeline to the attacks module."""
    return PipelineSurface(pipeline, use_denoiser=use_denoiser, use_crop=use_crop)


# ---------------------------------------------------------------------------
# checkpoint I/O (a directory: manifest plus one member checkpoint each)

_PIPELINE_MAGIC = "colorshield-pipeline v1"


def save_pipeline(directory, pipeline: DefensePipeline) -> None:
    from pathlib import Path

    from .model import save_model

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        _PIPELINE_MAGIC,
        "spaces " + ",".join(s.value for s in pipeline.spaces()),
        f"crop_fraction {pipeline.crop_fraction!r}",
        f"denoise_levels {pipeline.denoiser.levels}",
        f"combine {pipeline.combine}",
    ]
    for space in pipeline.spaces():
        name = f"member_{space.value}.ckpt"
        save_model(directory / name, pipeline.members[space])
        lines.append(f"member {space.value} {name}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_pipeline(directory) -> DefensePipeline:
    from pathlib import Path

    from .model import load_model

    directory = Path(directory)
    lines = (directory / "manifest.txt").read_text().splitlines()
    if not lines or lines[0] != _PIPELINE_MAGIC:
        raise ValueError(f"load_pipeline: bad manifest in {directory}")
    crop_fraction = 2.0 / 3.0
    levels = 2
    members: dict[ColorSpace, Model] = {}
    for line in lines[1:]:
        if line.startswith("crop_fraction "):
            crop_fraction = float(line.split(" ", 1)[1])
        elif line.startswith("denoise_levels "):
            levels = int(line.split(" ", 1)[1])
        elif line.startswith("member "):
            _, space_name, fname = line.split(" ")
            members[ColorSpace(space_name)] = load_model(directory / fname)
    pipeline = DefensePipeline(
        members=members, denoiser=DenoiseParams(levels=levels), crop_fraction=crop_fraction
    )
    pipeline.validate_full()
    return pipeline
