"""Gradient-based adversarial attacks against any differentiable surface.

All attacks operate on RGB images in [0,1] through the small ``Surface``
protocol (batched logits + seeded input gradients), so the same code path
runs against a bare classifier and against the full defense pipeline.

Sign convention: by default every gradient attack ascends the true-label
loss. ``AttackConfig.paper_sign`` flips FGSM-family steps to the descending
form for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .colorspace import ColorSpace, Image, to_model_input, to_model_input_vjp
from .model import Model, forward_graph

__all__ = [
    "AttackKind",
    "AttackConfig",
    "AttackResult",
    "Distortion",
    "ModelSurface",
    "fgsm",
    "rand_fgsm",
    "bim",
    "deepfool",
    "jsma",
    "carlini_wagner",
    "measure_distortion",
    "craft_batch",
]


class AttackKind(Enum):
    FGSM = "fgsm"
    RAND_FGSM = "rand_fgsm"
    BIM = "bim"
    DEEPFOOL = "deepfool"
    JSMA = "jsma"
    CW = "cw"


@dataclass
class CWParams:
    c_init: float = 1e-2
    c_search_steps: int = 5
    kappa: float = 0.0
    steps: int = 1000
    lr: float = 1e-2
    abort_early: bool = True

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("CWParams: kappa must be >= 0")


@dataclass
class JSMAParams:
    theta: float = 1.0
    gamma: float = 0.1
    pairs: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("JSMAParams: gamma must be in (0,1]")


@dataclass
class DeepFoolParams:
    overshoot: float = 0.02
    max_iter: int = 50


@dataclass
class AttackConfig:
    kind: AttackKind = AttackKind.FGSM
    epsilon: float = 0.1
    alpha: float = 0.01
    iterations: int = 10
    target: int | None = None
    cw: CWParams = field(default_factory=CWParams)
    jsma: JSMAParams = field(default_factory=JSMAParams)
    deepfool: DeepFoolParams = field(default_factory=DeepFoolParams)
    seed: int = 0
    paper_sign: bool = False


@dataclass
class Distortion:
    l2_normalized: float
    linf: float
    l0: int


@dataclass
class AttackResult:
    adversarial: Image
    distortion_l2: float
    distortion_linf: float
    success: bool
    queries: int
    extra: dict = field(default_factory=dict)


def measure_distortion(original: Image, adversarial: Image) -> Distortion:
    """L2 (RMS per element), Linf, and L0 (spatial pixels changed)."""
    if original.data.shape != adversarial.data.shape:
        raise ad.ShapeError(
            f"measure_distortion: shapes {original.data.shape} vs {adversarial.data.shape}"
        )
    d = adversarial.data.astype(np.float64) - original.data.astype(np.float64)
    l2 = float(np.sqrt((d * d).sum()) / np.sqrt(d.size))
    linf = float(np.abs(d).max()) if d.size else 0.0
    changed = np.any(d != 0, axis=-1) if d.ndim == 3 else d != 0
    return Distortion(l2_normalized=l2, linf=linf, l0=int(changed.sum()))


# ---------------------------------------------------------------------------
# surfaces


class ModelSurface:
    """White-box view of one classifier as a function of RGB [0,1] input.

    For non-RGB models the color conversion + normalization sits inside the
    surface, so the attack domain is always the RGB pixel cube.
    """

    def __init__(self, model: Model):
        self.model = model
        self.space: ColorSpace = ColorSpace.RGB
        self.num_classes = model.config.num_classes
        s = model.config.input_size
        self.input_shape = (s, s, 3)
        self.queries = 0

    def _lifted(self, xt: Tensor) -> Tensor:
        space = self.model.space
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

    def logits(self, x: np.ndarray) -> np.ndarray:
        self.queries += len(x)
        xt = Tensor(np.transpose(x, (0, 3, 1, 2)).astype(np.float32))
        logits, _ = forward_graph(self.model, self._lifted(xt))
        return logits.data

    def grad(self, x: np.ndarray, seed_fn) -> tuple[np.ndarray, np.ndarray]:
        """One forward; returns (logits, d(sum(seed_fn(logits)*logits))/dx)."""
        self.queries += len(x)
        xt = Tensor(np.transpose(x, (0, 3, 1, 2)).astype(np.float32), requires_grad=True)
        with ad.tape() as tp:
            logits, _ = forward_graph(self.model, self._lifted(xt))
        seed = seed_fn(logits.data)
        gx = tp.gradients(logits, [xt], seed)[0]
        return logits.data, np.transpose(gx, (0, 2, 3, 1))

    def jacobian(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full logit Jacobian: (logits [N,K], J [N,K,H,W,C]); one forward."""
        self.queries += len(x)
        xt = Tensor(np.transpose(x, (0, 3, 1, 2)).astype(np.float32), requires_grad=True)
        with ad.tape() as tp:
            logits, _ = forward_graph(self.model, self._lifted(xt))
        n, k = logits.data.shape
        rows = []
        for cls in range(k):
            seed = np.zeros((n, k))
            seed[:, cls] = 1.0
            rows.append(np.transpose(tp.gradients(logits, [xt], seed)[0], (0, 2, 3, 1)))
        return logits.data, np.stack(rows, axis=1)


def _ce_seed(y: np.ndarray):
    """Seed for the gradient of summed per-image cross-entropy."""

    def seed_fn(logits: np.ndarray) -> np.ndarray:
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        return p

    return seed_fn


def _check_domain(surface, x: np.ndarray) -> None:
    if x.shape[1:] != surface.input_shape:
        raise ad.ShapeError(f"attack: input shape {x.shape[1:]} vs surface {surface.input_shape}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("attack: input must lie in [0,1]")


def _predicts(surface, x: np.ndarray) -> np.ndarray:
    return surface.logits(x).argmax(axis=1)


def _success_flags(surface, adv: np.ndarray, y: np.ndarray, target: int | None) -> np.ndarray:
    preds = _predicts(surface, adv)
    return preds == target if target is not None else preds != y


def _single(surface, img: Image, y_true: int | None, config: AttackConfig, crafter) -> AttackResult:
    if img.space != surface.space:
        raise ValueError(f"attack: image space {img.space} != surface space {surface.space}")
    x = img.data[None].astype(np.float32)
    q0 = surface.queries
    adv, extra = crafter(x)
    y = np.array([y_true]) if y_true is not None else _predicts(surface, x)
    success = bool(_success_flags(surface, adv, y, config.target)[0])
    if extra.pop("forced_failure", False):
        success = False
    dist = measure_distortion(img, Image(adv[0], surface.space))
    return AttackResult(
        adversarial=Image(adv[0], surface.space),
        distortion_l2=dist.l2_normalized,
        distortion_linf=dist.linf,
        success=success,
        queries=surface.queries - q0,
        extra=extra,
    )


# ---------------------------------------------------------------------------
# FGSM family


def _fgsm_step(surface, x: np.ndarray, y: np.ndarray, eps: float, paper_sign: bool) -> tuple[np.ndarray, np.ndarray]:
    _, g = surface.grad(x, _ce_seed(y))
    step = np.sign(g).astype(np.float32)
    if paper_sign:
        step = -step
    adv = np.clip(x + np.float32(eps) * step, 0.0, 1.0).astype(np.float32)
    dead = np.all(g == 0, axis=(1, 2, 3))
    adv[dead] = x[dead]
    return adv, dead


def fgsm_batch(surface, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    _check_domain(surface, x)
    return _fgsm_step(surface, x, y, config.epsilon, config.paper_sign)


def fgsm(surface, img: Image, y_true: int, config: AttackConfig) -> AttackResult:
    """Single-step sign attack with Linf budget epsilon."""

    def crafter(x):
        adv, dead = fgsm_batch(surface, x, np.array([y_true]), config)
        return adv, {"forced_failure": bool(dead[0])}

    return _single(surface, img, y_true, config, crafter)


def rand_fgsm_batch(surface, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= config.alpha < config.epsilon:
        raise ValueError("rand_fgsm: need 0 <= alpha < epsilon")
    _check_domain(surface, x)
    rng = np.random.default_rng(config.seed)
    jump = np.sign(rng.standard_normal(x.shape)).astype(np.float32)
    x1 = np.clip(x + np.float32(config.alpha) * jump, 0.0, 1.0).astype(np.float32)
    return _fgsm_step(surface, x1, y, config.epsilon - config.alpha, config.paper_sign)


def rand_fgsm(surface, img: Image, y_true: int, config: AttackConfig) -> AttackResult:
    """Random pre-jump of size alpha, then an (epsilon-alpha) sign step."""

    def crafter(x):
        adv, dead = rand_fgsm_batch(surface, x, np.array([y_true]), config)
        return adv, {"forced_failure": bool(dead[0])}

    return _single(surface, img, y_true, config, crafter)


def bim_batch(surface, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.iterations < 1:
        raise ValueError("bim: iterations must be >= 1")
    if not 0 < config.alpha <= config.epsilon:
        raise ValueError("bim: need 0 < alpha <= epsilon")
    _check_domain(surface, x)
    eps = np.float32(config.epsilon)
    lo = np.clip(x - eps, 0.0, 1.0).astype(np.float32)
    hi = np.clip(x + eps, 0.0, 1.0).astype(np.float32)
    adv = x.copy()
    dead = None
    for _ in range(config.iterations):
        adv, step_dead = _fgsm_step(surface, adv, y, config.alpha, config.paper_sign)
        adv = np.clip(adv, lo, hi)
        dead = step_dead if dead is None else dead
        adv[dead] = x[dead]
    return adv, dead


def bim(surface, img: Image, y_true: int, config: AttackConfig) -> AttackResult:
    """Iterative sign attack clipped to the epsilon ball each step."""

    def crafter(x):
        adv, dead = bim_batch(surface, x, np.array([y_true]), config)
        return adv, {"forced_failure": bool(dead[0])}

    return _single(surface, img, y_true, config, crafter)


# ---------------------------------------------------------------------------
# DeepFool

_DF_ETA = 1e-4  # multiplicative boundary crossing margin


def deepfool(surface, img: Image, config: AttackConfig, y_true: int | None = None) -> AttackResult:
    """Untargeted L2 attack via iterated decision-boundary linearization."""
    if surface.num_classes < 2:
        raise ValueError("deepfool: need a multiclass surface")
    if img.space != surface.space:
        raise ValueError(f"attack: image space {img.space} != surface space {surface.space}")
    p = config.deepfool
    x0 = img.data[None].astype(np.float32)
    q0 = surface.queries
    logits0 = surface.logits(x0)[0]
    pred0 = int(logits0.argmax())
    ref = pred0 if y_true is None else int(y_true)

    if pred0 != ref:
        dist = measure_distortion(img, img)
        return AttackResult(
            adversarial=Image(img.data.copy(), surface.space),
            distortion_l2=dist.l2_normalized,
            distortion_linf=dist.linf,
            success=True,
            queries=surface.queries - q0,
            extra={"iterations": 0},
        )

    r_total = np.zeros_like(x0, dtype=np.float64)
    iterations = 0
    flipped = False
    for _ in range(p.max_iter):
        cur = np.clip(x0 + (1.0 + p.overshoot) * r_total, 0.0, 1.0).astype(np.float32)
        logits, jac = surface.jacobian(cur)
        if int(logits[0].argmax()) != ref:
            flipped = True
            break
        z = logits[0].astype(np.float64)
        w = jac[0].astype(np.float64) - jac[0, ref].astype(np.float64)  # [K,H,W,C]
        f = z - z[ref]
        norms = np.sqrt((w.reshape(surface.num_classes, -1) ** 2).sum(axis=1))
        norms[ref] = np.inf
        norms = np.maximum(norms, 1e-12)
        ratios = np.abs(f) / norms
        ratios[ref] = np.inf
        l = int(ratios.argmin())
        r_total += (1.0 + _DF_ETA) * (np.abs(f[l]) / norms[l] ** 2) * w[l]
        iterations += 1
    else:
        cur = np.clip(x0 + (1.0 + p.overshoot) * r_total, 0.0, 1.0).astype(np.float32)
        flipped = int(surface.logits(cur)[0].argmax()) != ref

    adv = np.clip(x0 + (1.0 + p.overshoot) * r_total, 0.0, 1.0).astype(np.float32)
    dist = measure_distortion(img, Image(adv[0], surface.space))
    return AttackResult(
        adversarial=Image(adv[0], surface.space),
        distortion_l2=dist.l2_normalized,
        distortion_linf=dist.linf,
        success=bool(flipped),
        queries=surface.queries - q0,
        extra={"iterations": iterations},
    )


# ---------------------------------------------------------------------------
# JSMA


def saliency_pair_scores(jac: np.ndarray, target: int, domain: np.ndarray) -> np.ndarray:
    """Score matrix over feature pairs (p<q): -alpha*beta where alpha>0, beta<0.

    ``jac`` is [K,F] (logit Jacobian over flat features); invalid pairs and
    out-of-domain features score -inf.
    """
    jt = jac[target].astype(np.float64)
    other = jac.sum(axis=0).astype(np.float64) - jt
    a = jt[:, None] + jt[None, :]
    b = other[:, None] + other[None, :]
    score = -a * b
    invalid = (a <= 0) | (b >= 0)
    score[invalid] = -np.inf
    score[~domain, :] = -np.inf
    score[:, ~domain] = -np.inf
    f = len(jt)
    score[np.tril_indices(f)] = -np.inf  # keep p < q only
    return score


def jsma(surface, img: Image, target: int, config: AttackConfig) -> AttackResult:
    """Greedy targeted L0 attack saturating the best saliency feature pair."""
    if img.space != surface.space:
        raise ValueError(f"attack: image space {img.space} != surface space {surface.space}")
    p = config.jsma
    x = img.data[None].astype(np.float32)
    q0 = surface.queries
    pred = int(surface.logits(x)[0].argmax())
    if target == pred:
        raise ValueError("jsma: target must differ from the current prediction")

    f_count = x.size
    budget = int(np.floor(p.gamma * f_count))
    per_step = 2 if p.pairs else 1
    modified = np.zeros(f_count, dtype=bool)
    success = False
    steps = 0

    while True:
        if modified.sum() + per_step > budget:
            break
        logits, jac = surface.jacobian(x)
        if int(logits[0].argmax()) == target:
            success = True
            break
        flat_jac = jac[0].reshape(surface.num_classes, f_count)
        flat_x = x.ravel()
        domain = (flat_x < 1.0) if p.theta > 0 else (flat_x > 0.0)
        if p.pairs:
            scores = saliency_pair_scores(flat_jac, target, domain)
            best = int(scores.argmax())
            if not np.isfinite(scores.flat[best]):
                break
            pi, qi = divmod(best, f_count)
            picks = (pi, qi)
        else:
            jt = flat_jac[target]
            other = flat_jac.sum(axis=0) - jt
            s = -jt * other
            s[(jt <= 0) | (other >= 0) | ~domain] = -np.inf
            best = int(s.argmax())
            if not np.isfinite(s[best]):
                break
            picks = (best,)
        for i in picks:
            flat_x[i] = np.clip(flat_x[i] + p.theta, 0.0, 1.0)
            modified[i] = True
        steps += 1

    if not success and modified.any():
        success = bool(_success_flags(surface, x, np.array([pred]), target)[0])
    adv = Image(x[0], surface.space)
    dist = measure_distortion(img, adv)
    return AttackResult(
        adversarial=adv,
        distortion_l2=dist.l2_normalized,
        distortion_linf=dist.linf,
        success=success,
        queries=surface.queries - q0,
        extra={"features_modified": int(modified.sum()), "steps": steps},
    )


# ---------------------------------------------------------------------------
# Carlini-Wagner L2


def _cw_seed(y: np.ndarray, target: int | None, kappa: float, c: np.ndarray):
    def seed_fn(logits: np.ndarray) -> np.ndarray:
        n, k = logits.shape
        z = logits.astype(np.float64)
        seed = np.zeros((n, k))
        if target is None:
            zy = z[np.arange(n), y]
            zo = z.copy()
            zo[np.arange(n), y] = -np.inf
            kbest = zo.argmax(axis=1)
            fval = zy - zo[np.arange(n), kbest]
            active = fval > -kappa
            seed[np.arange(n), y] += 1.0
            seed[np.arange(n), kbest] -= 1.0
        else:
            zo = z.copy()
            zo[:, target] = -np.inf
            kbest = zo.argmax(axis=1)
            fval = zo[np.arange(n), kbest] - z[:, target]
            active = fval > -kappa
            seed[np.arange(n), kbest] += 1.0
            seed[:, target] -= 1.0
        return seed * (c * active)[:, None]

    return seed_fn


def _cw_f(logits: np.ndarray, y: np.ndarray, target: int | None) -> np.ndarray:
    z = logits.astype(np.float64)
    n = len(z)
    if target is None:
        zo = z.copy()
        zo[np.arange(n), y] = -np.inf
        return z[np.arange(n), y] - zo.max(axis=1)
    zo = z.copy()
    zo[:, target] = -np.inf
    return zo.max(axis=1) - z[:, target]


def carlini_wagner_batch(
    surface, x: np.ndarray, y: np.ndarray, config: AttackConfig
) -> tuple[np.ndarray, np.ndarray, list[list[tuple[float, bool]]]]:
    """L2 optimization in tanh space with per-image binary search over c.

    Returns (adversarial batch, success flags, per-image (c, success) traces).
    """
    _check_domain(surface, x)
    p = config.cw
    n = len(x)
    x64 = x.astype(np.float64)
    w0 = np.arctanh((2.0 * x64 - 1.0) * 0.999999)

    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    c = np.full(n, p.c_init)
    best_adv = x.copy()
    best_l2 = np.full(n, np.inf)
    ever_success = np.zeros(n, dtype=bool)
    last_adv = x.copy()
    traces: list[list[tuple[float, bool]]] = [[] for _ in range(n)]

    check_every = max(1, p.steps // 10)
    for _ in range(p.c_search_steps):
        w = w0.copy()
        round_success = np.zeros(n, dtype=bool)
        prev_obj = np.full(n, np.inf)
        for step in range(p.steps):
            adv = ((np.tanh(w) + 1.0) / 2.0).astype(np.float32)
            logits, g_attack = surface.grad(adv, _cw_seed(y, config.target, p.kappa, c))
            delta = adv.astype(np.float64) - x64
            g_total = 2.0 * delta + g_attack.astype(np.float64)
            w -= p.lr * g_total * 0.5 * (1.0 - np.tanh(w) ** 2)

            l2sq = (delta * delta).sum(axis=(1, 2, 3))
            preds = logits.argmax(axis=1)
            hit = preds == config.target if config.target is not None else preds != y
            round_success |= hit
            better = hit & (l2sq < best_l2)
            best_adv[better] = adv[better]
            best_l2[better] = l2sq[better]

            if p.abort_early and step % check_every == check_every - 1:
                obj = l2sq + c * np.maximum(_cw_f(logits, y, config.target), -p.kappa)
                if np.all(obj > 0.9999 * prev_obj):
                    break
                prev_obj = obj
        last_adv = ((np.tanh(w) + 1.0) / 2.0).astype(np.float32)
        ever_success |= round_success
        for i in range(n):
            traces[i].append((float(c[i]), bool(round_success[i])))
            if round_success[i]:
                upper[i] = min(upper[i], c[i])
                c[i] = (lower[i] + upper[i]) / 2.0
            else:
                lower[i] = max(lower[i], c[i])
                c[i] = c[i] * 10.0 if np.isinf(upper[i]) else (lower[i] + upper[i]) / 2.0

    out = np.where(ever_success[:, None, None, None], best_adv, last_adv).astype(np.float32)
    return out, ever_success, traces


def carlini_wagner(surface, img: Image, y_true: int, config: AttackConfig) -> AttackResult:
    """L2-minimal attack: tanh reparameterization plus binary search on c."""
    if img.space != surface.space:
        raise ValueError(f"attack: image space {img.space} != surface space {surface.space}")
    x = img.data[None].astype(np.float32)
    q0 = surface.queries
    adv, success, traces = carlini_wagner_batch(surface, x, np.array([y_true]), config)
    out = Image(adv[0], surface.space)
    dist = measure_distortion(img, out)
    return AttackResult(
        adversarial=out,
        distortion_l2=dist.l2_normalized,
        distortion_linf=dist.linf,
        success=bool(success[0]),
        queries=surface.queries - q0,
        extra={"c_trace": traces[0]},
    )


# ---------------------------------------------------------------------------
# dispatch


def craft_batch(surface, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Craft adversarial examples for a batch under one config."""
    kind = config.kind
    if kind == AttackKind.FGSM:
        return fgsm_batch(surface, x, y, config)[0]
    if kind == AttackKind.RAND_FGSM:
        return rand_fgsm_batch(surface, x, y, config)[0]
    if kind == AttackKind.BIM:
        return bim_batch(surface, x, y, config)[0]
    if kind == AttackKind.CW:
        return carlini_wagner_batch(surface, x, y, config)[0]
    if kind == AttackKind.DEEPFOOL:
        out = np.empty_like(x)
        for i in range(len(x)):
            out[i] = deepfool(surface, Image(x[i], surface.space), config, y_true=int(y[i])).adversarial.data
        return out
    if kind == AttackKind.JSMA:
        if config.target is None:
            raise ValueError("jsma: config.target is required")
        out = np.empty_like(x)
        for i in range(len(x)):
            if int(y[i]) == config.target:
                out[i] = x[i]  # no-op when the target equals the true label
                continue
            res = jsma(surface, Image(x[i], surface.space), config.target, config)
            out[i] = res.adversarial.data
        return out
    raise ValueError(f"craft_batch: unknown attack kind {kind}")


def run_attack(surface, img: Image, y_true: int, config: AttackConfig) -> AttackResult:
    """Single-image dispatcher mirroring craft_batch."""
    kind = config.kind
    if kind == AttackKind.FGSM:
        return fgsm(surface, img, y_true, config)
    if kind == AttackKind.RAND_FGSM:
        return rand_fgsm(surface, img, y_true, config)
    if kind == AttackKind.BIM:
        return bim(surface, img, y_true, config)
    if kind == AttackKind.DEEPFOOL:
        return deepfool(surface, img, config, y_true=y_true)
    if kind == AttackKind.JSMA:
        if config.target is None:
            raise ValueError("jsma: config.target is required")
        return jsma(surface, img, config.target, config)
    if kind == AttackKind.CW:
        return carlini_wagner(surface, img, y_true, config)
    raise ValueError(f"run_attack: unknown attack kind {kind}")
