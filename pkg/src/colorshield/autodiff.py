"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors are plain numpy arrays (float32 storage by default, float64 also
accepted for high-precision checks) plus a ``requires_grad`` flag. Ops
executed inside a ``tape()`` context record themselves onto the tape in
execution order; since execution order is a topological order of the graph,
``Tape.backward`` replays the records exactly once in reverse.

Reductions, convolutions and matrix products accumulate in float64 and cast
back to the storage dtype.
"""

from __future__ import annotations

import re
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "backward",
    "ShapeError",
    "NumericError",
    "forward_op",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when an op receives incompatible extents; names the op."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN/Inf from finite inputs."""


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-dimensional float array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class _Record:
    """One recorded op: output, inputs, and the local vector-Jacobian product."""

    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, name: str):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of ops from one forward pass.

    Execution order is topological, so a single reverse sweep propagates all
    gradients. A tape belongs to one forward pass; build a fresh one per pass.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def _seeded_grads(self, out: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=np.float64)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            contribs = rec.vjp(g)
            for t, contrib in zip(rec.inputs, contribs):
                if contrib is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.asarray(contrib, dtype=np.float64).copy()
                else:
                    acc += contrib
        return grads

    def gradients(self, out: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Pure gradient query: d(sum(seed*out))/d(wrt), without touching .grad.

        ``seed`` defaults to ones; missing paths yield zero gradients.
        """
        if seed is None:
            seed = np.ones_like(out.data, dtype=np.float64)
        grads = self._seeded_grads(out, seed)
        result = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data, dtype=np.float64)
            result.append(g.astype(t.data.dtype))
        return result

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into every requires_grad leaf's .grad."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        produced = {id(rec.out) for rec in self._records}
        grads = self._seeded_grads(loss, np.ones_like(loss.data, dtype=np.float64))
        leaves: dict[int, Tensor] = {}
        for rec in self._records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.data.dtype)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g


_TAPE_STACK: list[Tape] = []


class tape:
    """Context manager activating a fresh Tape for recorded forward ops."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self.tape)
        return self.tape

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the innermost active tape."""
    if not _TAPE_STACK:
        raise RuntimeError("backward: no active tape")
    _TAPE_STACK[-1].backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._records.append(_Record(out, inputs, vjp, name))
    return out


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias against the last axis of a."""
    bias_case = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if a.data.shape != b.data.shape and not bias_case:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def vjp(g):
        gb = g if not bias_case else g.reshape(-1, b.data.shape[0]).sum(axis=0, dtype=np.float64)
        return g, gb

    return _record(out, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record(out, (a, b), vjp, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))

    def vjp(g):
        return (g * s,)

    return _record(out, (a,), vjp, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")
    out64 = a.data.astype(np.float64) @ b.data.astype(np.float64)
    out = Tensor(out64.astype(a.data.dtype))
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T.astype(np.float64), ad.T.astype(np.float64) @ g

    return _record(out, (a, b), vjp, "matmul")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0  # subgradient at exactly 0 is 0

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp, "relu")


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIHW kernel, no bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW input and OIHW kernel, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ci}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} with padding {padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_cols(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(o, c * kh * kw).astype(np.float64)
    out64 = np.matmul(w2, cols)  # [N,O,P]
    out = Tensor(out64.reshape(n, o, oh, ow).astype(x.data.dtype))

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(n, o, oh * ow))
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return _record(out, (x, w), vjp, "conv2d")


def _pool_reshape(x: Tensor, name: str) -> np.ndarray:
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: need NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"{name}: extents {h}x{w} must be even")
    return x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route to the first window element."""
    windows = _pool_reshape(x, "maxpool2")
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    n, c, h, w = x.data.shape

    def vjp(g):
        gwin = np.zeros(windows.shape, dtype=np.float64)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(out, (x,), vjp, "maxpool2")


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    windows = _pool_reshape(x, "avgpool2")
    out = Tensor(windows.mean(axis=-1, dtype=np.float64).astype(x.data.dtype))
    n, c, h, w = x.data.shape

    def vjp(g):
        gwin = np.repeat(g[..., None] * 0.25, 4, axis=-1)
        return (gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(out, (x,), vjp, "avgpool2")


def avgpool_global(x: Tensor) -> Tensor:
    """Global spatial mean: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool_global: need NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape),)

    return _record(out, (x,), vjp, "avgpool_global")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    for t in xs[1:]:
        if t.data.ndim != xs[0].data.ndim or t.data.shape[0] != xs[0].data.shape[0] or t.data.shape[2:] != xs[0].data.shape[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {[u.data.shape for u in xs]}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    sizes = [t.data.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _record(out, tuple(xs), vjp, "concat_channels")


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_batch: empty input list")
    for t in xs[1:]:
        if t.data.shape[1:] != xs[0].data.shape[1:]:
            raise ShapeError(f"concat_batch: incompatible shapes {[u.data.shape for u in xs]}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=0))
    sizes = [t.data.shape[0] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return _record(out, tuple(xs), vjp, "concat_batch")


def affine_channel(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel y = gamma[c]*x + beta[c] on NCHW input."""
    if x.data.ndim != 4:
        raise ShapeError(f"affine_channel: need NCHW input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"affine_channel: params {gamma.data.shape}/{beta.data.shape} vs {c} channels")
    out = Tensor(x.data * gamma.data[None, :, None, None] + beta.data[None, :, None, None])
    xd, gd = x.data, gamma.data

    def vjp(g):
        return (
            g * gd[None, :, None, None],
            np.einsum("nchw,nchw->c", g, xd.astype(np.float64), optimize=True),
            g.sum(axis=(0, 2, 3), dtype=np.float64),
        )

    return _record(out, (x, gamma, beta), vjp, "affine_channel")


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    p64 = _softmax64(x.data)
    out = Tensor(p64.astype(x.data.dtype))

    def vjp(g):
        dot = (g * p64).sum(axis=-1, keepdims=True)
        return (p64 * (g - dot),)

    return _record(out, (x,), vjp, "softmax")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    out = Tensor(np.log(x.data))
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _record(out, (x,), vjp, "log")


def softmax_crossentropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits) against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_crossentropy: need [N,K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_crossentropy: labels shape {labels.shape} vs batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"softmax_crossentropy: label out of range for {k} classes")
    p64 = _softmax64(logits.data)
    nll = -np.log(p64[np.arange(n), labels])
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def vjp(g):
        gl = p64.copy()
        gl[np.arange(n), labels] -= 1.0
        return (gl * (float(g) / n),)

    return _record(out, (logits,), vjp, "softmax_crossentropy")


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape),)

    return _record(out, (x,), vjp, "sum")


def _resize_weights(n_in: int, n_out: int):
    # half-pixel centers, edge-clamped (identity when n_in == n_out)
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, 1.0 - frac, frac


def _resize_axis(arr: np.ndarray, axis: int, i0, i1, w0, w1) -> np.ndarray:
    shape = [1] * arr.ndim
    shape[axis] = len(w0)
    return np.take(arr, i0, axis=axis) * w0.reshape(shape) + np.take(arr, i1, axis=axis) * w1.reshape(shape)


def _resize_axis_adjoint(g: np.ndarray, axis: int, n_in: int, i0, i1, w0, w1) -> np.ndarray:
    shape = [1] * g.ndim
    shape[axis] = len(w0)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    acc = np.zeros(out_shape, dtype=np.float64)
    gm = np.moveaxis(acc, axis, 0)
    np.add.at(gm, i0, np.moveaxis(g * w0.reshape(shape), axis, 0))
    np.add.at(gm, i1, np.moveaxis(g * w1.reshape(shape), axis, 0))
    return acc


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of NCHW spatial extents (half-pixel convention)."""
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear: need NCHW input, got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: bad target {out_h}x{out_w}")
    n, c, h, w = x.data.shape
    if (out_h, out_w) == (h, w):
        out = Tensor(x.data.copy())
        return _record(out, (x,), lambda g: (g,), "resize_bilinear")
    ri0, ri1, rw0, rw1 = _resize_weights(h, out_h)
    ci0, ci1, cw0, cw1 = _resize_weights(w, out_w)
    y = _resize_axis(x.data.astype(np.float64), 2, ri0, ri1, rw0, rw1)
    y = _resize_axis(y, 3, ci0, ci1, cw0, cw1)
    out = Tensor(y.astype(x.data.dtype))

    def vjp(g):
        gy = _resize_axis_adjoint(g, 3, w, ci0, ci1, cw0, cw1)
        return (_resize_axis_adjoint(gy, 2, h, ri0, ri1, rw0, rw1),)

    return _record(out, (x,), vjp, "resize_bilinear")


def crop2d(x: Tensor, r0: int, c0: int, height: int, width: int) -> Tensor:
    """Spatial window [r0:r0+height, c0:c0+width] of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"crop2d: need NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if r0 < 0 or c0 < 0 or height < 1 or width < 1 or r0 + height > h or c0 + width > w:
        raise ShapeError(f"crop2d: window ({r0},{c0},{height},{width}) outside {h}x{w}")
    out = Tensor(x.data[:, :, r0 : r0 + height, c0 : c0 + width].copy())

    def vjp(g):
        gx = np.zeros(x.data.shape, dtype=np.float64)
        gx[:, :, r0 : r0 + height, c0 : c0 + width] = g
        return (gx,)

    return _record(out, (x,), vjp, "crop2d")


def lift(x: Tensor, fn: Callable[[np.ndarray], np.ndarray], vjp_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], name: str = "custom") -> Tensor:
    """Wrap an array function with a hand-written VJP as a differentiable op."""
    out = Tensor(fn(x.data))
    xd = x.data

    def vjp(g):
        return (vjp_fn(xd, g),)

    return _record(out, (x,), vjp, name)


_OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2": maxpool2,
    "avgpool2": avgpool2,
    "avgpool_global": avgpool_global,
    "concat_channels": lambda *xs: concat_channels(xs),
    "affine_channel": affine_channel,
    "softmax_crossentropy": softmax_crossentropy,
    "resize_bilinear": resize_bilinear,
    "softmax": softmax,
    "log": log,
    "sum": sum_all,
    "scale": scale,
    "crop2d": crop2d,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by kind name (shape errors carry the kind)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar-valued tensor function. ``indices`` optionally
    restricts the finite-difference probe to a subset of flat coordinates.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    with tape() as tp:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {y.data.shape}")
    analytic = tp.gradients(y, [x])[0].ravel()

    flat = x.data.ravel()
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        f_lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        numeric = (f_hi - f_lo) / (2.0 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"colorshield-checkpoint v1"
_NAME_RE = re.compile(r"^[A-Za-z0-9_./-]+$")


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named f32 tensors: text manifest, then little-endian payloads."""
    entries = []
    for name, arr in tensors.items():
        if not _NAME_RE.match(name):
            raise ValueError(f"save_checkpoint: bad tensor name {name!r}")
        entries.append((name, np.ascontiguousarray(arr, dtype="<f4")))
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b" %d\n" % len(entries))
        for name, arr in entries:
            dims = "x".join(str(d) for d in arr.shape) or "1"
            fh.write(f"{name} f32 {dims}\n".encode())
        fh.write(b"\n")
        for _, arr in entries:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back; bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if not header.startswith(_MAGIC):
            raise ValueError(f"load_checkpoint: bad header in {path}")
        count = int(header.split(b" ")[-1])
        manifest = []
        for _ in range(count):
            line = fh.readline().rstrip(b"\n").decode()
            name, dtype, dims = line.split(" ")
            if dtype != "f32":
                raise ValueError(f"load_checkpoint: unsupported dtype {dtype}")
            shape = tuple(int(d) for d in dims.split("x"))
            manifest.append((name, shape))
        if fh.readline() != b"\n":
            raise ValueError("load_checkpoint: missing manifest terminator")
        out: dict[str, np.ndarray] = {}
        for name, shape in manifest:
            n = int(np.prod(shape))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"load_checkpoint: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out
