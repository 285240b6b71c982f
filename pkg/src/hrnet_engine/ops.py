"""Differentiable primitives over NCHW float64 tensors.

Each function computes its result eagerly and, when a tape is active, records a
closure mapping the output gradient back to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _emit(op, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected NCHW input, got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p, k, s = self.padding, self.kernel, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    @property
    def num_params(self) -> int:
        n = self.kernel ** 2 * self.in_channels * self.out_channels
        return n + (self.out_channels if self.has_bias else 0)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation."""
    _check4(x, "conv2d")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != expected {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels (dims {x.shape}), spec expects {spec.in_channels}"
        )
    if (bias is not None) != spec.has_bias:
        raise ShapeError("conv2d: bias presence disagrees with spec.has_bias")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")

    k, s, p = spec.kernel, spec.stride, spec.padding
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k}")
    o = spec.out_channels
    q, hw = c * k * k, ho * wo
    # per-image im2col, laid out (N, C*k*k, Ho*Wo) so outputs come out NCHW directly
    if k == 1:
        cols = (x.data[:, :, ::s, ::s] if s > 1 else x.data).reshape(n, c, hw)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        cols6 = np.empty((n, c, k, k, ho, wo))
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        cols = cols6.reshape(n, q, hw)
    wmat = weight.data.reshape(o, q)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def back(g):
        g3 = g.reshape(n, o, hw)
        gw = np.einsum("nop,nqp->oq", g3, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g3)
        if k == 1:
            if s > 1:
                gx = np.zeros(x.shape)
                gx[:, :, ::s, ::s] = gcols.reshape(n, c, ho, wo)
            else:
                gx = gcols.reshape(x.shape)
        else:
            g6 = gcols.reshape(n, c, k, k, ho, wo)
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += g6[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, back)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    training: bool = True

    @classmethod
    def fresh(cls, channels: int, prefix: str = "bn", **kw) -> "BatchNormState":
        return cls(
            Tensor(np.ones(channels), name=f"{prefix}.gamma", requires_grad=True),
            Tensor(np.zeros(channels), name=f"{prefix}.beta", requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization; training mode updates ``state``'s running stats in place."""
    _check4(x, "batch_norm")
    c = x.shape[1]
    if c != state.channels or state.beta.shape[0] != c or state.running_mean.shape[0] != c:
        raise ShapeError(f"batch_norm: input has {c} channels, state has {state.channels}")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)

    if state.training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[:] = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var[:] = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma * xhat + beta
    training = state.training

    def back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gx = (
                inv.reshape(1, c, 1, 1)
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return _emit("batch_norm", (x, state.gamma, state.beta), out, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _same_shapes(xs, what):
    if not xs:
        raise ShapeError(f"{what}: needs at least one input")
    shape = xs[0].shape
    for i, t in enumerate(xs[1:], 1):
        if t.shape != shape:
            raise ShapeError(f"{what}: input {i} has shape {t.shape}, input 0 has {shape}")


def sum_n(xs: list[Tensor]) -> Tensor:
    _same_shapes(xs, "sum_n")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return _emit("sum_n", xs, out, lambda g: [g] * len(xs))


def mul_n(xs: list[Tensor]) -> Tensor:
    _same_shapes(xs, "mul_n")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out *= t.data

    def back(g):
        grads = []
        for i in range(len(xs)):
            gi = g.copy()
            for j, t in enumerate(xs):
                if j != i:
                    gi *= t.data
            grads.append(gi)
        return grads

    return _emit("mul_n", xs, out, back)


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: needs at least one input")
    for t in xs:
        _check4(t, "concat_channels")
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: input {i} has N,H,W {t.shape[0], t.shape[2], t.shape[3]}, "
                             f"input 0 has {ref[0], ref[2], ref[3]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)
    return _emit("concat", xs, out, lambda g: [g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "slice_channels")

    def back(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice", (x,), x.data[:, start:stop].copy(), back)


def _interp_plan(n_in: int, n_out: int):
    """Half-pixel source coordinates, clamped at the edges: (i0, i1, frac)."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, t = _interp_plan(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _emit("resize", (x,), x.data.copy(), lambda g: (g,))
    # lerp form a + t*(b - a) keeps constant inputs exactly constant
    r0, r1, rt = _interp_plan(h, out_h)
    a = x.data[:, :, r0, :]
    rows = a + rt[:, None] * (x.data[:, :, r1, :] - a)
    c0, c1, ct = _interp_plan(w, out_w)
    a = rows[:, :, :, c0]
    out = a + ct * (rows[:, :, :, c1] - a)
    mh, mw = _interp_matrix(h, out_h), _interp_matrix(w, out_w)

    def back(g):
        return (np.einsum("ph,ncpq,qw->nchw", mh, g, mw),)

    return _emit("resize", (x,), out, back)


def _pool_windows(n_in: int, k: int, s: int, ceil_mode: bool):
    if ceil_mode:
        n_out = -(-(n_in - k) // s) + 1
        if (n_out - 1) * s >= n_in:
            n_out -= 1
    else:
        n_out = (n_in - k) // s + 1
    return n_out


def avg_pool(x: Tensor, kernel: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Average pooling; with ``ceil_mode`` partial edge windows average only their valid cells."""
    _check4(x, "avg_pool")
    n, c, h, w = x.shape
    if h < kernel and not ceil_mode or w < kernel and not ceil_mode:
        raise ShapeError(f"avg_pool: input {h}x{w} smaller than kernel {kernel}")
    ho = _pool_windows(h, kernel, stride, ceil_mode)
    wo = _pool_windows(w, kernel, stride, ceil_mode)
    ph = max(0, (ho - 1) * stride + kernel - h)
    pw = max(0, (wo - 1) * stride + kernel - w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
    ones = np.pad(np.ones((h, w)), ((0, ph), (0, pw)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cnt = sliding_window_view(ones, (kernel, kernel))[::stride, ::stride][:ho, :wo].sum(axis=(2, 3))
    out = win.sum(axis=(4, 5)) / cnt

    def back(g):
        gs = g / cnt
        gxp = np.zeros(xp.shape)
        for i in range(kernel):
            for j in range(kernel):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gxp[:, :, :h, :w],)

    return _emit("avg_pool", (x,), out, back)


def max_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    _check4(x, "max_pool")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"max_pool: input {h}x{w} smaller than kernel {kernel}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape)
        di, dj = np.divmod(idx, kernel)
        nn, cc, ii, jj = np.indices((n, c, ho, wo))
        np.add.at(gx, (nn, cc, ii * stride + di, jj * stride + dj), g)
        return (gx,)

    return _emit("max_pool", (x,), out, back)


def avg_pool_global(x: Tensor) -> Tensor:
    _check4(x, "avg_pool_global")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _emit("gap", (x,), out, lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("flatten", (x,), x.data.reshape(shape[0], -1).copy(), lambda g: (g.reshape(shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a 2-D (N, in) input and (out, in) weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, back)


def pad_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Zero-pad bottom/right so H and W become multiples of ``multiple``."""
    _check4(x, "pad")
    h, w = x.shape[2], x.shape[3]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return _emit("pad", (x,), x.data.copy(), lambda g: (g,))
    out = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return _emit("pad", (x,), out, lambda g: (g[:, :, :h, :w],))


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Append zero channels so the result has ``channels`` channels."""
    _check4(x, "pad_channels")
    c = x.shape[1]
    if channels < c:
        raise ShapeError(f"pad_channels: cannot shrink {c} channels to {channels}")
    out = np.zeros((x.shape[0], channels) + x.shape[2:])
    out[:, :c] = x.data
    return _emit("pad_channels", (x,), out, lambda g: (g[:, :c],))


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    return _emit("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(x.shape, float(g) / size),))


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data ** 2, lambda g: (2.0 * x.data * g,))


def dot_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Scalar ``sum(x * c)`` with a constant array ``c``; handy for projecting outputs in tests."""
    c = np.asarray(c, dtype=np.float64)
    return _emit("dot_const", (x,), np.array(np.sum(x.data * c)), lambda g: (float(g) * c,))


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored positions of ``-log softmax(logits)[target]`` (class axis 1)."""
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs target {target.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every position is ignored")
    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (float(g) / count),)

    return _emit("softmax_ce", (logits,), np.array(loss), back)
