"""Dense tensor primitives with hand-written adjoints.

Tensors are plain ``numpy.ndarray`` values in NCHW layout. Every primitive
comes as a ``*_forward`` function returning ``(out, cache)`` and a matching
``*_backward(dout, cache)`` returning one gradient per differentiable input.
Composition over time and layers is done by :mod:`promnet.tape`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = "float32"


class ShapeError(ValueError):
    """Raised when operand geometry does not satisfy a primitive's contract."""


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global engine precision."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=get_dtype())


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _check_stride(stride: int, padding: int) -> None:
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # Columns laid out (C, kh, kw, N, Ho, Wo) -> (C*kh*kw, N*Ho*Wo); one slice copy per kernel offset.
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # Scatter-add (C*kh*kw, N*Ho*Wo) columns into a zero NCHW image of padded `shape`.
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_nchw(y: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(y.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _to_cm(x: np.ndarray) -> np.ndarray:
    # NCHW -> (C, N*H*W)
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    _check_stride(stride, padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels {cin} != weight input channels {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = w.reshape(cout, -1) @ cols
    if b is not None:
        out += b[:, None]
    return _to_nchw(out, n, ho, wo), (cols, xp.shape, w, stride, padding, ho, wo, b is not None)


def conv2d_backward(dout, cache):
    cols, xp_shape, w, stride, padding, ho, wo, has_bias = cache
    cout, cin, kh, kw = w.shape
    d2 = _to_cm(dout)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1) if has_bias else None
    dxp = _col2im(w.reshape(cout, -1).T @ d2, xp_shape, kh, kw, stride, ho, wo)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw, db


def conv2d_transpose_forward(x, w, b, stride: int = 2, padding: int = 1):
    """Transposed convolution, the input-adjoint of :func:`conv2d_forward`.

    ``w`` has layout ``[Cin, Cout, kh, kw]``, i.e. the same array used as a
    ``[Cout_conv=Cin, Cin_conv=Cout]`` conv2d weight maps back and forth.
    """
    _check_stride(stride, padding)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d_transpose: input channels {cin} != weight input channels {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {b.shape} != ({cout},)")
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output extent {ho}x{wo} is not positive")
    x2 = _to_cm(x)
    padded = (n, cout, ho + 2 * padding, wo + 2 * padding)
    out = _col2im(w.reshape(cin, -1).T @ x2, padded, kh, kw, stride, h, wd)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b[None, :, None, None]
    return out, (x2, w, stride, padding, h, wd, b is not None)


def conv2d_transpose_backward(dout, cache):
    x2, w, stride, padding, h, wd, has_bias = cache
    cin, cout, kh, kw = w.shape
    n = dout.shape[0]
    cols = _im2col(_pad(dout, padding), kh, kw, stride, h, wd)
    dx = _to_nchw(w.reshape(cin, -1) @ cols, n, h, wd)
    dw = (x2 @ cols.T).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling and normalization


def maxpool2d_forward(x, window: int = 2, stride: int = 2):
    """Max pooling; ties resolve to the first element in row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if stride < 1 or window < 1:
        raise ShapeError(f"maxpool2d: window and stride must be positive, got {window}, {stride}")
    n, c, h, wd = x.shape
    if h % stride or wd % stride:
        raise ShapeError(f"maxpool2d: extents {h}x{wd} not divisible by stride {stride}")
    if h < window or wd < window:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{wd}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg, window, stride)


def maxpool2d_backward(dout, cache):
    shape, arg, window, stride = cache
    n, c, h, wd = shape
    ho, wo = arg.shape[2:]
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    flat_idx = rows * wd + cols + (np.arange(n * c) * h * wd).reshape(n, c, 1, 1)
    dx = np.zeros(n * c * h * wd, dtype=dout.dtype)
    if window == stride:
        dx[flat_idx.ravel()] = dout.ravel()
    else:
        np.add.at(dx, flat_idx.ravel(), dout.ravel())
    return (dx.reshape(shape),)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "RunningStats":
        dtype = dtype or get_dtype()
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, running: RunningStats, mode: str = "train",
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization over (N, H, W).

    In train mode the running statistics are updated in place by an
    exponential moving average (unbiased variance).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}")
    g = gamma[None, :, None, None]
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError(f"batchnorm train mode needs N*H*W >= 2 per channel, got {count}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running is not None:
            running.mean[...] = (1 - momentum) * running.mean + momentum * mean
            running.var[...] = (1 - momentum) * running.var + momentum * var * count / (count - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        return xhat * g + beta[None, :, None, None], (mode, xhat, inv, gamma)
    if mode == "infer":
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x - running.mean[None, :, None, None]) * inv[None, :, None, None]
        return xhat * g + beta[None, :, None, None], (mode, xhat, inv, gamma)
    raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(dout, cache):
    mode, xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "infer":
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return (dout * mask,)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_forward(x):
    y = _sigmoid(x)
    return y, y


def sigmoid_backward(dout, y):
    return (dout * y * (1 - y),)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return (dout * (1 - y * y),)


def add_forward(a, b):
    _require_same_shape("add", a, b)
    return a + b, None


def add_backward(dout, cache):
    return dout, dout


def hadamard_forward(a, b):
    _require_same_shape("hadamard", a, b)
    return a * b, (a, b)


def hadamard_backward(dout, cache):
    a, b = cache
    return dout * b, dout * a


def reshape_forward(x, shape: tuple):
    return x.reshape(shape), x.shape


def reshape_backward(dout, shape):
    return (dout.reshape(shape),)


def clamp01_forward(x):
    return np.clip(x, 0.0, 1.0), (x > 0) & (x < 1)


def clamp01_backward(dout, mask):
    return (dout * mask,)


def linear_forward(x, w, b):
    """Affine map ``x[N,D] @ w[D,M] + b[M]`` used by the fully connected baseline."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def lstm_gates_forward(z, c_prev, peep=None):
    """LSTM state update from stacked gate pre-activations.

    ``z`` stacks (i, f, g, o) pre-activations along axis 1 with 4*C channels;
    returns ``(h, c)`` with ``c = f*c_prev + i*g`` and ``h = o*tanh(c)``.
    ``peep`` is an optional ``[3, C]`` array of per-channel peephole weights
    feeding ``c_prev`` into i and f and the new ``c`` into o.
    """
    if z.shape[1] != 4 * c_prev.shape[1] or z.shape[:1] + z.shape[2:] != c_prev.shape[:1] + c_prev.shape[2:]:
        raise ShapeError(f"lstm gates: pre-activation {z.shape} incompatible with cell state {c_prev.shape}")
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    if peep is not None:
        if peep.shape != (3, c_prev.shape[1]):
            raise ShapeError(f"lstm gates: peephole shape {peep.shape} != (3, {c_prev.shape[1]})")
        p = peep[:, None, :, None, None]
        zi = zi + p[0] * c_prev
        zf = zf + p[1] * c_prev
    i, f = _sigmoid(zi), _sigmoid(zf)
    g = np.tanh(zg)
    c = f * c_prev + i * g
    if peep is not None:
        zo = zo + p[2] * c
    o = _sigmoid(zo)
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (i, f, g, o, tc, c_prev, c, peep)


def lstm_gates_backward(douts, cache):
    dh, dc = douts
    i, f, g, o, tc, c_prev, c, peep = cache
    if dh is None:
        dh = np.zeros_like(tc)
    dzo = dh * tc * o * (1 - o)
    dc_total = dh * o * (1 - tc * tc)
    if dc is not None:
        dc_total = dc_total + dc
    if peep is not None:
        dc_total = dc_total + dzo * peep[2][None, :, None, None]
    dzi = dc_total * g * i * (1 - i)
    dzf = dc_total * c_prev * f * (1 - f)
    dzg = dc_total * i * (1 - g * g)
    dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
    dc_prev = dc_total * f
    dpeep = None
    if peep is not None:
        dc_prev = dc_prev + dzi * peep[0][None, :, None, None] + dzf * peep[1][None, :, None, None]
        dpeep = np.stack([
            (dzi * c_prev).sum(axis=(0, 2, 3)),
            (dzf * c_prev).sum(axis=(0, 2, 3)),
            (dzo * c).sum(axis=(0, 2, 3)),
        ])
    return dz, dc_prev, dpeep


def mse_forward(pred, target):
    _require_same_shape("mse_loss", pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), (diff,)


def mse_backward(dout, cache):
    (diff,) = cache
    return (dout * 2.0 * diff / diff.size,)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    return conv2d_forward(x, w, b, stride, padding)[0]


def conv2d_transpose(x, w, b=None, stride: int = 2, padding: int = 1) -> np.ndarray:
    return conv2d_transpose_forward(x, w, b, stride, padding)[0]


def maxpool2d(x, window: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    out, (_, arg, _, _) = maxpool2d_forward(x, window, stride)
    return out, arg


def mse_loss(pred, target) -> float:
    return mse_forward(pred, target)[0]


# ---------------------------------------------------------------------------
# finite-difference checking


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {
    "conv2d": Primitive(conv2d_forward, conv2d_backward),
    "conv2d_transpose": Primitive(conv2d_transpose_forward, conv2d_transpose_backward),
    "maxpool2d": Primitive(maxpool2d_forward, maxpool2d_backward),
    "batchnorm": Primitive(batchnorm_forward, batchnorm_backward),
    "relu": Primitive(relu_forward, relu_backward),
    "sigmoid": Primitive(sigmoid_forward, sigmoid_backward),
    "tanh": Primitive(tanh_forward, tanh_backward),
    "add": Primitive(add_forward, add_backward),
    "hadamard": Primitive(hadamard_forward, hadamard_backward),
    "linear": Primitive(linear_forward, linear_backward),
    "reshape": Primitive(reshape_forward, reshape_backward),
    "clamp01": Primitive(clamp01_forward, clamp01_backward),
    "lstm_gates": Primitive(lstm_gates_forward, lstm_gates_backward),
    "mse_loss": Primitive(mse_forward, mse_backward),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.abs(analytic)
    n = np.abs(numeric)
    denom = np.maximum(np.maximum(a, n), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. elements of ``x`` (mutated in place).

    With ``indices`` only those flat positions are probed and a 1-D array in that
    order comes back; otherwise the result has the shape of ``x``.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(len(positions), dtype=x.dtype)
    for j, k in enumerate(positions):
        orig = flat[k]
        flat[k] = orig + eps
        hi = f()
        flat[k] = orig - eps
        lo = f()
        flat[k] = orig
        out[j] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape) if indices is None else out


def grad_check(op: Primitive | str, inputs: Sequence[np.ndarray], eps: float = 1e-4,
               seed: int = 0, **kwargs) -> float:
    """Max relative error between analytic and central-difference adjoints.

    The op output is contracted with a fixed random upstream tensor so the
    check covers the full Jacobian-vector product. Only float inputs are
    perturbed; ``kwargs`` pass non-differentiable arguments through.
    """
    if isinstance(op, str):
        op = PRIMITIVES[op]
    if get_precision() != "float64":
        raise RuntimeError("grad_check requires float64 precision mode")
    inputs = [np.array(x, dtype=np.float64) if x is not None else None for x in inputs]
    rng = np.random.default_rng(seed)
    out, cache = op.forward(*inputs, **kwargs)
    outs = out if isinstance(out, tuple) else (out,)
    upstream = [rng.standard_normal(np.shape(o)) if np.ndim(o) else 1.0 for o in outs]

    def scalar() -> float:
        # Fresh kwargs copy keeps in-place side effects (running stats) out of the probe.
        probe = {k: _clone(v) for k, v in kwargs.items()}
        o, _ = op.forward(*inputs, **probe)
        os_ = o if isinstance(o, tuple) else (o,)
        return float(sum(np.sum(np.asarray(a) * u) for a, u in zip(os_, upstream)))

    grads = op.backward(tuple(upstream) if isinstance(out, tuple) else upstream[0], cache)
    worst = 0.0
    for x, g in zip(inputs, grads):
        if x is None or g is None:
            continue
        num = numeric_gradient(scalar, x, eps)
        worst = max(worst, relative_error(np.asarray(g), num))
    return worst


def _clone(v):
    if isinstance(v, RunningStats):
        return RunningStats(v.mean.copy(), v.var.copy())
    return v
