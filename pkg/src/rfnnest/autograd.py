"""
Minimal reverse-mode autodiff over numpy arrays.

Only the operations the fusion networks and losses need are provided:
conv2d (zero or reflection padding), relu, 2x2 max pooling, nearest 2x
upsampling, channel concatenation, a separable Gaussian filter for SSIM,
and elementwise arithmetic with broadcasting.

Graphs are built eagerly. Calling ``backward()`` on a scalar tensor
accumulates gradients into every leaf that has ``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _result(np.array(out), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 (N,C,H,W) tensor, got shape {x.shape}")


def _pad_index(n: int, p: int) -> np.ndarray:
    return np.pad(np.arange(n), p, mode="reflect")


def _pad_forward(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    rows = _pad_index(x.shape[2], p)
    cols = _pad_index(x.shape[3], p)
    return x[:, :, rows][:, :, :, cols]


def _fold_axis(g: np.ndarray, n: int, p: int, axis: int) -> np.ndarray:
    idx = _pad_index(n, p)
    g = np.moveaxis(g, axis, 0)
    out = g[p : p + n].copy()
    for i in list(range(p)) + list(range(n + p, n + 2 * p)):
        out[idx[i]] += g[i]
    return np.moveaxis(out, 0, axis)


def _pad_backward(g: np.ndarray, p: int, mode: str, h: int, w: int) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zeros":
        return g[:, :, p : p + h, p : p + w]
    return _fold_axis(_fold_axis(g, h, p, 2), w, p, 3)


PAD_MODES = ("zeros", "reflect")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    pad_mode: str = "zeros",
) -> Tensor:
    """Stride-1 2D cross-correlation.

    ``pad_mode`` is ``"zeros"`` or ``"reflect"``; the fusion networks use
    reflection so borders are not darkened.
    """
    _check_rank4(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    if pad_mode not in PAD_MODES:
        raise ConfigError(f"unknown pad mode {pad_mode!r}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    k = kh
    n, _, h, w = x.shape
    xp = _pad_forward(x.data, padding, pad_mode)
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {k} with padding {padding}")
    wmat = weight.data.reshape(cout, -1)

    def im2col(arr):
        if k == 1:
            return arr.transpose(0, 2, 3, 1).reshape(-1, cin)
        win = sliding_window_view(arr, (k, k), axis=(2, 3))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)

    out = im2col(xp) @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ im2col(xp)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = _pad_backward(gxp, padding, pad_mode, h, w)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _result(out, parents, lambda g: backward(g)[:2])
    return _result(out, parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    _check_rank4(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        mask = np.zeros_like(win)
        np.put_along_axis(mask, arg[..., None], g[..., None], axis=-1)
        return (mask.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check_rank4(x, "upsample2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _check_rank4(t, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels shape mismatch: {ref} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _result(out, tuple(xs), backward)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window."""
    return getitem(x, (slice(None), slice(None), slice(0, h), slice(0, w)))


def reflect_pad_to(x: Tensor, h: int, w: int) -> Tensor:
    """Reflection-pad bottom/right edges up to ``h x w``."""
    _check_rank4(x, "reflect_pad_to")
    _, _, h0, w0 = x.shape
    ph, pw = h - h0, w - w0
    if ph == 0 and pw == 0:
        return x
    rows = np.pad(np.arange(h0), (0, ph), mode="reflect")
    cols = np.pad(np.arange(w0), (0, pw), mode="reflect")
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        gr = np.zeros(g.shape[:2] + (h0, g.shape[3]), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros(g.shape[:2] + (h0, w0), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return _result(out, (x,), backward)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_filter(x: Tensor, window: np.ndarray) -> Tensor:
    """Separable per-channel 'valid' filtering with a 1D window applied along H then W."""
    _check_rank4(x, "gaussian_filter")
    k = len(window)
    n, c, h, w = x.shape
    if h < k or w < k:
        raise InputError(f"image {h}x{w} is smaller than the {k}x{k} window")
    win = window.astype(x.dtype)
    tmp = sliding_window_view(x.data, k, axis=2) @ win
    out = sliding_window_view(tmp, k, axis=3) @ win
    ho, wo = h - k + 1, w - k + 1

    def backward(g):
        gt = np.zeros((n, c, ho, w), dtype=g.dtype)
        for i in range(k):
            gt[:, :, :, i : i + wo] += win[i] * g
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(k):
            gx[:, :, i : i + ho, :] += win[i] * gt
        return (gx,)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------
class Parameter(Tensor):
    """A named, optionally frozen leaf tensor."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Optimizer:
    """Adam (default) or plain SGD with a constant learning rate.

    Frozen parameters are skipped even if a stale gradient is attached.
    """

    def __init__(self, lr: float, mode: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if mode not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer mode {mode!r}")
        if lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        self.lr = lr
        self.mode = mode
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        for p in params:
            if not p.trainable or p.grad is None:
                continue
            optimizer_step(p, p.grad, self.lr, self.state, self.mode, self.beta1, self.beta2, self.eps)

    @staticmethod
    def zero_grad(params: Iterable[Parameter]) -> None:
        for p in params:
            p.grad = None


def optimizer_step(
    param: Parameter,
    grad: np.ndarray,
    lr: float,
    state: dict,
    mode: str = "adam",
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Update ``param`` in place; ``state`` is keyed by parameter name and grows lazily."""
    if not param.trainable:
        return
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameter {param.name} {param.shape}")
    if mode == "sgd":
        param.data -= lr * grad
        return
    s = state.get(param.name)
    if s is None:
        s = state[param.name] = {"t": 0, "m": np.zeros_like(param.data), "v": np.zeros_like(param.data)}
    s["t"] += 1
    s["m"] = beta1 * s["m"] + (1 - beta1) * grad
    s["v"] = beta2 * s["v"] + (1 - beta2) * grad * grad
    m_hat = s["m"] / (1 - beta1 ** s["t"])
    v_hat = s["v"] / (1 - beta2 ** s["t"])
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------
def grad_check(
    fn: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-6, order: int = 2
) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients of ``fn`` at ``x``.

    ``order=2`` is the central difference; ``order=4`` the five-point stencil,
    whose O(eps^4) truncation error allows a larger step (less round-off) on
    functions with tiny gradient entries. Relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if order not in (2, 4):
        raise InputError(f"finite-difference order must be 2 or 4, got {order}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = fn(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise InputError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad

    # (offset in steps, coefficient)
    stencil = ((1, 0.5), (-1, -0.5)) if order == 2 else ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for step, coef in stencil:
                flat[i] = orig + step * eps
                acc += coef * fn(Tensor(base.copy())).item()
            flat[i] = orig
            num_flat[i] = acc / eps
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
