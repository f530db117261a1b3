"""Minimal dense tensors with reverse-mode autodiff.

Just enough machinery to train small convolutional recurrent models on a
CPU: float32 buffers, an explicit gradient tape, a handful of pointwise
ops, a conv2d built on im2col, and SGD/Adam. Accumulating reductions
(conv2d, mse, sumsq) run in float64 so finite-difference checks stay tight.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """Dense row-major array with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def copy_(self, other: "Tensor") -> None:
        if other.data.shape != self.data.shape:
            raise ValueError(f"copy_ shape mismatch {other.data.shape} vs {self.data.shape}")
        self.data[...] = other.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float32), requires_grad)


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Surface NaN/Inf as an error instead of silently propagating."""
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"{name} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# gradient tape

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Append-only record of one forward pass.

    Ops executed while a tape is active register a backward closure; calling
    backward() replays them in reverse and accumulates gradients into every
    reachable requires_grad tensor. A tape is single-use: it is cleared by
    backward() and cannot be replayed.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape; re-run the forward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self._ops.clear()


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def tape_record(out: Tensor, inputs, backward) -> Tensor:
    """Register a backward closure for `out` if a tape is live.

    `backward(grad_out)` must accumulate into the inputs' grads via accumulate().
    Custom differentiable ops outside this module use this hook.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, backward))
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an incoming gradient into t.grad, casting to t's dtype."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# pointwise ops (scalar-vs-tensor broadcast only)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcastable "
                     "(only scalar-vs-tensor broadcast is supported)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=np.float64).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data, dtype=(a.data + b.data).dtype)

    def backward(g):
        accumulate(a, _reduce_to(g, a.data.shape))
        accumulate(b, _reduce_to(g, b.data.shape))

    return tape_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=(a.data - b.data).dtype)

    def backward(g):
        accumulate(a, _reduce_to(g, a.data.shape))
        accumulate(b, -_reduce_to(g, b.data.shape))

    return tape_record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=(a.data * b.data).dtype)

    def backward(g):
        accumulate(a, _reduce_to(g * b.data, a.data.shape))
        accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return tape_record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * np.asarray(c, dtype=x.data.dtype), dtype=x.data.dtype)

    def backward(g):
        accumulate(x, g * c)

    return tape_record(out, (x,), backward)


def sigmoid_np(v: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic; shared by autodiff and the fused executor so
    both paths round identically."""
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return y


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    out = Tensor(y, dtype=x.data.dtype)

    def backward(g):
        accumulate(x, g * (y * (1.0 - y)))

    return tape_record(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, dtype=x.data.dtype)

    def backward(g):
        accumulate(x, g * (1.0 - y * y))

    return tape_record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y, dtype=x.data.dtype)

    def backward(g):
        accumulate(x, g * (x.data > 0))

    return tape_record(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)
    out = Tensor(y, dtype=x.data.dtype)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        accumulate(x, g * inside)

    return tape_record(out, (x,), backward)


def concat_channels(tensors) -> Tensor:
    """Concatenate 4-d maps along the channel axis."""
    tensors = list(tensors)
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(f"concat_channels: shape {s} incompatible with {base}")
    cat = np.concatenate([t.data for t in tensors], axis=1)
    out = Tensor(cat, dtype=cat.dtype)
    sizes = [t.data.shape[1] for t in tensors]

    def backward(g):
        off = 0
        for t, c in zip(tensors, sizes):
            accumulate(t, g[:, off:off + c])
            off += c

    return tape_record(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# conv2d


def _im2col(data: np.ndarray, k: int, p: int):
    """[Cin*k*k, B*Ho*Wo] float64 patch matrix for a square kernel."""
    B, C, H, W = data.shape
    xp = np.pad(data, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    patches = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3),
                                   dtype=np.float64).reshape(C * k * k, B * Ho * Wo)
    return patches, Ho, Wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Cross-correlation of NCHW input with [Cout,Cin,k,k] weights.

    Odd square kernels only; default padding (k-1)//2 preserves the spatial
    shape. The inner product runs in float64 and the result is cast back to
    float32 so a brute-force oracle agrees to float32 rounding.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d NCHW, got ndim {x.data.ndim}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-d [Cout,Cin,k,k], got ndim {w.data.ndim}")
    B, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if Cw != Cin:
        raise ValueError(f"conv2d: weight expects {Cw} input channels, input has {Cin}")
    if b is not None and b.data.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {b.data.shape} != ({Cout},)")
    p = (kh - 1) // 2 if padding is None else int(padding)
    if H + 2 * p - kh + 1 < 1 or W + 2 * p - kw + 1 < 1:
        raise ValueError("conv2d: output spatial size is empty")

    # [Cin*k*k, B*Ho*Wo] orientation: much cheaper to materialize from the
    # strided window view than the transposed layout
    patches, Ho, Wo = _im2col(x.data, kh, p)
    wflat = w.data.reshape(Cout, -1).astype(np.float64)
    acc = wflat @ patches                                          # [Cout, B*Ho*Wo]
    if b is not None:
        acc += b.data.astype(np.float64)[:, None]
    out_dtype = np.result_type(x.data.dtype, w.data.dtype)
    out = Tensor(acc.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3).astype(out_dtype),
                 dtype=out_dtype)
    # the float64 patch matrix is too large to keep alive on the tape for
    # every recorded conv; backward rebuilds it from the saved input
    xdata = x.data
    del patches

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3),
                                    dtype=np.float64).reshape(Cout, -1)
        if w.requires_grad:
            patches, _, _ = _im2col(xdata, kh, p)
            accumulate(w, (gmat @ patches.T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            accumulate(b, gmat.sum(axis=1))
        if x.requires_grad:
            # input gradient as a correlation of g with the transposed,
            # spatially flipped kernel (avoids a scatter-add col2im)
            wprime = np.ascontiguousarray(
                w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1],
                dtype=np.float64).reshape(Cin, Cout * kh * kw)
            gimg = g.reshape(B, Cout, Ho, Wo)
            gpatches, Hi, Wi = _im2col(gimg, kh, kh - 1 - p)
            dx = (wprime @ gpatches).reshape(Cin, B, Hi, Wi).transpose(1, 0, 2, 3)
            accumulate(x, dx)

    inputs = (x, w) if b is None else (x, w, b)
    return tape_record(out, inputs, backward)


# ---------------------------------------------------------------------------
# reductions (float64 accumulators, scalar float64 outputs)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse: shape mismatch {a.data.shape} vs {b.data.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Tensor(np.asarray((d * d).mean() if d.size else 0.0), dtype=np.float64)
    n = max(d.size, 1)

    def backward(g):
        gd = (2.0 / n) * float(g) * d
        accumulate(a, gd)
        accumulate(b, -gd)

    return tape_record(out, (a, b), backward)


def sumsq(x: Tensor, div: float = 1.0) -> Tensor:
    """Sum of squares over all elements, divided by `div`."""
    xd = x.data.astype(np.float64)
    out = Tensor(np.asarray((xd * xd).sum() / div), dtype=np.float64)

    def backward(g):
        accumulate(x, (2.0 / div) * float(g) * xd)

    return tape_record(out, (x,), backward)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1_mean: shape mismatch {a.data.shape} vs {b.data.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Tensor(np.asarray(np.abs(d).mean()), dtype=np.float64)
    n = d.size

    def backward(g):
        gd = float(g) * np.sign(d) / n
        accumulate(a, gd)
        accumulate(b, -gd)

    return tape_record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Plain gradient descent, in-place parameter update."""

    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise RuntimeError("SGD.step: parameter has no gradient")
            p.data -= (self.lr * p.grad).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; moment state keyed by parameter identity."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise RuntimeError("Adam.step: parameter has no gradient")
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for p in self.params:
            g = p.grad.astype(np.float64)
            m = self._m.get(id(p))
            v = self._v.get(id(p))
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self._m[id(p)] = m
            self._v[id(p)] = v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
