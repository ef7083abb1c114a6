"""Dense tensors with reverse-mode differentiation over a recorded tape.

The primitive set is exactly what the rest of the engine needs: elementwise
arithmetic, 2D/batched matmul, reductions, conv2d, relu, 2x2 max pooling,
pixel shuffle, and a per-channel affine used for input normalization.
Tensors wrap contiguous row-major numpy arrays in float32 or float64;
all reductions go through numpy's fixed pairwise summation, so identical
inputs produce bit-identical outputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, GeometryError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_tapes = threading.local()


def _tape_stack():
    stack = getattr(_tapes, "stack", None)
    if stack is None:
        stack = []
        _tapes.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array, optionally participating in gradient taping.

    `data` is always a contiguous-enough numpy array of float32 or float64;
    `grad` is lazily allocated with the same shape and dtype during backward.
    Tensors are treated as immutable once built, except for explicit parameter
    updates (adam_step) and gradient bookkeeping.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                try:
                    arr = arr.astype(np.float32)
                except (ValueError, TypeError) as exc:
                    raise DimensionError(f"tensor data is not numeric: {exc}") from exc
        if arr.dtype not in _FLOAT_DTYPES:
            raise DimensionError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """Underlying array (no copy); treat as read-only."""
        return self.data

    def detach(self):
        """Same storage, detached from any gradient bookkeeping."""
        return Tensor(self.data, requires_grad=False)

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar over the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def relu(self):
        return relu(self)


class Tape:
    """Ordered record of primitive applications for one logical execution.

    Entries are appended in execution order, which is automatically
    topological: every operand of an entry was produced earlier or is a leaf.
    `backward` replays the record once, in reverse.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        backward(loss, self)


def backward(loss, tape):
    """Populate gradients of `loss` on every requires_grad tensor in the tape.

    `loss` must be a scalar (shape ()). Entries whose result received no
    gradient are skipped; each entry is visited exactly once.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward requires a scalar loss, got shape {shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, inputs, back_fn in reversed(tape._entries):
        if out.grad is None:
            continue
        grads = back_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def _emit(data, inputs, back_builder):
    """Wrap `data` as a result tensor, recording a backward rule if taping.

    `back_builder` is called lazily (only when a tape is active and some
    input requires grad) and returns the backward closure, so ops can skip
    saving intermediates on pure inference paths.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._entries.append((out, inputs, back_builder()))
    return out


def _check_binary(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def add(a, b):
    _check_binary(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda: lambda g: (g, g))


def sub(a, b):
    _check_binary(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda: lambda g: (g, -g))


def mul(a, b):
    """Elementwise product; `b` may be a python scalar (constant)."""
    if isinstance(b, (int, float)):
        c = a.data.dtype.type(b)
        return _emit(a.data * c, (a,), lambda: lambda g: (g * c,))
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda: lambda g: (g * bd, g * ad))


def matmul(a, b):
    """2D or batched-3D matrix product; batch extents must match exactly."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: need matching 2D or 3D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    ad, bd = a.data, b.data

    def build():
        def back(g):
            ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
            gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
            return ga, gb

        return back

    return _emit(ad @ bd, (a, b), build)


def transpose_last(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose_last: need ndim >= 2, got {a.shape}")
    return _emit(a.data.swapaxes(-1, -2), (a,), lambda: lambda g: (g.swapaxes(-1, -2),))


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda: lambda g: (g.reshape(old),))


def sum_all(a):
    """Full reduction to a scalar (numpy pairwise summation order)."""
    return _emit(
        np.asarray(a.data.sum()), (a,), lambda: lambda g: (np.broadcast_to(g, a.data.shape),)
    )


def mean_all(a):
    n = a.data.dtype.type(a.size)
    return _emit(
        np.asarray(a.data.mean()),
        (a,),
        lambda: lambda g: (np.broadcast_to(g / n, a.data.shape),),
    )


def relu(x):
    """max(x, 0); backward passes gradient only where x > 0."""
    xd = x.data
    return _emit(np.maximum(xd, 0), (x,), lambda: lambda g: (g * (xd > 0),))


def scale_shift_channels(x, scale, shift):
    """Per-channel affine y = x * scale[c] + shift[c] with constant coefficients.

    Used for input normalization; gradients flow through x only.
    """
    if x.ndim != 4:
        raise DimensionError(f"scale_shift_channels: need [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    scale = np.asarray(scale, dtype=x.data.dtype).reshape(-1)
    shift = np.asarray(shift, dtype=x.data.dtype).reshape(-1)
    if scale.shape[0] != c or shift.shape[0] != c:
        raise DimensionError(
            f"scale_shift_channels: got {scale.shape[0]}/{shift.shape[0]} coefficients for {c} channels"
        )
    s4 = scale[None, :, None, None]
    data = x.data * s4 + shift[None, :, None, None]
    return _emit(data, (x,), lambda: lambda g: (g * s4,))


def conv2d(x, weight, bias, stride=1, pad=0):
    """2D cross-correlation with zero padding.

    x: [B,Cin,H,W], weight: [Cout,Cin,kH,kW], bias: [Cout]. Output extents
    must divide exactly: H' = (H + 2*pad - kH) / stride + 1. Gradients are
    defined for x, weight and bias.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [Cout,Cin,kH,kW], got {weight.shape}")
    if bias.ndim != 1:
        raise DimensionError(f"conv2d: bias must be [Cout], got {bias.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ContractError(f"conv2d: stride must be a positive int, got {stride}")
    if not isinstance(pad, int) or pad < 0:
        raise ContractError(f"conv2d: pad must be a non-negative int, got {pad}")
    b_, cin, h, w_ = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels (axis 1), weight expects {cin_w}")
    if bias.shape[0] != cout:
        raise DimensionError(f"conv2d: bias has {bias.shape[0]} entries for {cout} output channels")
    if x.data.dtype != weight.data.dtype or x.data.dtype != bias.data.dtype:
        raise DimensionError(
            f"conv2d: dtype mismatch {x.data.dtype}/{weight.data.dtype}/{bias.data.dtype}"
        )
    hp, wp = h + 2 * pad, w_ + 2 * pad
    if hp < kh or wp < kw:
        raise GeometryError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise GeometryError(
            f"conv2d: output extent not exact for input {h}x{w_}, kernel {kh}x{kw}, "
            f"pad {pad}, stride {stride}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (B, Ho, Wo, Cin*kH*kW), row-major over (cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b_, ho, wo, -1)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def build():
        saved_cols = cols if weight.requires_grad else None

        def back(g):
            gmat = g.transpose(0, 2, 3, 1)
            gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = np.tensordot(gmat, saved_cols, axes=([0, 1, 2], [0, 1, 2]))
                gw = gw.reshape(weight.data.shape)
            gx = None
            if x.requires_grad:
                gcols = gmat @ wmat
                gc = gcols.reshape(b_, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                gxp = np.zeros((b_, cin, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[
                            :, :, :, :, i, j
                        ]
                gx = gxp[:, :, pad : pad + h, pad : pad + w_] if pad else gxp
            return gx, gw, gb

        return back

    return _emit(out, (x, weight, bias), build)


def max_pool2(x):
    """2x2 max pooling with stride 2; gradient goes to the first row-major argmax."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2: input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"max_pool2: spatial extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # windows flattened row-major: (dy=0,dx=0), (0,1), (1,0), (1,1)
    v = np.ascontiguousarray(
        x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(b, c, h2, w2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def build():
        def back(g):
            gv = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
            gx = gv.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
            return (gx,)

        return back

    return _emit(out, (x,), build)


def pixel_shuffle(x, r):
    """Rearrange [B, C*r*r, H, W] to [B, C, H*r, W*r].

    out[b, c, h*r+dy, w*r+dx] = x[b, c*r*r + dy*r + dx, h, w]; the backward
    pass is the exact inverse rearrangement.
    """
    if x.ndim != 4:
        raise DimensionError(f"pixel_shuffle: input must be [B,C,H,W], got {x.shape}")
    if not isinstance(r, int) or r < 1:
        raise ContractError(f"pixel_shuffle: factor must be a positive int, got {r}")
    b, c2, h, w = x.shape
    if c2 % (r * r):
        raise GeometryError(f"pixel_shuffle: {c2} channels not divisible by {r}^2")
    c = c2 // (r * r)
    out = x.data.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)

    def build():
        def back(g):
            gx = g.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c2, h, w)
            return (gx,)

        return back

    return _emit(np.ascontiguousarray(out), (x,), build)


def pixel_unshuffle(x, r):
    """Inverse of pixel_shuffle: [B, C, H*r, W*r] to [B, C*r*r, H, W]."""
    if x.ndim != 4:
        raise DimensionError(f"pixel_unshuffle: input must be [B,C,H,W], got {x.shape}")
    b, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise GeometryError(f"pixel_unshuffle: extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)

    def build():
        def back(g):
            gx = (
                g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, hr, wr)
            )
            return (gx,)

        return back

    return _emit(np.ascontiguousarray(out), (x,), build)


@dataclass
class AdamState:
    """Adam optimizer state: per-parameter moment buffers and a step counter."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One Adam update with bias correction; params are updated in place.

    `grads` entries may be None (treated as zero). Returns (params, state).
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("adam_step: state was built for a different parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if m.shape != p.data.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
