"""Minimal reverse-mode autodiff over dense numpy arrays.

A ``Tape`` records every primitive applied to tracked tensors while it is
active; ``Tape.backward`` replays the record once, in reverse, and leaves
gradients on the leaf tensors that asked for them.  Outside an active tape
all ops are plain (pure) numpy, so evaluation-mode forwards carry no
recording overhead.

Only the operators the networks and losses require are provided.  Binary
ops deliberately support a narrow broadcast policy: equal shapes, scalar
against tensor, or a parameter-shaped operand (e.g. ``(1, C, 1, 1)``
against ``(N, C, H, W)``) whose broadcast result equals the larger shape.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a non-scalar, or a consumed/inactive tape."""


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


class Tensor:
    """Dense n-dimensional array, optionally participating in a Tape.

    ``data`` is immutable by convention once constructed (the optimizers are
    the single sanctioned exception and run on one thread).  ``grad`` is
    populated by ``Tape.backward`` for leaves with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, context: str = "tensor"):
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are promoted on the spot.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Single-owner record of one forward pass.

    Usage::

        with Tape() as tape:
            loss = some_composition(x, params)
        grads = tape.backward(loss)

    Node ids are tape-local; every recorded op stores the ids of its inputs
    (``None`` for untracked ones) and a closure that maps the output adjoint
    to input adjoints.  ``backward`` visits each recorded op exactly once,
    then the tape is consumed.
    """

    def __init__(self):
        self._ids: dict[int, int] = {}       # id(tensor) -> node id
        self._tensors: list[Tensor] = []     # node id -> tensor (keeps ids stable)
        self._ops: list[tuple[int, tuple, object]] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _node_id(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(t)] = nid
            self._tensors.append(t)
        return nid

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._ids

    def watch(self, t: Tensor):
        """Explicitly register a leaf so it receives a gradient."""
        self._node_id(t)

    def node_id(self, t: Tensor):
        """The tensor's handle into this tape, or None if never recorded."""
        return self._ids.get(id(t))

    def record(self, out: Tensor, inputs: tuple, backward):
        """Append one primitive: ``backward(g_out, needs) -> per-input adjoints``.

        ``needs`` flags which inputs are tracked; closures may return None
        (and skip the work) for unneeded slots.
        """
        in_ids = tuple(self._node_id(t) if self.tracks(t) else None for t in inputs)
        self._ops.append((self._node_id(out), in_ids, backward))

    def backward(self, output: Tensor):
        """Accumulate adjoints for every tracked leaf; consume the tape.

        Returns a dict mapping leaf Tensor -> gradient array.  Leaves that
        required gradients but lie on no path to ``output`` get zeros.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if output.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
        out_id = self._ids.get(id(output))
        if out_id is None:
            raise TapeError("output was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {out_id: np.ones_like(output.data)}
        for op_out, in_ids, bwd in reversed(self._ops):
            g = grads.get(op_out)
            if g is None:
                continue
            in_grads = bwd(g, tuple(nid is not None for nid in in_ids))
            for nid, ig in zip(in_ids, in_grads):
                if nid is None or ig is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = ig if acc is None else acc + ig

        result: dict[Tensor, np.ndarray] = {}
        for nid, t in enumerate(self._tensors):
            if not t.requires_grad:
                continue
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            result[t] = g
        return result


_TAPE_STACK: list[Tape] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, inputs: tuple, backward):
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# Broadcast policy for binary ops


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    try:
        rs = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if rs != sa and rs != sb:
        raise ShapeError(f"{op}: broadcast of {sa} and {sb} matches neither operand")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast adjoint back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise suite


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)
    return _maybe_record(out, (a, b), lambda g, needs: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _maybe_record(out, (a, b), lambda g, needs: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _maybe_record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None)

    return _maybe_record(out, (a, b), bwd)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out = Tensor(x.data * np.asarray(s, dtype=x.dtype))
    return _maybe_record(out, (x,), lambda g, needs: (g * np.asarray(s, dtype=g.dtype),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(y)
    return _maybe_record(out, (x,), lambda g, needs: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed stably; note -log(sigmoid(z)) == softplus(-z)."""
    x = as_tensor(x)
    y = (np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))).astype(x.dtype)
    out = Tensor(y)

    def bwd(g, needs):
        e = np.exp(-np.abs(x.data))
        s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _maybe_record(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))
    return _maybe_record(out, (x,), lambda g, needs: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    out = Tensor(y)
    return _maybe_record(out, (x,), lambda g, needs: (g * 0.5 / y,))


def sign(x) -> Tensor:
    """Elementwise sign with sign(0) = 0; gradient is zero everywhere."""
    x = as_tensor(x)
    out = Tensor(np.sign(x.data))
    return _maybe_record(out, (x,), lambda g, needs: (np.zeros_like(x.data),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.data))
    return _maybe_record(out, (x,), lambda g, needs: (g * np.sign(x.data),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; adjoint passes through where lo <= x <= hi."""
    x = as_tensor(x)
    if lo > hi:
        raise ShapeError(f"clamp: lo={lo} exceeds hi={hi}")
    out = Tensor(np.clip(x.data, lo, hi))

    def bwd(g, needs):
        mask = (x.data >= lo) & (x.data <= hi)
        return (g * mask.astype(g.dtype),)

    return _maybe_record(out, (x,), bwd)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= slope < 1.0:
        raise ShapeError(f"leaky_relu: slope must be in [0, 1), got {slope}")
    out = Tensor(np.where(x.data >= 0, x.data, x.data * np.asarray(slope, dtype=x.dtype)))

    def bwd(g, needs):
        return (np.where(x.data >= 0, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _maybe_record(out, (x,), bwd)


def _reduce_backward(g, shape, axis, keepdims, count, dtype):
    g = np.asarray(g, dtype=dtype)
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(dtype) / np.asarray(count, dtype=dtype)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims, dtype=x.dtype))
    count = x.size // max(out.size, 1)
    return _maybe_record(
        out, (x,), lambda g, needs: (_reduce_backward(g, x.shape, axis, keepdims, count, x.dtype.type),)
    )


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims, dtype=x.dtype))
    return _maybe_record(
        out, (x,), lambda g, needs: (_reduce_backward(g, x.shape, axis, keepdims, 1, x.dtype.type),)
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _maybe_record(out, (x,), lambda g, needs: (g.reshape(x.shape),))


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.dtype for t in ts}) != 1:
        raise ShapeError("concat: mixed dtypes")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(out, tuple(ts), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _maybe_record(out, (a, b), bwd)


def dense(x, w, b) -> Tensor:
    """Affine layer: x @ w + b with x of shape (N, D), w (D, M), b (M,)."""
    return add(matmul(x, w), as_tensor(b))


# ---------------------------------------------------------------------------
# Convolution


def _pair(v):
    return (v, v) if np.isscalar(v) else (int(v[0]), int(v[1]))


# When the gathered-window buffer would exceed this many bytes, switch to
# the per-offset tensordot kernel to avoid cache thrash.
_CONV_SHIFT_BYTES = 24 * 1024 * 1024


def conv2d(x, k, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input against OIHW kernel.

    Differentiable w.r.t. both input and kernel.  Bias is not fused; add a
    (1, O, 1, 1) parameter afterwards.  Two equivalent kernels are used
    (a batched im2col matmul, and a per-offset tensordot for very large
    window buffers); the choice depends only on shapes, so results stay
    deterministic for a given input.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.dtype != k.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {k.dtype}")
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = k.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {i}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    if sh < 1 or sw < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    use_shift = n * c * ho * wo * kh * kw * x.data.itemsize >= _CONV_SHIFT_BYTES

    def _slab(arr, di, dj):
        return arr[:, :, di : di + sh * (ho - 1) + 1 : sh, dj : dj + sw * (wo - 1) + 1 : sw]

    def _cols():
        buf = np.empty((n, kh, kw, c, ho, wo), dtype=xp.dtype)
        for di in range(kh):
            for dj in range(kw):
                buf[:, di, dj] = _slab(xp, di, dj)
        return buf.reshape(n, kh * kw * c, ho * wo)

    if use_shift:
        acc = None
        for di in range(kh):
            for dj in range(kw):
                contrib = np.tensordot(k.data[:, :, di, dj], _slab(xp, di, dj), axes=([1], [1]))
                if acc is None:
                    acc = contrib  # (O, N, Ho, Wo)
                else:
                    acc += contrib
        out = Tensor(np.ascontiguousarray(acc.transpose(1, 0, 2, 3)))
        km = None
    else:
        km = np.ascontiguousarray(k.data.transpose(0, 2, 3, 1)).reshape(o, kh * kw * c)
        out = Tensor(np.matmul(km, _cols()).reshape(n, o, ho, wo))

    def bwd(g, needs):
        gk = gx = None
        if use_shift:
            if needs[1]:
                gk = np.empty_like(k.data)
                for di in range(kh):
                    for dj in range(kw):
                        gk[:, :, di, dj] = np.tensordot(g, _slab(xp, di, dj), axes=([0, 2, 3], [0, 2, 3]))
            if needs[0]:
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for di in range(kh):
                    for dj in range(kw):
                        contrib = np.tensordot(k.data[:, :, di, dj], g, axes=([0], [1]))
                        _slab(gxp, di, dj)[...] += contrib.transpose(1, 0, 2, 3)
                gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
                gx = np.ascontiguousarray(gx)
            return gx, gk
        g2 = g.reshape(n, o, ho * wo)
        if needs[1]:
            gk = np.einsum("nof,nkf->ok", g2, _cols(), optimize=True) \
                .reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            gk = np.ascontiguousarray(gk)
        if needs[0]:
            gcols = np.matmul(km.T, g2).reshape(n, kh, kw, c, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    _slab(gxp, di, dj)[...] += gcols[:, di, dj]
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return _maybe_record(out, (x, k), bwd)


# ---------------------------------------------------------------------------
# Batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, mode: str = "train",
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm on NCHW input.

    ``train`` normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, standard momentum rule); ``eval``
    uses the buffers.  A train-mode batch of one image is rejected: batch
    variance is not meaningfully defined there.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running stats must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ShapeError(f"batch_norm: unknown mode {mode!r}")

    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        if n < 2:
            raise ShapeError("batch_norm: train mode needs batch size >= 2")
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3), dtype=x.dtype)
        var = x.data.var(axis=(0, 2, 3), dtype=x.dtype)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * istd.reshape(1, c, 1, 1)
        out = Tensor(xhat * gview + bview)

        def bwd(g, needs):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
            if not needs[0]:
                return None, gg, gb
            gxhat = g * gview
            iv = istd.reshape(1, c, 1, 1)
            t1 = gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            t2 = xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            return (t1 - t2) * iv, gg, gb

        return _maybe_record(out, (x, gamma, beta), bwd)

    istd = 1.0 / np.sqrt(running_var + eps)
    xhat = ((x.data - running_mean.reshape(1, c, 1, 1)) * istd.reshape(1, c, 1, 1)).astype(x.dtype)
    out = Tensor(xhat * gview + bview)

    def bwd_eval(g, needs):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        gx = g * gview * istd.reshape(1, c, 1, 1).astype(g.dtype) if needs[0] else None
        return gx, gg, gb

    return _maybe_record(out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# Spatial reshaping (input-diversity transform support)


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of an NCHW tensor."""
    x = as_tensor(x)
    if min(top, bottom, left, right) < 0:
        raise ShapeError("pad2d: negative padding")
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))))
    n, c, h, w = x.shape

    def bwd(g, needs):
        return (np.ascontiguousarray(g[:, :, top : top + h, left : left + w]),)

    return _maybe_record(out, (x,), bwd)


def resize_nearest(x, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour spatial resize; adjoint scatter-adds to sources."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize_nearest: output extents must be positive")
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    out = Tensor(np.ascontiguousarray(x.data[:, :, ri[:, None], ci[None, :]]))

    def bwd(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        return (gx,)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Classification loss


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of logits (N, K) against integer labels (N,)."""
    logits = as_tensor(logits)
    y = np.asarray(labels)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    n, k = logits.shape
    if y.min() < 0 or y.max() >= k:
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = (zmax[:, 0] + np.log(ez.sum(axis=1))).astype(logits.dtype)
    out = Tensor(np.asarray((lse - z[np.arange(n), y]).mean(), dtype=logits.dtype))

    def bwd(g, needs):
        p = ez / ez.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        return (np.asarray(g, dtype=p.dtype) * p / n,)

    return _maybe_record(out, (logits,), bwd)
