"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set is closed and enumerated: convolution (stride 1 or 2), nearest
upsampling, elementwise add/sub/mul, sigmoid, ELU, abs, square, exp,
reciprocal, sum/mean reductions, concatenation, forward-difference image
gradients, and bilinear sampling. That is everything the depth network and
the training losses need; there is no general graph compiler.

A ``Tape`` records one node per operation that touches at least one recorded
tensor. Operations whose inputs are all plain numpy arrays run as ordinary
numpy code and return an array, so the same forward functions serve both the
recorded (training) and unrecorded (inference) paths with bit-identical
values.

Working dtype is float32 by default; reductions accumulate in float64. A
float64 tape is supported and is what the gradient checker uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


@dataclass(frozen=True)
class Segment:
    """One named parameter block inside a flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamVector:
    """Flat float32 parameter buffer with a named segment table."""

    def __init__(self, values: np.ndarray, layout: Sequence[Segment]):
        values = np.asarray(values, dtype=np.float32).ravel()
        total = sum(s.size for s in layout)
        if values.size != total:
            raise ValueError(f"layout covers {total} values, buffer has {values.size}")
        self.values = values
        self.layout = tuple(layout)
        self._index = {s.name: s for s in self.layout}

    @classmethod
    def build(cls, shapes: Sequence[tuple[str, tuple[int, ...]]],
              init: Callable[[str, tuple[int, ...]], np.ndarray]) -> "ParamVector":
        """Lay out segments in order and fill each from ``init(name, shape)``."""
        layout, chunks, offset = [], [], 0
        for name, shape in shapes:
            seg = Segment(name, offset, tuple(shape))
            layout.append(seg)
            chunks.append(np.asarray(init(name, shape), dtype=np.float32).ravel())
            offset += seg.size
        return cls(np.concatenate(chunks) if chunks else np.zeros(0, np.float32), layout)

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> Segment:
        return self._index[name]

    def view(self, name: str) -> np.ndarray:
        seg = self._index[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def replaced(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float32).copy(), self.layout)


class Node:
    """One recorded operation: output value plus a vector-Jacobian product."""

    __slots__ = ("op", "parents", "value", "vjp")

    def __init__(self, op: str, parents: tuple[int, ...], value: np.ndarray,
                 vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None):
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp


class Tensor:
    """Handle to one node's value on a tape."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class Tape:
    """Single-writer record of a differentiable computation.

    Nodes are appended in execution order. ``backward`` walks them in reverse
    and accumulates gradients into every recorded node; leaves are looked up
    afterwards with ``grad``.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []

    def _record(self, op: str, parents: tuple[int, ...], value: np.ndarray, vjp) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op '{op}' produced a non-finite value")
        self.nodes.append(Node(op, parents, value, vjp))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, data: np.ndarray) -> Tensor:
        """Record an input tensor with no parents."""
        arr = np.asarray(data, dtype=self.dtype)
        return self._record("leaf", (), arr, None)

    def leaves(self, params: ParamVector) -> dict[str, Tensor]:
        """Record every parameter segment as a leaf, keyed by segment name."""
        return {s.name: self.leaf(params.view(s.name)) for s in params.layout}

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) for every node reachable from root.

        The root must be scalar. Gradients of nodes used more than once are
        summed over all uses.
        """
        if root.tape is not self:
            raise ValueError("root tensor belongs to a different tape")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        self.grads = [None] * len(self.nodes)
        self.grads[root.node_id] = np.ones_like(self.nodes[root.node_id].value)
        for nid in range(root.node_id, -1, -1):
            g = self.grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for pid, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None:
                    continue
                if self.grads[pid] is None:
                    self.grads[pid] = contrib.astype(self.dtype, copy=True)
                else:
                    self.grads[pid] = self.grads[pid] + contrib.astype(self.dtype, copy=False)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward root with respect to ``t`` (zeros if unused)."""
        g = self.grads[t.node_id]
        return np.zeros_like(t.data) if g is None else g

    def param_grads(self, params: ParamVector, leaf_map: dict[str, Tensor]) -> np.ndarray:
        """Gather leaf gradients back into one flat float32 vector."""
        out = np.zeros(params.size, dtype=np.float32)
        for seg in params.layout:
            t = leaf_map.get(seg.name)
            if t is None:
                continue
            out[seg.offset:seg.offset + seg.size] = self.grad(t).ravel().astype(np.float32)
        return out


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    return None


def _raw(x):
    """Tensor value or the operand unchanged (python scalars stay weak)."""
    return x.data if isinstance(x, Tensor) else x


def _val(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _pid(x) -> int:
    return x.node_id if isinstance(x, Tensor) else -1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    return out


def _binary(op: str, a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return _finite(op, np.asarray(fwd(_raw(a), _raw(b))))
    av, bv = _val(a, tape.dtype), _val(b, tape.dtype)
    out = fwd(av, bv)

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, av, bv, out), av.shape) if isinstance(a, Tensor) else None
        gb = _unbroadcast(vjp_b(g, av, bv, out), bv.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return tape._record(op, (_pid(a), _pid(b)), out, vjp)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def _unary(op: str, x, fwd, vjp_fn):
    tape = _tape_of(x)
    if tape is None:
        return _finite(op, fwd(_val(x)))
    xv = _val(x)
    out = fwd(xv)
    return tape._record(op, (x.node_id,), out, lambda g: (vjp_fn(g, xv, out),))


def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary("sigmoid", x, fwd, lambda g, v, o: g * o * (1.0 - o))


def elu(x, alpha: float = 1.0):
    def fwd(v):
        return np.where(v > 0, v, alpha * np.expm1(v)).astype(v.dtype)

    def vjp(g, v, o):
        return g * np.where(v > 0, np.ones_like(v), o + alpha)

    return _unary("elu", x, fwd, vjp)


def abs_(x):
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def square(x):
    return _unary("square", x, np.square, lambda g, v, o: g * 2.0 * v)


def exp_(x):
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def reciprocal(x):
    return _unary("reciprocal", x, lambda v: 1.0 / v, lambda g, v, o: -g * o * o)


def sum_(x):
    """Reduce to a scalar; accumulation runs in float64."""

    def fwd(v):
        return np.asarray(v.sum(dtype=np.float64), dtype=v.dtype)

    return _unary("sum", x, fwd, lambda g, v, o: np.broadcast_to(g, v.shape).astype(v.dtype))


def mean(x):
    def fwd(v):
        return np.asarray(v.mean(dtype=np.float64), dtype=v.dtype)

    def vjp(g, v, o):
        return np.broadcast_to(g / v.size, v.shape).astype(v.dtype)

    return _unary("mean", x, fwd, vjp)


def reshape(x, shape):
    shape = tuple(shape)
    tape = _tape_of(x)
    if tape is None:
        return _val(x).reshape(shape)
    orig = x.data.shape
    out = x.data.reshape(shape)
    return tape._record("reshape", (x.node_id,), out, lambda g: (g.reshape(orig),))


def concat(parts: Sequence, axis: int):
    tape = _tape_of(*parts)
    vals = [_val(p, tape.dtype if tape else None) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return _finite("concat", out)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if isinstance(part, Tensor) else None for p, part in zip(pieces, parts))

    return tape._record("concat", tuple(_pid(p) for p in parts), out, vjp)


def minimum(a, b):
    """Elementwise minimum composed from the closed op set.

    min(a, b) = (a + b)/2 - |a - b|/2. At exact ties the gradient splits
    evenly between branches.
    """
    return mul(sub(add(a, b), abs_(sub(a, b))), 0.5)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 1):
    """2D convolution, NCHW input, OIHW kernel, zero padding, stride 1 or 2."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    tape = _tape_of(x, w, b)
    dtype = tape.dtype if tape else _val(x).dtype
    xv, wv = _val(x, dtype), _val(w, dtype)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {xv.shape} and {wv.shape}")
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"channel mismatch: input has {xv.shape[1]}, kernel expects {wv.shape[1]}")
    bv = _val(b, dtype) if b is not None else None
    n, c, h, wdt = xv.shape
    o, _, kh, kw = wv.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wdt} with pad {pad}")
    xpad = np.zeros((n, c, h + 2 * pad, wdt + 2 * pad), dtype=dtype)
    xpad[:, :, pad:pad + h, pad:pad + wdt] = xv
    col = _im2col(xpad, kh, kw, stride, ho, wo)
    wmat = wv.reshape(o, c * kh * kw)
    out = (col @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bv is not None:
        out = out + bv.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    if tape is None:
        return _finite("conv2d", out)

    def vjp(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = None
        if isinstance(x, Tensor):
            gcol = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gpad = np.zeros_like(xpad)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[:, :, i, j]
            gx = gpad[:, :, pad:pad + h, pad:pad + wdt]
        gw = (gflat.T @ col).reshape(o, c, kh, kw) if isinstance(w, Tensor) else None
        gb = g.sum(axis=(0, 2, 3)) if isinstance(b, Tensor) else None
        return gx, gw, gb

    return tape._record("conv2d", (_pid(x), _pid(w), _pid(b)), out, vjp)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling over the last two axes of an NCHW tensor."""
    tape = _tape_of(x)
    xv = _val(x)
    out = np.repeat(np.repeat(xv, 2, axis=-2), 2, axis=-1)
    if tape is None:
        return out

    def vjp(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return tape._record("upsample2x", (x.node_id,), out, vjp)


def diff_x(x):
    """Forward differences along the last axis; output drops the last column."""
    tape = _tape_of(x)
    xv = _val(x)
    out = xv[..., 1:] - xv[..., :-1]
    if tape is None:
        return out

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[..., 1:] += g
        gx[..., :-1] -= g
        return (gx,)

    return tape._record("diff_x", (x.node_id,), out, vjp)


def diff_y(x):
    """Forward differences along the second-to-last axis; output drops the last row."""
    tape = _tape_of(x)
    xv = _val(x)
    out = xv[..., 1:, :] - xv[..., :-1, :]
    if tape is None:
        return out

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[..., 1:, :] += g
        gx[..., :-1, :] -= g
        return (gx,)

    return tape._record("diff_y", (x.node_id,), out, vjp)


def _bilinear_parts(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"bilinear_sample needs at least a 2x2 image, got {img.shape}")
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    # Coordinates exactly on the far edge keep the previous cell with
    # fractional weight 1; anything outside the image stays invalid.
    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    x0[~valid] = 0
    y0[~valid] = 0
    fu = np.where(valid, u - x0, 0.0).astype(img.dtype)
    fv = np.where(valid, v - y0, 0.0).astype(img.dtype)
    return valid, x0, y0, fu, fv


def bilinear_sample(img, coords):
    """Sample ``img`` (H, W) at subpixel ``coords`` (N, 2) as (u, v) pairs.

    Returns ``(values, valid)``. A sample is valid only when its four
    bilinear neighbors are inside the image; invalid samples return value 0
    and propagate no gradient. Coordinates are never clamped. ``valid`` is a
    plain boolean array, not a tensor.
    """
    tape = _tape_of(img, coords)
    dtype = tape.dtype if tape else _val(img).dtype
    iv, cv = _val(img, dtype), _val(coords, dtype)
    if iv.ndim != 2:
        raise ValueError(f"bilinear_sample expects a 2D image, got shape {iv.shape}")
    if cv.ndim != 2 or cv.shape[1] != 2:
        raise ValueError(f"coords must be (N, 2), got {cv.shape}")
    u, v = cv[:, 0].astype(np.float64), cv[:, 1].astype(np.float64)
    valid, x0, y0, fu, fv = _bilinear_parts(iv, u, v)
    i00 = iv[y0, x0]
    i01 = iv[y0, x0 + 1]
    i10 = iv[y0 + 1, x0]
    i11 = iv[y0 + 1, x0 + 1]
    top = i00 * (1.0 - fu) + i01 * fu
    bot = i10 * (1.0 - fu) + i11 * fu
    out = (top * (1.0 - fv) + bot * fv).astype(dtype)
    out[~valid] = 0.0
    if tape is None:
        return _finite("bilinear_sample", out), valid

    def vjp(g):
        gm = g * valid
        gi = None
        if isinstance(img, Tensor):
            gi = np.zeros_like(iv)
            np.add.at(gi, (y0, x0), gm * (1.0 - fu) * (1.0 - fv))
            np.add.at(gi, (y0, x0 + 1), gm * fu * (1.0 - fv))
            np.add.at(gi, (y0 + 1, x0), gm * (1.0 - fu) * fv)
            np.add.at(gi, (y0 + 1, x0 + 1), gm * fu * fv)
        gc = None
        if isinstance(coords, Tensor):
            du = (1.0 - fv) * (i01 - i00) + fv * (i11 - i10)
            dv = (1.0 - fu) * (i10 - i00) + fu * (i11 - i01)
            gc = np.stack([gm * du, gm * dv], axis=1).astype(dtype)
        return gi, gc

    t = tape._record("bilinear_sample", (_pid(img), _pid(coords)), out, vjp)
    return t, valid


def stack_uv(u, v):
    """Pack two length-N tensors into (N, 2) coordinate pairs."""
    n = (_val(u)).size
    return concat([reshape(u, (n, 1)), reshape(v, (n, 1))], axis=1)


def grad_check(fn, params: ParamVector, h: float = 1e-6, indices=None,
               eps: float = 1e-8) -> float:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn(tape, leaf_map)`` must build a scalar tensor from the leaves it is
    given. The check runs on a float64 tape so the finite differences are
    trustworthy at small ``h``. Returns the worst relative error
    |analytic - fd| / max(|analytic|, |fd|, eps) over the checked indices.
    """
    tape = Tape(dtype=np.float64)
    leaf_map = tape.leaves(params)
    root = fn(tape, leaf_map)
    tape.backward(root)
    analytic = np.zeros(params.size, dtype=np.float64)
    for seg in params.layout:
        analytic[seg.offset:seg.offset + seg.size] = tape.grad(leaf_map[seg.name]).ravel()

    if indices is None:
        indices = range(params.size)

    def evaluate(vec: np.ndarray) -> float:
        t = Tape(dtype=np.float64)
        lm = {s.name: t.leaf(vec[s.offset:s.offset + s.size].reshape(s.shape)) for s in params.layout}
        return float(fn(t, lm).data)

    base = params.values.astype(np.float64)
    worst = 0.0
    for i in indices:
        step = h * max(1.0, abs(base[i]))
        vec = base.copy()
        vec[i] = base[i] + step
        fp = evaluate(vec)
        vec[i] = base[i] - step
        fm = evaluate(vec)
        fd = (fp - fm) / (2.0 * step)
        denom = max(abs(analytic[i]), abs(fd), eps)
        worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst
