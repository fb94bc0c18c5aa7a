"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Everything downstream (attention, sampling heads, losses) is built on the
``Tensor`` class defined here.  Design constraints:

- float32 storage by default; a float64 mode exists so the finite-difference
  gradient checker has a trustworthy oracle.
- deterministic: identical inputs produce bit-identical outputs (numpy's
  fixed reduction order is relied upon, no threading inside an op).
- tensors are immutable after forward construction except for gradient
  accumulation during ``backward``.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "AttnMask",
    "DimensionError",
    "BoundsError",
    "DegenerateMaskError",
    "NumericError",
    "as_tensor",
    "zeros",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "masked_softmax",
    "topk",
    "take_along_axis",
    "bilinear_sample",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class BoundsError(IndexError):
    """An index or count exceeds the valid range."""


class DegenerateMaskError(ValueError):
    """An attention mask blocks an entire row, making softmax undefined."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional array participating in a reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_seq", "_grad_owned")

    # creation sequence; parents always precede children, so it doubles as
    # a topological order for the backward pass
    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple = ()
        self._seq = next(Tensor._counter)
        self._grad_owned = False

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            # Borrow the incoming array instead of copying.  It is safe
            # because accumulated buffers are never mutated in place until
            # this tensor owns one: the second accumulation below allocates
            # a fresh sum rather than writing into the borrowed array.
            if grad.dtype == self.data.dtype:
                self.grad = grad
                self._grad_owned = False
            else:
                self.grad = grad.astype(self.data.dtype)
                self._grad_owned = True
        elif self._grad_owned:
            self.grad += grad.astype(self.data.dtype, copy=False)
        else:
            self.grad = self.grad + grad.astype(self.data.dtype, copy=False)
            self._grad_owned = True

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this (typically scalar) node."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without a seed requires a scalar")
            grad = np.ones_like(self.data)
        # Collect the reachable subgraph with each edge visited once, then
        # order by descending creation sequence: parents are always created
        # before their children, so creation order is a topological order.
        seen: set[int] = {id(self)}
        nodes: list[Tensor] = [self]
        stack_ = [self]
        while stack_:
            node = stack_.pop()
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    nodes.append(p)
                    stack_.append(p)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data, dtype=data.dtype)
        if any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = any(p.requires_grad for p in parents)
            out._parents = parents
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, dtype=self.data.dtype)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bw(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), bw)

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, dtype=self.data.dtype)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, dtype=self.data.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, dtype=self.data.dtype)

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, dtype=self.data.dtype)

        def bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
            )

        return Tensor._make(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, dtype=self.data.dtype) / self

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)
        out_data = self.data**exponent

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor._make(out_data, (self,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # ------------------------------------------------------------------
    # elementwise non-linearities

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), bw)

    def log(self) -> "Tensor":
        def bw(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), bw)

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)

        def bw(g):
            self._accumulate(g * sign)

        return Tensor._make(np.abs(self.data), (self,), bw)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def bw(g):
            self._accumulate(g * mask)

        return Tensor._make(self.data * mask, (self,), bw)

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), bw)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bw(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (self,), bw)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        # straight-through inside the range, zero gradient outside
        mask = (self.data >= lo) & (self.data <= hi)

        def bw(g):
            self._accumulate(g * mask)

        return Tensor._make(np.clip(self.data, lo, hi), (self,), bw)

    # ------------------------------------------------------------------
    # reductions and reshapes

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return Tensor._make(np.asarray(out_data, dtype=self.data.dtype), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bw(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor._make(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, key) -> "Tensor":
        out_data = self.data[key]
        parts = key if isinstance(key, tuple) else (key,)
        advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def bw(g):
            full = np.zeros_like(self.data)
            if advanced:
                np.add.at(full, key, g)  # duplicates must accumulate
            else:
                full[key] += g
            self._accumulate(full)

        return Tensor._make(np.array(out_data), (self,), bw)


# ----------------------------------------------------------------------
# constructors


def as_tensor(value, dtype=np.float32) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


def stack(tensors: list, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul requires at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 1:
            a._accumulate(_unbroadcast(np.multiply.outer(g, b.data), a.shape))
        else:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if a.ndim == 1:
            b._accumulate(_unbroadcast(np.multiply.outer(a.data, g), b.shape))
        else:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make(out_data, (a, b), bw)


# ----------------------------------------------------------------------
# attention masks and softmax


class AttnMask:
    """Boolean blocking matrix: ``blocked[i, j]`` forbids query i -> key j."""

    def __init__(self, blocked: np.ndarray):
        blocked = np.asarray(blocked, dtype=bool)
        if blocked.ndim != 2:
            raise DimensionError("mask must be a 2-d boolean matrix")
        if blocked.size and blocked.all(axis=1).any():
            raise DegenerateMaskError("mask blocks an entire row")
        self.blocked = blocked

    @property
    def rows(self) -> int:
        return self.blocked.shape[0]

    @property
    def cols(self) -> int:
        return self.blocked.shape[1]

    @classmethod
    def none(cls, rows: int, cols: int | None = None) -> "AttnMask":
        if cols is None:
            cols = rows
        return cls(np.zeros((rows, cols), dtype=bool))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        logits._accumulate(out_data * (g - dot))

    return Tensor._make(out_data, (logits,), bw)


def masked_softmax(logits: Tensor, mask: AttnMask) -> Tensor:
    """Softmax over the last axis with blocked positions forced to exact 0.

    The row max and normalizer are computed over unblocked entries only, so
    the output for a row is bit-independent of blocked-column logits.
    """
    logits = as_tensor(logits)
    if logits.ndim < 2 or logits.shape[-2:] != (mask.rows, mask.cols):
        raise DimensionError(
            f"mask {mask.rows}x{mask.cols} does not match logits {logits.shape}"
        )
    blocked = mask.blocked
    neg = np.where(blocked, -np.inf, logits.data)
    with np.errstate(invalid="ignore"):
        shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        grad = out_data * (g - dot)
        logits._accumulate(np.where(blocked, 0.0, grad))

    return Tensor._make(out_data, (logits,), bw)


# ----------------------------------------------------------------------
# selection


def topk(values: Tensor, k: int, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries along ``axis``, descending, ties to smaller index.

    Returns (values, indices); values carry gradient back to the source.
    """
    values = as_tensor(values)
    n = values.shape[axis]
    if k > n:
        raise BoundsError(f"k={k} exceeds extent {n}")
    # stable sort on negated data keeps smaller original index first on ties
    order = np.argsort(-values.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return take_along_axis(values, idx, axis=axis), idx


def take_along_axis(values: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    values = as_tensor(values)
    out_data = np.take_along_axis(values.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(values.data)
        np.put_along_axis(full, indices, g, axis=axis)
        # put_along_axis overwrites on duplicate indices; topk indices are
        # unique along the axis, which is the only caller pattern here
        values._accumulate(full)

    return Tensor._make(out_data, (values,), bw)


# ----------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Sample a (C, H, W) map at P normalized (x, y) points, giving (P, C).

    Uses align-corners grid mapping: x=0 hits column 0, x=1 hits column W-1.
    Out-of-range points clamp to the border, so the op is defined (and
    differentiable, with zero positional gradient past the border) everywhere.
    """
    feature_map = as_tensor(feature_map)
    points = as_tensor(points, dtype=feature_map.data.dtype)
    if feature_map.ndim != 3:
        raise DimensionError("feature map must be (C, H, W)")
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError("points must be (P, 2)")
    c, h, w = feature_map.shape
    dt = feature_map.data.dtype
    p = points.shape[0]
    gx = points.data[:, 0] * (w - 1)
    gy = points.data[:, 1] * (h - 1)
    inside_x = (gx >= 0) & (gx <= w - 1)
    inside_y = (gy >= 0) & (gy <= h - 1)
    gx = np.minimum(np.maximum(gx, 0), w - 1)
    gy = np.minimum(np.maximum(gy, 0), h - 1)
    x0 = np.minimum(np.maximum(np.floor(gx).astype(np.int64), 0), max(w - 2, 0))
    y0 = np.minimum(np.maximum(np.floor(gy).astype(np.int64), 0), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0).astype(dt)
    fy = (gy - y0).astype(dt)

    # one flat gather for all four corners: (C, 4P) split into (C, P) views
    flat_map = feature_map.data.reshape(c, h * w)
    corner_idx = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    corners = flat_map.take(corner_idx, axis=1)
    v00, v01, v10, v11 = (corners[:, i * p : (i + 1) * p] for i in range(4))
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out_data = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).T.copy()  # (P, C)

    def bw(g):
        gt = g.T  # (C, P)
        if feature_map.requires_grad or feature_map._parents:
            full = np.zeros((c, h * w), dtype=dt)
            scatter = np.concatenate([gt * w00, gt * w01, gt * w10, gt * w11], axis=1)
            np.add.at(full, (slice(None), corner_idx), scatter)
            feature_map._accumulate(full.reshape(c, h, w))
        if points.requires_grad or points._parents:
            dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)  # (C, P)
            dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gx_grad = (gt * dvdx).sum(axis=0) * (w - 1) * inside_x
            gy_grad = (gt * dvdy).sum(axis=0) * (h - 1) * inside_y
            points._accumulate(np.stack([gx_grad, gy_grad], axis=1).astype(points.data.dtype))

    return Tensor._make(out_data, (feature_map, points), bw)


# ----------------------------------------------------------------------
# gradient checking


def grad_check(function, inputs, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central differences.

    ``function`` maps the input tensor(s) to a scalar Tensor.  ``inputs`` is a
    Tensor or list of Tensors; each is promoted to float64 so the
    finite-difference oracle is evaluated with 64-bit accumulation.  Returns
    the worst relative error over all input elements.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    probes = [Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64) for t in inputs]

    out = function(*probes)
    if not np.isfinite(out.data).all():
        raise NumericError("function produced non-finite output")
    if out.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    for p in probes:
        p.zero_grad()
    out.backward()

    worst = 0.0
    for p in probes:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            fd[i] = _central_diff(lambda: float(function(*probes).data), flat, i, eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst


def _central_diff(evaluate, flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    hi = evaluate()
    flat[i] = orig - eps
    lo = evaluate()
    flat[i] = orig
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericError("non-finite value during finite differencing")
    return (hi - lo) / (2.0 * eps)


def grad_check_blocks(
    function,
    params: dict,
    eps: float = 1e-5,
    samples_per_block: int = 8,
    seed: int = 0,
) -> dict:
    """Per-parameter-block gradient check on a random element subsample.

    ``function`` takes a dict of float64 probe tensors (same keys as
    ``params``) and returns a scalar Tensor.  Sampling keeps the runtime of
    whole-model checks bounded; a block's reported error is the worst over
    the sampled elements.
    """
    rng = np.random.default_rng(seed)
    probes = {
        name: Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64)
        for name, t in params.items()
    }
    out = function(probes)
    if not np.isfinite(out.data).all():
        raise NumericError("function produced non-finite output")
    for p in probes.values():
        p.zero_grad()
    out.backward()

    report: dict[str, float] = {}
    for name, p in probes.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        count = min(samples_per_block, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            fd = _central_diff(lambda: float(function(probes).data), flat, int(i), eps)
            denom = max(abs(analytic[i]), abs(fd), 1e-6)
            worst = max(worst, abs(analytic[i] - fd) / denom)
        report[name] = worst
    return report
