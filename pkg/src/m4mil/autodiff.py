"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is recorded on the tensors themselves: every
operation that touches a gradient-requiring input attaches its input
references and a backward closure to the output. ``Tensor.backward``
walks that graph once in reverse topological order, accumulating
gradients over fan-out. Everything is float64 so finite-difference
checks have headroom.

Only the primitives the bag models need exist. The single broadcasting
rule is adding a 1 x D row (a bias) to an N x D matrix; every op
materialises its output (no views escape).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import AutodiffError, ConfigError, EmptyBagError, ShapeError

# per-thread so concurrent graphs (e.g. parallel folds) stay independent
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation mode)."""
    previous = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def backward(self) -> None:
        """Populate ``grad`` on every gradient-requiring tensor in this graph.

        The receiver must be a single-element tensor produced by a
        recorded forward pass. Calling twice on the same graph raises:
        rebuild the forward pass instead.
        """
        if self.values.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise AutodiffError("backward on a detached tensor: nothing requires gradients")
        if self._backward_ran:
            raise AutodiffError(
                "backward already ran for this graph; run a fresh forward pass first"
            )
        self._backward_ran = True

        # Iterative postorder DFS: producers come out before consumers.
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, idx = stack.pop()
            if idx < len(node._parents):
                stack.append((node, idx + 1))
                child = node._parents[idx]
                if id(child) not in seen:
                    seen.add(id(child))
                    stack.append((child, 0))
            else:
                order.append(node)

        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn()

    # Operator sugar; the full set lives in the module-level functions.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable[[], None]) -> Tensor:
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1 x D bias row against an N x D matrix."""
    broadcast = None  # which operand is the broadcast row
    if a.shape == b.shape:
        pass
    elif a.values.ndim == 2 and b.values.ndim == 2 and b.shape == (1, a.shape[1]):
        broadcast = "b"
    elif a.values.ndim == 2 and b.values.ndim == 2 and a.shape == (1, b.shape[1]):
        broadcast = "a"
    else:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g.sum(axis=0, keepdims=True) if broadcast == "a" else g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True) if broadcast == "b" else g)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")
        out = Tensor(a.values * b.values)

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g * b.values)
            if b.requires_grad:
                b._accumulate(g * a.values)

        return _record(out, (a, b), backward)

    scale = float(b)
    out = Tensor(a.values * scale)

    def backward_scalar():
        if a.requires_grad:
            a._accumulate(out.grad * scale)

    return _record(out, (a,), backward_scalar)


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_array(v) -> np.ndarray:
    """Numerically stable logistic function on a plain numpy array."""
    return _sigmoid_values(np.asarray(v, dtype=np.float64))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: relu, tanh or sigmoid.

    The relu derivative at exactly 0 is defined as 0.
    """
    if kind == "relu":
        vals = np.maximum(x.values, 0.0)
    elif kind == "tanh":
        vals = np.tanh(x.values)
    elif kind == "sigmoid":
        vals = _sigmoid_values(x.values)
    else:
        raise ConfigError(f"unknown activation kind {kind!r}")
    out = Tensor(vals)

    def backward():
        if kind == "relu":
            local = (x.values > 0.0).astype(np.float64)
        elif kind == "tanh":
            local = 1.0 - vals * vals
        else:
            local = vals * (1.0 - vals)
        x._accumulate(local * out.grad)

    return _record(out, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(vals)

    def backward():
        g = out.grad
        inner = (g * vals).sum(axis=axis, keepdims=True)
        x._accumulate(vals * (g - inner))

    return _record(out, (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of an N x D matrix, returned as 1 x D."""
    if x.values.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got shape {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise EmptyBagError("mean over an empty bag")
    out = Tensor(x.values.mean(axis=0, keepdims=True))

    def backward():
        x._accumulate(np.broadcast_to(out.grad / n, x.shape))

    return _record(out, (x,), backward)


def max_rows(x: Tensor) -> Tensor:
    """Column-wise max of an N x D matrix; gradient flows to the first argmax row."""
    if x.values.ndim != 2:
        raise ShapeError(f"max_rows needs a 2-D tensor, got shape {x.shape}")
    n, d = x.shape
    if n == 0:
        raise EmptyBagError("max over an empty bag")
    winners = x.values.argmax(axis=0)  # first index on ties
    out = Tensor(x.values.max(axis=0, keepdims=True))

    def backward():
        g = x._ensure_grad()
        np.add.at(g, (winners, np.arange(d)), out.grad[0])

    return _record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a 1 x 1 tensor."""
    out = Tensor(np.full((1, 1), x.values.sum()))

    def backward():
        x._accumulate(np.broadcast_to(out.grad.reshape(()), x.shape))

    return _record(out, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {x.shape}")
    out = Tensor(x.values.T.copy())

    def backward():
        x._accumulate(out.grad.T)

    return _record(out, (x,), backward)


def _split(x: Tensor, parts: int, axis: int) -> list[Tensor]:
    length = x.shape[axis]
    if parts < 1 or length % parts != 0:
        raise ConfigError(f"cannot split axis of length {length} into {parts} equal parts")
    width = length // parts
    outs = []
    for i in range(parts):
        sl = [slice(None)] * x.values.ndim
        sl[axis] = slice(i * width, (i + 1) * width)
        sl = tuple(sl)
        piece = Tensor(x.values[sl].copy())

        def backward(piece=piece, sl=sl):
            x._ensure_grad()[sl] += piece.grad

        outs.append(_record(piece, (x,), backward))
    return outs


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Split into equal contiguous slices along the last axis."""
    return _split(x, parts, axis=x.values.ndim - 1)


def split_rows(x: Tensor, parts: int) -> list[Tensor]:
    """Split into equal contiguous slices along the first axis."""
    return _split(x, parts, axis=0)


def _concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].values.ndim
    for t in tensors[1:]:
        if t.values.ndim != ndim:
            raise ShapeError("concat operands differ in rank")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(
                    f"concat shapes disagree off axis {axis}: {tensors[0].shape} vs {t.shape}"
                )
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                t._accumulate(out.grad[tuple(sl)])

    return _record(out, tuple(tensors), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (inverse of split_channels)."""
    return _concat(tensors, axis=tensors[0].values.ndim - 1)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis (inverse of split_rows)."""
    return _concat(tensors, axis=0)


def grid_restore(x: Tensor) -> tuple[Tensor, int]:
    """Lay an N x D token matrix on a square ceil(sqrt(N)) grid, row-major.

    The grid is padded to a perfect square by duplicating the first
    ``pad_count`` tokens, appended after the N originals; gradients from
    duplicated cells accumulate back onto their source tokens. Returns
    the S x S x D grid and ``pad_count``.
    """
    if x.values.ndim != 2:
        raise ShapeError(f"grid_restore needs a 2-D tensor, got shape {x.shape}")
    n, d = x.shape
    if n == 0:
        raise EmptyBagError("cannot grid an empty bag")
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    pad_count = side * side - n
    padded = np.concatenate([x.values, x.values[:pad_count]], axis=0)
    out = Tensor(padded.reshape(side, side, d))

    def backward():
        flat = out.grad.reshape(side * side, d)
        g = x._ensure_grad()
        g += flat[:n]
        g[:pad_count] += flat[n:]

    return _record(out, (x,), backward), pad_count


def grid_flatten(grid: Tensor, n: int) -> Tensor:
    """Flatten an S x S x D grid back to the first N tokens, row-major."""
    if grid.values.ndim != 3 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"grid_flatten needs a square S x S x D tensor, got {grid.shape}")
    side, _, d = grid.shape
    if not 1 <= n <= side * side:
        raise ShapeError(f"cannot take {n} tokens from a {side}x{side} grid")
    out = Tensor(grid.values.reshape(side * side, d)[:n].copy())

    def backward():
        grid._ensure_grad().reshape(side * side, d)[:n] += out.grad

    return _record(out, (grid,), backward)


def depthwise_separable_conv2d(
    x: Tensor,
    depth_kernels: Tensor,
    point_weights: Tensor,
    pad: int,
    stride: int,
) -> Tensor:
    """Per-channel k x k convolution followed by a 1 x 1 cross-channel map.

    ``x`` is S x S x C, ``depth_kernels`` is k x k x C, ``point_weights``
    is C x C. Zero padding, no bias, no intermediate nonlinearity.
    Differentiable in all three tensor arguments.
    """
    if x.values.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"conv input must be square S x S x C, got {x.shape}")
    side, _, channels = x.shape
    if depth_kernels.values.ndim != 3 or depth_kernels.shape[0] != depth_kernels.shape[1]:
        raise ShapeError(f"depth kernels must be k x k x C, got {depth_kernels.shape}")
    k = depth_kernels.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if depth_kernels.shape[2] != channels:
        raise ShapeError(
            f"kernel channels {depth_kernels.shape[2]} do not match input channels {channels}"
        )
    if point_weights.shape != (channels, channels):
        raise ShapeError(
            f"pointwise map must be {channels} x {channels}, got {point_weights.shape}"
        )
    if pad < 0 or stride < 1:
        raise ShapeError(f"invalid pad={pad} or stride={stride}")
    out_side = (side + 2 * pad - k) // stride + 1
    if out_side < 1:
        raise ShapeError(
            f"convolution output would be empty: S={side}, k={k}, pad={pad}, stride={stride}"
        )

    if pad:
        xp = np.zeros((side + 2 * pad, side + 2 * pad, channels))
        xp[pad : pad + side, pad : pad + side] = x.values
    else:
        xp = x.values
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride]  # out_side x out_side x C x k x k
    depth_out = np.einsum("ijcuv,uvc->ijc", windows, depth_kernels.values)
    out = Tensor(depth_out @ point_weights.values)

    def backward():
        g = out.grad
        g_depth = g @ point_weights.values.T
        if point_weights.requires_grad:
            point_weights._accumulate(np.einsum("ijc,ijd->cd", depth_out, g))
        if depth_kernels.requires_grad:
            depth_kernels._accumulate(np.einsum("ijcuv,ijc->uvc", windows, g_depth))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            span = stride * (out_side - 1) + 1
            for u in range(k):
                for v in range(k):
                    gxp[u : u + span : stride, v : v + span : stride] += (
                        g_depth * depth_kernels.values[u, v]
                    )
            x._accumulate(gxp[pad : pad + side, pad : pad + side])

    return _record(out, (x, depth_kernels, point_weights), backward)


def upsample_nearest(x: Tensor, size: int) -> Tensor:
    """Nearest-neighbour upsample of an s x s x C grid to size x size x C."""
    if x.values.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"upsample input must be square s x s x C, got {x.shape}")
    small = x.shape[0]
    if size < small:
        raise ShapeError(f"upsample target {size} smaller than input {small}")
    idx = (np.arange(size) * small) // size
    out = Tensor(x.values[idx][:, idx])

    def backward():
        g = x._ensure_grad()
        for i_out, i_src in enumerate(idx):
            for j_out, j_src in enumerate(idx):
                g[i_src, j_src] += out.grad[i_out, j_out]

    return _record(out, (x,), backward)


def bce_with_logits(logit: Tensor, target: float) -> Tensor:
    """Binary cross-entropy of a single logit, in the overflow-safe form.

    loss = max(z, 0) - z*y + log(1 + exp(-|z|)), gradient sigmoid(z) - y.
    """
    if logit.values.size != 1:
        raise ShapeError(f"bce_with_logits needs a single logit, got shape {logit.shape}")
    y = float(target)
    z = float(logit.values.reshape(()))
    loss = max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))
    out = Tensor(np.full((1, 1), loss))

    def backward():
        dz = float(_sigmoid_values(np.array([z]))[0]) - y
        logit._accumulate(np.full(logit.shape, dz * float(out.grad.reshape(()))))

    return _record(out, (logit,), backward)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, the verification oracle.

    ``f`` is evaluated with ``x.values`` perturbed one coordinate at a
    time; it may read ``x`` through a closure instead of the argument.
    Runs in no-grad mode and never touches backward machinery.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")

    def evaluate() -> float:
        result = f(x)
        if isinstance(result, Tensor):
            return result.item()
        return float(result)

    grad = np.empty_like(x.values)
    with no_grad():
        for index in np.ndindex(x.values.shape):
            original = x.values[index]
            x.values[index] = original + h
            plus = evaluate()
            x.values[index] = original - h
            minus = evaluate()
            x.values[index] = original
            grad[index] = (plus - minus) / (2.0 * h)
    return Tensor(grad)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst coordinate-wise relative error between two gradient arrays.

    The denominator is floored at 1e-4 so dead-relu coordinates, where
    both gradients vanish and the quotient is pure noise, do not
    dominate.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes disagree: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1e-4, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))
