"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly the operations the perception stack needs: same-padded 2-D
cross-correlation, pooled reductions over the spatial or channel axis, the
handful of pointwise nonlinearities used by encoders / attention gates / the
detection loss, matrix products, and a softmax over a list of fusion
candidates.  Broadcasting is deliberately restricted to the two attention
gating shapes (C,H,W)x(C,1,1) and (C,H,W)x(1,H,W) plus scalars, which keeps
every backward rule auditable.

There is no separate tape object: the tape is distributed over result
tensors as parent links plus backward closures, and ``backward`` replays it
in reverse topological order.  Nodes are consumed by the replay, so calling
``backward`` twice over the same forward pass raises ``StaleTapeError``.
Tensors whose inputs are all frozen carry no closures at all, which makes
forward passes through frozen submodules allocation-free for the autodiff
machinery.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "StaleTapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "avg_pool2",
    "reduce",
    "pointwise",
    "sigmoid",
    "relu",
    "explin",
    "softplus",
    "smooth_l1",
    "softmax_stack",
    "concat_channels",
    "tsum",
    "tmean",
    "backward",
    "set_debug_checks",
]

_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-value assertions after every forward op (slow)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class ShapeError(ValueError):
    """A tensor operation received incompatible shapes."""


class StaleTapeError(RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class Tensor:
    """Dense float64 array node, rank <= 4, with optional gradient tracking.

    ``requires_grad`` marks trainable leaves.  Interior nodes record their
    parents and a backward closure only when at least one ancestor is
    trainable ("live"); otherwise the graph is not retained.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_live", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._live = self.requires_grad
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar used by loss composition; floats become constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    if any(p._live for p in parents):
        out._live = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    """Allow same-shape, scalar, and the two attention gating broadcasts."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim == 3 and b.ndim == 3:
        for big, small in ((a, b), (b, a)):
            c, h, w = big.shape
            if small.shape in ((c, 1, 1), (1, h, w)):
                return
    raise ShapeError(f"{op}: illegal broadcast between shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    if shape == () or int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    out_data = a.data + b.data

    def bwd(grad, acc):
        if a._live:
            acc(a, _reduce_to(grad, a.data.shape))
        if b._live:
            acc(b, _reduce_to(grad, b.data.shape))

    return _result(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    out_data = a.data - b.data

    def bwd(grad, acc):
        if a._live:
            acc(a, _reduce_to(grad, a.data.shape))
        if b._live:
            acc(b, _reduce_to(-grad, b.data.shape))

    return _result(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    out_data = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(grad, acc):
        if a._live:
            acc(a, _reduce_to(grad * b_data, a_data.shape))
        if b._live:
            acc(b, _reduce_to(grad * a_data, b_data.shape))

    return _result(out_data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape[1]} != {b.shape[0]}")
    a_data, b_data = a.data, b.data

    def bwd(grad, acc):
        if a._live:
            acc(a, grad @ b_data.T)
        if b._live:
            acc(b, a_data.T @ grad)

    return _result(a_data @ b_data, (a, b), bwd)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Same-style 2-D cross-correlation of a (C,H,W) map with (O,C,k,k) kernel.

    The artifact always calls this with ``padding == (k - 1) // 2`` so spatial
    dims are preserved; the implementation supports any non-negative padding.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be rank 3 (C,H,W), got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4 (O,C,k,k), got {kernel.shape}")
    c_out, c_k, kh, kw = kernel.shape
    c_in, h, w = x.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}")
    if c_k != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel in-channels {c_k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    pad = int(padding)
    h_out = h + 2 * pad - kh + 1
    w_out = w + 2 * pad - kw + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d: kernel {kh} too large for padded input {h}x{w}")

    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, pad : pad + h, pad : pad + w] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    w_mat = kernel.data.reshape(c_out, c_in * kh * kw)
    out_data = (w_mat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def bwd(grad, acc):
        g_mat = grad.reshape(c_out, h_out * w_out)
        if bias._live:
            acc(bias, g_mat.sum(axis=1))
        if kernel._live:
            acc(kernel, (g_mat @ cols.T).reshape(kernel.data.shape))
        if x._live:
            dcols = (w_mat.T @ g_mat).reshape(c_in, kh, kw, h_out, w_out)
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di : di + h_out, dj : dj + w_out] += dcols[:, di, dj]
            acc(x, dxp[:, pad : pad + h, pad : pad + w])

    return _result(out_data, (x, kernel, bias), bwd)


def avg_pool2(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of a (C,H,W) map by an integer factor."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2: input must be rank 3, got {x.shape}")
    c, h, w = x.shape
    f = int(factor)
    if h % f or w % f:
        raise ShapeError(f"avg_pool2: dims {h}x{w} not divisible by factor {f}")
    out_data = x.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))

    def bwd(grad, acc):
        if x._live:
            g = np.repeat(np.repeat(grad, f, axis=1), f, axis=2) / (f * f)
            acc(x, g)

    return _result(out_data, (x,), bwd)


def reduce(x: Tensor, axis: str, mode: str) -> Tensor:
    """Pool a (C,H,W) map over ``axis`` in {'spatial','channel'}, mode mean|max.

    Spatial reduce yields (C,1,1); channel reduce yields (1,H,W).  Max-reduce
    backward routes the gradient to the first argmax in scan order.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"reduce: input must be rank 3 (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if axis not in ("spatial", "channel"):
        raise ValueError(f"reduce: unknown axis {axis!r}")
    if mode not in ("mean", "max"):
        raise ValueError(f"reduce: unknown mode {mode!r}")
    if axis == "spatial" and h * w == 0 or axis == "channel" and c == 0:
        raise ShapeError(f"reduce: empty {axis} axis on shape {x.shape}")

    if axis == "spatial":
        if mode == "mean":
            out_data = x.data.mean(axis=(1, 2), keepdims=True)

            def bwd(grad, acc):
                if x._live:
                    acc(x, np.broadcast_to(grad / (h * w), (c, h, w)).copy())

        else:
            flat = x.data.reshape(c, h * w)
            idx = np.argmax(flat, axis=1)
            out_data = flat[np.arange(c), idx].reshape(c, 1, 1)

            def bwd(grad, acc):
                if x._live:
                    g = np.zeros((c, h * w), dtype=np.float64)
                    g[np.arange(c), idx] = grad.reshape(c)
                    acc(x, g.reshape(c, h, w))

    else:
        if mode == "mean":
            out_data = x.data.mean(axis=0, keepdims=True)

            def bwd(grad, acc):
                if x._live:
                    acc(x, np.broadcast_to(grad / c, (c, h, w)).copy())

        else:
            idx = np.argmax(x.data, axis=0)
            out_data = np.take_along_axis(x.data, idx[None], axis=0)

            def bwd(grad, acc):
                if x._live:
                    g = np.zeros((c, h, w), dtype=np.float64)
                    np.put_along_axis(g, idx[None], grad, axis=0)
                    acc(x, g)

    return _result(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(grad, acc):
        if x._live:
            acc(x, grad * out_data * (1.0 - out_data))

    return _result(out_data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def bwd(grad, acc):
        if x._live:
            acc(x, grad * mask)

    return _result(out_data, (x,), bwd)


def explin(x: Tensor) -> Tensor:
    """Exponential-linear unit: x for x > 0, exp(x) - 1 otherwise."""
    x = _as_tensor(x)
    neg = np.exp(np.minimum(x.data, 0.0)) - 1.0
    out_data = np.where(x.data > 0, x.data, neg)

    def bwd(grad, acc):
        if x._live:
            acc(x, grad * np.where(x.data > 0, 1.0, neg + 1.0))

    return _result(out_data, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    """Numerically stable log(1 + exp(x)); gradient is sigmoid(x)."""
    x = _as_tensor(x)
    d = x.data
    out_data = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def bwd(grad, acc):
        if x._live:
            s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
            acc(x, grad * s)

    return _result(out_data, (x,), bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style penalty: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    x = _as_tensor(x)
    a = np.abs(x.data)
    out_data = np.where(a < 1.0, 0.5 * x.data * x.data, a - 0.5)

    def bwd(grad, acc):
        if x._live:
            acc(x, grad * np.clip(x.data, -1.0, 1.0))

    return _result(out_data, (x,), bwd)


_POINTWISE = {"sigmoid": sigmoid, "relu": relu, "explin": explin}


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Dispatch the named unary nonlinearity (sigmoid, relu, explin)."""
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"pointwise: unknown function {fn!r}") from None


def softmax_stack(xs: list[Tensor]) -> list[Tensor]:
    """Softmax across a list of same-shape tensors, elementwise per cell.

    Used to normalize fusion scores over the candidate (agent) axis.  A
    single candidate gets weight exactly 1.
    """
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("softmax_stack: empty candidate list")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"softmax_stack: mixed shapes {shape} and {x.shape}")
    stacked = np.stack([x.data for x in xs])
    m = stacked.max(axis=0, keepdims=True)
    e = np.exp(stacked - m)
    wts = e / e.sum(axis=0, keepdims=True)

    outs = []
    parents = tuple(xs)
    for i in range(len(xs)):
        def bwd(grad, acc, i=i):
            # d w_i / d s_j = w_i (delta_ij - w_j), applied per cell
            for j, xj in enumerate(parents):
                if xj._live:
                    delta = 1.0 if i == j else 0.0
                    acc(xj, grad * wts[i] * (delta - wts[j]))

        outs.append(_result(wts[i].copy(), parents, bwd))
    return outs


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate rank-3 maps along the channel axis."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    hw = xs[0].shape[1:]
    for x in xs:
        if x.data.ndim != 3 or x.shape[1:] != hw:
            raise ShapeError(f"concat_channels: spatial dims differ, {x.shape} vs (*,{hw})")
    out_data = np.concatenate([x.data for x in xs], axis=0)
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]

    def bwd(grad, acc):
        parts = np.split(grad, splits, axis=0)
        for x, g in zip(xs, parts):
            if x._live:
                acc(x, g)

    return _result(out_data, tuple(xs), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar tensor."""
    x = _as_tensor(x)
    shape = x.data.shape

    def bwd(grad, acc):
        if x._live:
            acc(x, np.full(shape, float(grad), dtype=np.float64))

    return _result(np.asarray(x.data.sum()), (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor."""
    x = _as_tensor(x)
    n = x.data.size
    shape = x.data.shape

    def bwd(grad, acc):
        if x._live:
            acc(x, np.full(shape, float(grad) / n, dtype=np.float64))

    return _result(np.asarray(x.data.mean()), (x,), bwd)


def backward(root: Tensor) -> None:
    """Accumulate reverse-mode gradients from a scalar root into leaf .grad.

    Only leaves with ``requires_grad`` retain gradient buffers; frozen
    tensors transmit gradient but store nothing.  Replaying the same graph
    twice raises ``StaleTapeError``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root._spent:
        raise StaleTapeError("backward already consumed this graph; re-run forward first")
    if not root._live:
        return

    # iterative topological order over live nodes
    topo: list[Tensor] = []
    visiting: list[tuple[Tensor, bool]] = [(root, False)]
    seen: set[int] = set()
    while visiting:
        node, processed = visiting.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        visiting.append((node, True))
        for p in node._parents:
            if p._live and id(p) not in seen:
                visiting.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}

    def acc(node: Tensor, g: np.ndarray) -> None:
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.asarray(g, dtype=np.float64)

    for node in reversed(topo):
        if node._backward is None:
            continue
        if node._spent:
            raise StaleTapeError("backward already consumed this graph; re-run forward first")
        node._spent = True
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, acc)

    root._spent = True
    for node in topo:
        if node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
