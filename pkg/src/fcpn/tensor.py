"""A small dense-tensor engine with reverse-mode automatic differentiation.

Only the operations needed by the point network are provided. Every op is
unbatched: feature volumes are ``[X, Y, Z, C]`` arrays and point sets are
``[..., C]`` arrays. Gradients flow through a dynamically recorded graph;
call :meth:`Tensor.backward` on a scalar to populate ``.grad``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen layers)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """n-dimensional float array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor t."""
        if not self.requires_grad:
            raise InputError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        # iterative post-order DFS; graphs can be deep enough to hit the recursion limit
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat_channels(tensors) -> Tensor:
    """Concatenate along the last axis; all leading (spatial) axes must agree."""
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels: spatial shape {t.shape[:-1]} does not match {lead}"
            )
    widths = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=-1)

    def backward(g):
        return tuple(np.split(g, widths, axis=-1))

    return _result(data, tensors, backward)


def gather_rows(x: Tensor, index) -> Tensor:
    """``x[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]

    def backward(g):
        gx = np.zeros((n,) + g.shape[index.ndim:], dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward)


def scatter_rows(x: Tensor, index, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at unique positions ``index`` of a zero array with ``n_rows`` rows."""
    index = np.asarray(index, dtype=np.intp)
    data = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    data[index] = x.data
    return _result(data, (x,), lambda g: (g[index],))


def interpolate_rows(x: Tensor, index, weights) -> Tensor:
    """Row-wise weighted sum ``out[n] = sum_k weights[n, k] * x[index[n, k]]``."""
    index = np.asarray(index, dtype=np.intp)
    weights = np.asarray(weights, dtype=x.dtype)
    n = x.shape[0]
    data = np.einsum("nk,nkc->nc", weights, x.data[index])

    def backward(g):
        gx = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(gx, index.ravel(), (weights[:, :, None] * g[:, None, :]).reshape(-1, g.shape[1]))
        return (gx,)

    return _result(data, (x,), backward)


def linear_rows(matrix, x: Tensor) -> Tensor:
    """Apply a constant (dense or scipy.sparse) matrix to the rows of ``x``: ``matrix @ x``."""
    data = np.asarray(matrix @ x.data, dtype=x.dtype)
    return _result(data, (x,), lambda g: (np.asarray(matrix.T @ g, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: identity at inference, survivors scaled by 1/(1-rate) in training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# learned layers


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same affine map at every position: ``x[..., Cin] @ w[Cin, Cout] + b``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"pointwise_linear: channel axis has {x.shape[-1]} entries, weights expect {w.shape[0]}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(lead + (w.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (w.shape[1],)), parents, backward)


def _check_volume(x, w, op):
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be [X, Y, Z, C], got rank {x.ndim}")
    if w.ndim != 5:
        raise DimensionError(f"{op}: weights must be [kx, ky, kz, Cin, Cout], got rank {w.ndim}")
    if x.shape[3] != w.shape[3]:
        raise DimensionError(
            f"{op}: channel axis (3) of input has {x.shape[3]} entries, weights expect {w.shape[3]}"
        )


def _fold_edge_padding(g, pad):
    """Adjoint of ``np.pad(mode='edge')`` on the three spatial axes."""
    for axis in range(3):
        g = np.moveaxis(g, axis, 0)
        inner = g[pad:-pad].copy()
        inner[0] += g[:pad].sum(axis=0)
        inner[-1] += g[-pad:].sum(axis=0)
        g = np.moveaxis(inner, 0, axis)
    return g


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "none") -> Tensor:
    """Dense 3D convolution (cross-correlation) over a ``[X, Y, Z, Cin]`` volume.

    ``padding='symmetric'`` replicates the edge plane once on every side and
    requires a 3x3x3 kernel, so the output keeps the input's spatial size.
    """
    _check_volume(x, w, "conv3d")
    k = w.shape[:3]
    if stride < 1:
        raise ConfigurationError(f"conv3d: stride must be positive, got {stride}")
    if padding == "symmetric":
        if k != (3, 3, 3):
            raise ConfigurationError(f"conv3d: symmetric padding requires a 3x3x3 kernel, got {k}")
        pad = 1
    elif padding == "none":
        pad = 0
    else:
        raise ConfigurationError(f"conv3d: unknown padding {padding!r}")
    out_dims = []
    for axis, name in enumerate("XYZ"):
        size = x.shape[axis] + 2 * pad
        if size < k[axis]:
            raise DimensionError(
                f"conv3d: axis {name} has extent {size} after padding, smaller than kernel {k[axis]}"
            )
        if (size - k[axis]) % stride:
            raise ConfigurationError(
                f"conv3d: axis {name} extent {size} does not tile with kernel {k[axis]} and stride {stride}"
            )
        out_dims.append((size - k[axis]) // stride + 1)
    X, Y, Z = out_dims
    cin, cout = w.shape[3], w.shape[4]
    xd = x.data
    parents = (x, w) if b is None else (x, w, b)

    if pad == 0 and k == (stride,) * 3:
        # non-overlapping octant path: one matmul
        s = stride
        col = (
            xd[: X * s, : Y * s, : Z * s]
            .reshape(X, s, Y, s, Z, s, cin)
            .transpose(0, 2, 4, 1, 3, 5, 6)
            .reshape(X * Y * Z, s * s * s * cin)
        )
        wm = w.data.reshape(-1, cout)
        out = col @ wm
        if b is not None:
            out += b.data

        def backward(g):
            g2 = g.reshape(-1, cout)
            gx = None
            if x.requires_grad:
                gcol = (g2 @ wm.T).reshape(X, Y, Z, s, s, s, cin).transpose(0, 3, 1, 4, 2, 5, 6)
                gx = np.zeros_like(xd)
                gx[: X * s, : Y * s, : Z * s] = gcol.reshape(X * s, Y * s, Z * s, cin)
            gw = (col.T @ g2).reshape(w.shape) if w.requires_grad else None
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0)

        return _result(out.reshape(X, Y, Z, cout), parents, backward)

    xp = np.pad(xd, ((pad, pad),) * 3 + ((0, 0),), mode="edge") if pad else xd
    offsets = [(i, j, l) for i in range(k[0]) for j in range(k[1]) for l in range(k[2])]

    def window(arr, off):
        i, j, l = off
        return arr[i : i + stride * (X - 1) + 1 : stride,
                   j : j + stride * (Y - 1) + 1 : stride,
                   l : l + stride * (Z - 1) + 1 : stride]

    out = np.zeros((X * Y * Z, cout), dtype=np.result_type(xd, w.data))
    for off in offsets:
        out += window(xp, off).reshape(-1, cin) @ w.data[off]
    if b is not None:
        out += b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off in offsets:
                window(gxp, off)[...] += (g2 @ w.data[off].T).reshape(X, Y, Z, cin)
            gx = _fold_edge_padding(gxp, pad) if pad else gxp
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for off in offsets:
                gw[off] = window(xp, off).reshape(-1, cin).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(X, Y, Z, cout), parents, backward)


def deconv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 3D convolution with kernel == stride (non-overlapping upsampling).

    Each input cell writes an ``s x s x s`` block; with zero bias this is the
    exact adjoint of ``conv3d`` using the same kernel with Cin/Cout swapped.
    """
    _check_volume(x, w, "deconv3d")
    s = stride
    if w.shape[:3] != (s, s, s):
        raise ConfigurationError(f"deconv3d: kernel {w.shape[:3]} must equal stride {s} on every axis")
    X, Y, Z, cin = x.shape
    cout = w.shape[4]
    x2 = x.data.reshape(-1, cin)
    wm = w.data.transpose(3, 0, 1, 2, 4).reshape(cin, s * s * s * cout)
    out = (
        (x2 @ wm)
        .reshape(X, Y, Z, s, s, s, cout)
        .transpose(0, 3, 1, 4, 2, 5, 6)
        .reshape(X * s, Y * s, Z * s, cout)
    )
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcol = g.reshape(X, s, Y, s, Z, s, cout).transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, s * s * s * cout)
        gx = (gcol @ wm.T).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (x2.T @ gcol).reshape(cin, s, s, s, cout).transpose(1, 2, 3, 0, 4)
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return _result(out, parents, backward)


def group_max(x: Tensor, counts) -> Tensor:
    """Channelwise max over the first ``counts[i]`` rows of each group.

    Empty groups produce a zero vector. The gradient goes to the first row
    attaining the max.
    """
    if x.ndim != 3:
        raise DimensionError(f"group_max: input must be [Ncells, Pmax, C], got rank {x.ndim}")
    counts = np.asarray(counts)
    n, p, c = x.shape
    if counts.shape != (n,):
        raise DimensionError(f"group_max: counts has shape {counts.shape}, expected ({n},)")
    if np.any(counts < 0) or np.any(counts > p):
        raise InputError(f"group_max: counts must lie in [0, {p}]")
    valid = np.arange(p)[None, :] < counts[:, None]
    masked = np.where(valid[:, :, None], x.data, -np.inf)
    idx = masked.argmax(axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]
    empty = counts == 0
    out[empty] = 0

    def backward(g):
        g = np.where(empty[:, None], 0, g)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def weighted_softmax_xent(logits: Tensor, targets, class_weights) -> Tensor:
    """Mean over rows of ``w[t] * -log softmax(logits)[t]``."""
    if logits.ndim != 2:
        raise DimensionError(f"weighted_softmax_xent: logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"weighted_softmax_xent: {targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise InputError(f"weighted_softmax_xent: targets must lie in [0, {k})")
    w = np.asarray(class_weights, dtype=logits.dtype)
    if w.shape != (k,):
        raise DimensionError(f"weighted_softmax_xent: {w.shape[0]} class weights for {k} classes")
    if np.any(w <= 0):
        raise InputError("weighted_softmax_xent: class weights must be positive")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    logp = z[rows, targets] - np.log(sez[:, 0])
    wt = w[targets]
    loss = np.asarray(-(wt * logp).sum() / n, dtype=logits.dtype)

    def backward(g):
        grad = ez / sez
        grad[rows, targets] -= 1.0
        grad *= (wt * (g / n))[:, None]
        return (grad,)

    return _result(loss, (logits,), backward)


def sigmoid_bce(logits: Tensor, targets, weights) -> Tensor:
    """Mean weighted binary cross-entropy over all elements, computed from logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"sigmoid_bce: targets {t.shape} do not match logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("sigmoid_bce: targets must be 0 or 1")
    w = np.broadcast_to(np.asarray(weights, dtype=logits.dtype), logits.shape)
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    m = x.size
    loss = np.asarray((w * per).sum() / m, dtype=logits.dtype)

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (w * (sig - t) * (g / m),)

    return _result(loss, (logits,), backward)
