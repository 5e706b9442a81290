"""Minimal dense-tensor reverse-mode autodiff engine on numpy arrays.

Every operation the separation network and its loss need is provided as a
primitive with a hand-written backward rule.  Tensors carry arbitrary
leading batch dimensions so a whole stack of narrow-band sequences can be
pushed through one graph.  Graphs are plain closures over saved forward
values; `backward` walks the graph once in reverse topological order.

A graph must stay on one thread between construction and backward; distinct
graphs are independent.
"""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """A non-finite value appeared where the computation requires finiteness."""


_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Globally enable per-op finiteness checks (slow, for tests/debugging)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Dense real N-d array participating in a reverse-mode graph.

    `grad` is only populated on leaves (tensors created with
    ``requires_grad=True``); it accumulates additively across backward
    passes until `zero_grad` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NumericError("non-finite value produced by an op")
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return np.array(self.data)

    def is_leaf(self):
        return self._vjp is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def zero_grad(tensors) -> None:
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = None


# -- backward driver ----------------------------------------------------------


def _topo_order(root):
    # iterative post-order; graphs can be a few thousand nodes deep
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    `loss` must be scalar.  Leaf grads accumulate additively across calls.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    gmap = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = gmap.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise NumericError("non-finite gradient")
            key = id(parent)
            if key in gmap:
                gmap[key] = gmap[key] + pg
            else:
                gmap[key] = pg


def _reduce_to(grad, shape):
    # sum out broadcast axes so grad matches the original operand shape
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    return Tensor._from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def log10(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log10(a.data)
        inv = 1.0 / (a.data * np.log(10.0))
    return Tensor._from_op(out, (a,), lambda g: (g * inv,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    # x * sigmoid(x); d/dx = s + x*s*(1-s) = s + out*(1-s), precomputed while hot
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    deriv = s + out * (1.0 - s)
    return Tensor._from_op(out, (a,), lambda g: (g * deriv,))


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._from_op(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def split(a: Tensor, sizes, axis=0):
    """Split `a` into consecutive chunks of the given sizes along `axis`."""
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.data.shape[axis]}")
    out, start = [], 0
    for size in sizes:
        out.append(narrow(a, axis, start, size))
        start += size
    return tuple(out)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.data.ndim
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.data.ndim)
    )

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (a.data.ndim - 1) + [(left, right)]
    n = a.data.shape[-1]

    def vjp(g):
        return (np.ascontiguousarray(g[..., left : left + n]),)

    return Tensor._from_op(np.pad(a.data, width), (a,), vjp)


def relative_shift(a: Tensor) -> Tensor:
    """Turn per-offset scores (..., T, 2T-1) into per-pair scores (..., T, T).

    ``out[..., q, k] = a[..., q, (k - q) + (T - 1)]``: offset entry k-q of
    row q.  In the row-major flattening of the last two axes, row q of the
    output is the window of length T starting at ``q*(2T-2) + (T-1)``;
    windows of distinct rows never overlap, so both directions are plain
    strided copies.
    """
    from numpy.lib.stride_tricks import as_strided

    xd = a.data
    t, s = xd.shape[-2], xd.shape[-1]
    if s != 2 * t - 1:
        raise ValueError(f"relative_shift expects (..., T, 2T-1), got {xd.shape}")
    lead = xd.shape[:-2]

    def windows(flat):
        it = flat.strides[-1]
        return as_strided(
            flat[..., t - 1 :],
            shape=lead + (t, t),
            strides=flat.strides[:-1] + ((2 * t - 2) * it, it),
        )

    flat = np.ascontiguousarray(xd).reshape(lead + (t * s,))
    out = np.ascontiguousarray(windows(flat))

    def vjp(g):
        gflat = np.zeros(lead + (t * s,), dtype=xd.dtype)
        windows(gflat)[...] = g
        return (gflat.reshape(xd.shape),)

    return Tensor._from_op(out, (a,), vjp)


def rel_gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis with a per-row index table.

    `a` has shape (..., R, S) and `idx` shape (R, C); the output is
    ``out[..., r, c] = a[..., r, idx[r, c]]``.  Used to turn per-offset
    relative-position scores into per-pair scores.
    """
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != a.data.shape[-2]:
        raise ValueError(f"index table {idx.shape} does not match input {a.data.shape}")
    full_idx = np.broadcast_to(idx, a.data.shape[:-1] + (idx.shape[1],))
    out = np.take_along_axis(a.data, full_idx, axis=-1)

    r, s = a.data.shape[-2], a.data.shape[-1]
    c = idx.shape[1]

    def vjp(g):
        batch = int(np.prod(a.data.shape[:-2], dtype=np.int64))
        rows = batch * r
        flat = np.arange(rows, dtype=np.int64)[:, None] * s + np.tile(idx, (batch, 1))
        gx = np.bincount(
            flat.reshape(-1), weights=g.reshape(-1).astype(np.float64), minlength=rows * s
        )
        return (gx.reshape(a.data.shape).astype(a.data.dtype),)

    return Tensor._from_op(np.ascontiguousarray(out), (a,), vjp)


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim > 2:
            # shared weight applied across a batch: contract batch + column axes
            axes = list(range(g.ndim - 2)) + [g.ndim - 1]
            ga = np.tensordot(g, bd, axes=(axes, axes))
            gb = np.matmul(ad.T, g)
        elif bd.ndim == 2 and ad.ndim > 2:
            axes = list(range(g.ndim - 2)) + [g.ndim - 2]
            gb = np.tensordot(g, ad, axes=(axes, axes)).T
            ga = np.matmul(g, bd.T)
        else:
            ga = _reduce_to(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
            gb = _reduce_to(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (a,), vjp)


# -- normalization ----------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature axis (-2) independently per time step."""
    xd = x.data
    c = xd.shape[-2]
    mu = xd.mean(axis=-2, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gcol = gamma.data.reshape(-1, 1)
    out = gcol * xh + beta.data.reshape(-1, 1)

    def vjp(g):
        red = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        dgamma = (g * xh).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxh = g * gcol
        m1 = dxh.mean(axis=-2, keepdims=True)
        m2 = (dxh * xh).mean(axis=-2, keepdims=True)
        dx = inv * (dxh - m1 - xh * m2)
        return dx, dgamma, dbeta

    del c
    return Tensor._from_op(out, (x, gamma, beta), vjp)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize per channel group over (channels-in-group, time)."""
    xd = x.data
    c, t = xd.shape[-2], xd.shape[-1]
    if c % groups:
        raise ValueError(f"groups={groups} does not divide {c} channels")
    gshape = xd.shape[:-2] + (groups, c // groups, t)
    xr = xd.reshape(gshape)
    mu = xr.mean(axis=(-2, -1), keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    gcol = gamma.data.reshape(-1, 1)
    out = gcol * xh.reshape(xd.shape) + beta.data.reshape(-1, 1)

    def vjp(g):
        red = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        xh_flat = xh.reshape(xd.shape)
        dgamma = (g * xh_flat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxh = (g * gcol).reshape(gshape)
        m1 = dxh.mean(axis=(-2, -1), keepdims=True)
        m2 = (dxh * xh).mean(axis=(-2, -1), keepdims=True)
        dx = (inv * (dxh - m1 - xh * m2)).reshape(xd.shape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), vjp)


# -- convolutions -------------------------------------------------------------------


def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: tuple[int, int] = (0, 0),
    groups: int = 1,
) -> Tensor:
    """1-D convolution along the last axis.

    `x` is (C_in, T) or batched (B, C_in, T), `w` is (C_out, C_in/groups, K),
    `b` is (C_out,).  Padding is explicit (left, right); output length is
    ``(T + pad_l + pad_r - K) // stride + 1``.  The batch folds into the
    gemm columns so the kernel/group loops stay tiny.
    """
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    if xd.ndim != 3:
        raise ValueError(f"conv1d expects (B, C, T) input, got {x.data.shape}")
    wd = w.data
    c_out, c_in_g, k = wd.shape
    n_batch, c_in, _ = xd.shape
    if c_in_g * groups != c_in or c_out % groups:
        raise ValueError(
            f"conv1d shape mismatch: input {c_in} channels, weight {wd.shape}, groups {groups}"
        )
    pl, pr = padding
    # channel-first im2col: one fat gemm per group instead of tiny stacked ones
    xpt = np.pad(xd.transpose(1, 0, 2), [(0, 0), (0, 0), (pl, pr)])  # (C_in, B, Tp)
    tp = xpt.shape[-1]
    t_out = (tp - k) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d input shorter than kernel")
    og = c_out // groups
    span = (t_out - 1) * stride + 1
    cols = n_batch * t_out
    # windows: (C_in, B, T_out, K) view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xpt, k, axis=2)[:, :, ::stride, :]

    y2 = np.empty((c_out, cols), dtype=xd.dtype)
    for g_i in range(groups):
        ci, co = g_i * c_in_g, g_i * og
        xg = win[ci : ci + c_in_g].transpose(0, 3, 1, 2).reshape(c_in_g * k, cols)
        y2[co : co + og] = wd[co : co + og].reshape(og, c_in_g * k) @ xg
    y = y2.reshape(c_out, n_batch, t_out).transpose(1, 0, 2)
    if b is not None:
        y = y + b.data.reshape(-1, 1)

    def vjp(g):
        if squeeze:
            g = g[None]
        gyt = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(c_out, cols)
        gxpt = np.zeros_like(xpt)
        gw = np.empty_like(wd)
        for g_i in range(groups):
            ci, co = g_i * c_in_g, g_i * og
            xg = win[ci : ci + c_in_g].transpose(0, 3, 1, 2).reshape(c_in_g * k, cols)
            gy_g = gyt[co : co + og]
            gw[co : co + og] = (gy_g @ xg.T).reshape(og, c_in_g, k)
            gcol = (wd[co : co + og].reshape(og, c_in_g * k).T @ gy_g).reshape(
                c_in_g, k, n_batch, t_out
            )
            for kk in range(k):  # col2im scatter
                gxpt[ci : ci + c_in_g, :, kk : kk + span : stride] += gcol[:, kk]
        gx = gxpt[:, :, pl : tp - pr] if (pl or pr) else gxpt
        gx = np.ascontiguousarray(gx.transpose(1, 0, 2))
        if squeeze:
            gx = gx[0]
        gb = None if b is None else gyt.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    if squeeze:
        y = y[0]
    return Tensor._from_op(y, parents, vjp)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """1-D transposed convolution along the last axis.

    `x` is (..., C_in, T), `w` is (C_in, C_out, K); output length is
    ``(T - 1) * stride + K``.
    """
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    if xd.ndim != 3:
        raise ValueError(f"conv_transpose1d expects (B, C, T) input, got {x.data.shape}")
    wd = w.data
    c_in, c_out, k = wd.shape
    if xd.shape[-2] != c_in:
        raise ValueError(f"conv_transpose1d: input has {xd.shape[-2]} channels, weight expects {c_in}")
    n_batch, _, t_in = xd.shape
    t_out = (t_in - 1) * stride + k
    span = (t_in - 1) * stride + 1
    cols = n_batch * t_in

    xt = np.ascontiguousarray(xd.transpose(1, 0, 2)).reshape(c_in, cols)
    yt = np.zeros((c_out, n_batch, t_out), dtype=xd.dtype)
    for kk in range(k):
        yt[:, :, kk : kk + span : stride] += (wd[:, :, kk].T @ xt).reshape(
            c_out, n_batch, t_in
        )
    y = yt.transpose(1, 0, 2)
    if b is not None:
        y = y + b.data.reshape(-1, 1)

    def vjp(g):
        if squeeze:
            g = g[None]
        gt = np.ascontiguousarray(g.transpose(1, 0, 2))  # (C_out, B, T_out)
        gxt = np.zeros((c_in, cols), dtype=xd.dtype)
        gw = np.empty_like(wd)
        for kk in range(k):
            gs = np.ascontiguousarray(gt[:, :, kk : kk + span : stride]).reshape(c_out, cols)
            gxt += wd[:, :, kk] @ gs
            gw[:, :, kk] = xt @ gs.T
        gx = gxt.reshape(c_in, n_batch, t_in).transpose(1, 0, 2)
        if squeeze:
            gx = gx[0]
        gb = None if b is None else gt.sum(axis=(1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    if squeeze:
        y = y[0]
    return Tensor._from_op(y, parents, vjp)


# -- stochastic / signal ops -----------------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted-scaling dropout; the eval path is the identity."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def overlap_add(frames: Tensor, hop: int, out_len: int) -> Tensor:
    """Overlap-add frames (..., W, T) into a signal (..., out_len).

    Frame t lands at offset ``t * hop``; samples beyond the synthesized
    span are zero, extra synthesized samples are cropped.
    """
    fd = frames.data
    w, t = fd.shape[-2], fd.shape[-1]
    synth = (t - 1) * hop + w
    y = np.zeros(fd.shape[:-2] + (synth,), dtype=fd.dtype)
    for ti in range(t):
        y[..., ti * hop : ti * hop + w] += fd[..., :, ti]
    if out_len < synth:
        y = np.ascontiguousarray(y[..., :out_len])
    elif out_len > synth:
        y = np.pad(y, [(0, 0)] * (y.ndim - 1) + [(0, out_len - synth)])

    def vjp(g):
        if out_len < synth:
            g = np.pad(g, [(0, 0)] * (g.ndim - 1) + [(0, synth - out_len)])
        elif out_len > synth:
            g = g[..., :synth]
        gf = np.empty_like(fd)
        for ti in range(t):
            gf[..., :, ti] = g[..., ti * hop : ti * hop + w]
        return (gf,)

    return Tensor._from_op(y, (frames,), vjp)


# -- verification -----------------------------------------------------------------


def grad_check(f, tensors, step: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued `f` with central differences.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if isinstance(tensors, Tensor):
        tensors = [tensors]
    for t in tensors:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")
    zero_grad(tensors)
    out = f(*tensors)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued program")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite value in grad_check forward pass")
    backward(out)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(*tensors).data)
            flat[i] = orig - step
            lo = float(f(*tensors).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite value in finite-difference probe")
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
