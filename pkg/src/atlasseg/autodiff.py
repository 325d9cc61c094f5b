"""Minimal reverse-mode differentiation engine over dense numpy grids.

Graphs are built eagerly: every op computes its forward value immediately
and records a backward closure. Calling :func:`backward` on a scalar node
topologically sorts the graph and accumulates gradients into every node
with ``requires_grad``. Arrays keep the dtype they were given, so running
a graph in float64 is just a matter of passing float64 leaves.

Broadcasting in binary ops is deliberately restricted: operands must have
equal shapes, or one must be a scalar, or both must have the same rank and
be numpy-broadcastable (e.g. a per-class column ``(C, 1, 1)`` against a
class-stacked grid ``(C, H, W)``). Rank-mismatched operands are rejected
to keep silent alignment bugs out.
"""

from __future__ import annotations

import itertools

import numpy as np


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Node, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        backward(self)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _wrap(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def _make(value, parents, backward_fn) -> Node:
    out = Node(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(node: Node, g) -> None:
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_binary_shapes(a: Node, b: Node) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ValueError(
            f"rank mismatch {sa} vs {sb}: reshape class vectors to (C, 1, ...) "
            "explicitly before combining with grids"
        )
    if any(m != n and 1 not in (m, n) for m, n in zip(sa, sb)):
        raise ValueError(f"shapes {sa} and {sb} are not broadcastable")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a = _wrap(a, b if isinstance(b, Node) else None)
    b = _wrap(b, a)
    _check_binary_shapes(a, b)
    out_val = a.value + b.value

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out_val, (a, b), backward_fn)


def sub(a, b) -> Node:
    a = _wrap(a, b if isinstance(b, Node) else None)
    b = _wrap(b, a)
    _check_binary_shapes(a, b)
    out_val = a.value - b.value

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out_val, (a, b), backward_fn)


def mul(a, b) -> Node:
    a = _wrap(a, b if isinstance(b, Node) else None)
    b = _wrap(b, a)
    _check_binary_shapes(a, b)
    out_val = a.value * b.value

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out_val, (a, b), backward_fn)


def div(a, b) -> Node:
    a = _wrap(a, b if isinstance(b, Node) else None)
    b = _wrap(b, a)
    _check_binary_shapes(a, b)
    out_val = a.value / b.value

    def backward_fn(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(out_val, (a, b), backward_fn)


def negate(a: Node) -> Node:
    def backward_fn(g):
        _accum(a, -g)

    return _make(-a.value, (a,), backward_fn)


def exp(a: Node) -> Node:
    out_val = np.exp(a.value)

    def backward_fn(g):
        _accum(a, g * out_val)

    return _make(out_val, (a,), backward_fn)


def log(a: Node) -> Node:
    """Natural log; log(0) yields -inf and receives zero gradient whenever
    the incoming gradient is zero (entries excluded downstream)."""
    with np.errstate(divide="ignore"):
        out_val = np.log(a.value)

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(g == 0, np.zeros_like(g), g / a.value)
        _accum(a, ga)

    return _make(out_val, (a,), backward_fn)


def square(a: Node) -> Node:
    def backward_fn(g):
        _accum(a, g * (2 * a.value))

    return _make(a.value * a.value, (a,), backward_fn)


def sqrt(a: Node) -> Node:
    out_val = np.sqrt(a.value)

    def backward_fn(g):
        _accum(a, g * (0.5 / out_val))

    return _make(out_val, (a,), backward_fn)


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    mask = a.value >= 0
    out_val = np.where(mask, a.value, slope * a.value)

    def backward_fn(g):
        _accum(a, g * np.where(mask, 1.0, slope).astype(g.dtype))

    return _make(out_val, (a,), backward_fn)


def sum_reduce(a: Node) -> Node:
    """Sum all entries down to a scalar."""
    out_val = a.value.sum()

    def backward_fn(g):
        _accum(a, np.full(a.value.shape, g, dtype=a.value.dtype))

    return _make(out_val, (a,), backward_fn)


def reshape(a: Node, shape) -> Node:
    orig = a.value.shape
    out_val = a.value.reshape(shape)

    def backward_fn(g):
        _accum(a, g.reshape(orig))

    return _make(out_val, (a,), backward_fn)


def logsumexp(a: Node, axis: int = 0) -> Node:
    """Overflow-safe log-sum-exp along ``axis`` (the class axis).

    Entries of -inf contribute nothing and receive zero gradient; a slice
    that is entirely -inf yields -inf.
    """
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - safe_m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_val = np.squeeze(safe_m + np.log(s), axis=axis)

    def backward_fn(g):
        with np.errstate(invalid="ignore"):
            w = np.where(s > 0, e / s, 0.0)
        _accum(a, np.expand_dims(g, axis) * w)

    return _make(out_val, (a,), backward_fn)


def concat(nodes, axis: int = 0) -> Node:
    nodes = [n if isinstance(n, Node) else Node(n) for n in nodes]
    out_val = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            _accum(n, np.take(g, range(lo, hi), axis=axis))

    return _make(out_val, tuple(nodes), backward_fn)


def take_channels(a: Node, indices) -> Node:
    """Gather channels (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    out_val = a.value[idx]

    def backward_fn(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(out_val, (a,), backward_fn)


def diff(a: Node, axis: int) -> Node:
    """Forward difference along ``axis``; output is one shorter there."""
    out_val = np.diff(a.value, axis=axis)

    def backward_fn(g):
        ga = np.zeros_like(a.value)
        nd = ga.ndim
        hi = tuple(slice(1, None) if i == axis else slice(None) for i in range(nd))
        lo = tuple(slice(None, -1) if i == axis else slice(None) for i in range(nd))
        ga[hi] += g
        ga[lo] -= g
        _accum(a, ga)

    return _make(out_val, (a,), backward_fn)


def global_max_pool(a: Node) -> Node:
    """Max over all spatial axes of a (C, *spatial) input; ties go to the
    first flattened position."""
    c = a.value.shape[0]
    flat = a.value.reshape(c, -1)
    idx = np.argmax(flat, axis=1)
    out_val = flat[np.arange(c), idx]

    def backward_fn(g):
        gflat = np.zeros_like(flat)
        gflat[np.arange(c), idx] = g
        _accum(a, gflat.reshape(a.value.shape))

    return _make(out_val, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _offset_slices(offset, out_dims, stride):
    return tuple(
        slice(d, d + stride * (o - 1) + 1, stride) for d, o in zip(offset, out_dims)
    )


def conv(x: Node, kernel: Node, bias: Node | None = None, stride: int = 1) -> Node:
    """D-dimensional convolution, channel-first.

    ``x`` is (C_in, *spatial), ``kernel`` is (C_out, C_in, *k) with odd
    kernel sizes. Symmetric zero padding of k//2 keeps spatial dims at
    stride 1; stride s produces ceil(n/s) outputs per axis.
    """
    nd = x.value.ndim - 1
    if kernel.value.ndim != nd + 2:
        raise ValueError(
            f"kernel rank {kernel.value.ndim} does not fit {nd}D input"
        )
    if kernel.value.shape[1] != x.value.shape[0]:
        raise ValueError(
            f"kernel expects {kernel.value.shape[1]} input channels, "
            f"input has {x.value.shape[0]}"
        )
    ksizes = kernel.value.shape[2:]
    if any(k % 2 == 0 for k in ksizes):
        raise ValueError(f"kernel sizes must be odd, got {ksizes}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if bias is not None and bias.value.shape != (kernel.value.shape[0],):
        raise ValueError("bias must be one scalar per output channel")

    spatial = x.value.shape[1:]
    pads = [k // 2 for k in ksizes]
    out_dims = tuple(-(-n // stride) for n in spatial)
    xp = np.pad(x.value, [(0, 0)] + [(p, p) for p in pads])
    c_out = kernel.value.shape[0]
    out_val = np.zeros((c_out, *out_dims), dtype=x.value.dtype)
    offsets = list(itertools.product(*[range(k) for k in ksizes]))
    for off in offsets:
        view = xp[(slice(None),) + _offset_slices(off, out_dims, stride)]
        w = kernel.value[(slice(None), slice(None)) + off]
        out_val += np.tensordot(w, view, axes=([1], [0]))
    if bias is not None:
        out_val += bias.value.reshape((c_out,) + (1,) * nd)

    def backward_fn(g):
        spatial_axes = list(range(1, nd + 1))
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.value)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for off in offsets:
            sl = (slice(None),) + _offset_slices(off, out_dims, stride)
            if kernel.requires_grad:
                view = xp[sl]
                gk[(slice(None), slice(None)) + off] = np.tensordot(
                    g, view, axes=(spatial_axes, spatial_axes)
                )
            if gxp is not None:
                w = kernel.value[(slice(None), slice(None)) + off]
                gxp[sl] += np.tensordot(w, g, axes=([0], [0]))
        if kernel.requires_grad:
            _accum(kernel, gk)
        if gxp is not None:
            crop = (slice(None),) + tuple(
                slice(p, p + n) for p, n in zip(pads, spatial)
            )
            _accum(x, gxp[crop])
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=tuple(spatial_axes)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_val, parents, backward_fn)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _resample_forward(src: np.ndarray, coords: np.ndarray):
    """Multilinear sampling of (C, *S) values at (D, *T) voxel coordinates.

    Coordinates are clamped to the domain (replicate boundary). Returns the
    (C, *T) result plus a cache for the backward pass.
    """
    nd = coords.shape[0]
    dims = src.shape[1:]
    if len(dims) != nd:
        raise ValueError(f"{nd} coordinate channels for {len(dims)}D source")
    tgt = coords.shape[1:]
    m = int(np.prod(tgt))
    c = src.shape[0]
    src_flat = src.reshape(c, -1)
    strides = np.ones(nd, dtype=np.intp)
    for d in range(nd - 2, -1, -1):
        strides[d] = strides[d + 1] * dims[d + 1]

    i0, frac, inside = [], [], []
    for d in range(nd):
        cd = np.clip(coords[d].reshape(-1), 0.0, dims[d] - 1.0)
        base = np.minimum(np.floor(cd).astype(np.intp), dims[d] - 2)
        i0.append(base)
        frac.append(cd - base)
        raw = coords[d].reshape(-1)
        inside.append((raw > 0.0) & (raw < dims[d] - 1.0))

    corners = []
    out = np.zeros((c, m), dtype=src.dtype)
    for bits in itertools.product((0, 1), repeat=nd):
        flat = np.zeros(m, dtype=np.intp)
        w = np.ones(m, dtype=src.dtype)
        for d, b in enumerate(bits):
            flat += (i0[d] + b) * strides[d]
            w = w * (frac[d] if b else (1.0 - frac[d]))
        vals = src_flat[:, flat]
        out += vals * w
        corners.append((bits, flat, w, vals))
    cache = {
        "corners": corners,
        "frac": frac,
        "inside": inside,
        "src_shape": src.shape,
        "tgt_shape": tgt,
        "nd": nd,
    }
    return out.reshape(c, *tgt), cache


def _resample_backward(cache, g, need_src: bool, need_coords: bool):
    nd = cache["nd"]
    c = cache["src_shape"][0]
    n_flat = int(np.prod(cache["src_shape"][1:]))
    g2 = g.reshape(c, -1)
    g_src = None
    g_coords = None
    if need_src:
        g_src = np.zeros((c, n_flat), dtype=g.dtype)
        for _, flat, w, _ in cache["corners"]:
            contrib = g2 * w
            for ch in range(c):
                g_src[ch] += np.bincount(flat, weights=contrib[ch], minlength=n_flat)
        g_src = g_src.reshape(cache["src_shape"]).astype(g.dtype, copy=False)
    if need_coords:
        m = g2.shape[1]
        g_coords = np.zeros((nd, m), dtype=g.dtype)
        frac = cache["frac"]
        for bits, _, _, vals in cache["corners"]:
            gv = (g2 * vals).sum(axis=0)
            for d in range(nd):
                w_other = np.ones(m, dtype=g.dtype)
                for dd, b in enumerate(bits):
                    if dd == d:
                        continue
                    w_other = w_other * (frac[dd] if b else (1.0 - frac[dd]))
                sign = 1.0 if bits[d] else -1.0
                g_coords[d] += sign * gv * w_other
        for d in range(nd):
            g_coords[d] *= cache["inside"][d]
        g_coords = g_coords.reshape((nd,) + cache["tgt_shape"])
    return g_src, g_coords


def grid_resample(source: Node, coords: Node) -> Node:
    """Sample ``source`` (C, *S) at ``coords`` (D, *T), multilinear with
    clamped boundaries; differentiable in both arguments."""
    out_val, cache = _resample_forward(source.value, coords.value)

    def backward_fn(g):
        g_src, g_coords = _resample_backward(
            cache, g, source.requires_grad, coords.requires_grad
        )
        if g_src is not None:
            _accum(source, g_src)
        if g_coords is not None:
            _accum(coords, g_coords)

    return _make(out_val, (source, coords), backward_fn)


def upsample(x: Node, factor: int, mode: str = "nearest", dims=None) -> Node:
    """Upsample a (C, *S) grid by an integer factor.

    ``mode="nearest"`` repeats samples (output dims are factor * input).
    ``mode="linear"`` places input sample k at output voxel k * factor and
    interpolates multilinearly; ``dims`` overrides the output extent (edge
    values replicate past the last sample).
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    nd = x.value.ndim - 1
    spatial = x.value.shape[1:]
    if mode == "nearest":
        if dims is not None and tuple(dims) != tuple(f * factor for f in spatial):
            raise ValueError("nearest mode does not support custom output dims")
        if factor == 1:
            return x
        out_val = x.value
        for ax in range(1, nd + 1):
            out_val = np.repeat(out_val, factor, axis=ax)

        def backward_fn(g):
            shape = []
            for n in spatial:
                shape.extend((n, factor))
            gg = g.reshape(x.value.shape[0], *shape)
            gg = gg.sum(axis=tuple(range(2, 2 * nd + 1, 2)))
            _accum(x, gg)

        return _make(out_val, (x,), backward_fn)

    if mode != "linear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    if dims is None:
        dims = tuple(n * factor for n in spatial)
    if factor == 1 and tuple(dims) == spatial:
        return x
    axes = [np.arange(n, dtype=np.float64) / factor for n in dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out_val, cache = _resample_forward(x.value, coords.astype(x.value.dtype))

    def backward_fn(g):
        g_src, _ = _resample_backward(cache, g, x.requires_grad, False)
        if g_src is not None:
            _accum(x, g_src)

    return _make(out_val, (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------


def backward(root: Node) -> None:
    """Reverse-mode accumulation from a scalar root.

    Fills ``.grad`` on every reachable node with ``requires_grad``; grads
    from any previous backward pass through these nodes are discarded.
    """
    if root.value.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    if not root.requires_grad:
        return
    root.grad = np.ones((), dtype=root.value.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
