"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

The key property of this engine is that backward rules are themselves written
in terms of recorded operations ("backward as forward").  Calling
:func:`gradient` with ``create_graph=True`` therefore returns nodes that can be
differentiated again, which is what unrolled inner-loop optimization needs:
the outer training gradient flows through the inner gradient-descent updates.

All values are 64-bit floats.  A non-finite forward value is treated as an
error state and raises immediately.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage, signal


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class NonFiniteError(AutodiffError):
    """Raised when a forward evaluation produces NaN or Inf."""


_grad_enabled = True
_active_tape = None


class no_grad:
    """Context manager: ops executed inside produce constant nodes."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One recorded operation: its tag, input references and forward value.

    ``_vjp`` maps an upstream gradient node to per-input gradient nodes, and is
    built exclusively from recorded ops so that second-order differentiation
    works.  ``_fwd`` recomputes the value from input values (used for tape
    replay).
    """

    __slots__ = ("value", "op", "inputs", "requires_grad", "_vjp", "_fwd")

    def __init__(self, value, op, inputs, requires_grad, vjp=None, fwd=None):
        self.value = value
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._vjp = vjp
        self._fwd = fwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, n):
        return powi(self, n)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of nodes plus a registry of named differentiable leaves.

    Nodes are appended in creation order, which is a topological order by
    construction.  ``replay`` re-evaluates every recorded op from the current
    leaf values and checks bit-identical reproduction.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def replay(self):
        """Recompute every node from its inputs; raise if any value differs."""
        for node in self.nodes:
            if node._fwd is None:
                continue
            new = node._fwd(*[inp.value for inp in node.inputs])
            if not np.array_equal(np.asarray(new), node.value):
                raise AutodiffError(f"replay mismatch at op {node.op!r}")
        return True


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by op {op!r}")


# shape-only ops cannot create non-finite values from finite inputs
_NO_CHECK_OPS = frozenset({"reshape", "transpose", "broadcast"})


def _make(op, inputs, value, vjp=None, fwd=None):
    value = _asarray(value)
    if op not in _NO_CHECK_OPS:
        _check_finite(value, op)
    rg = _grad_enabled and any(i.requires_grad for i in inputs)
    keep = rg or _active_tape is not None
    node = Node(
        value,
        op,
        tuple(inputs) if keep else (),
        rg,
        vjp if keep else None,
        fwd if keep else None,
    )
    if _active_tape is not None:
        _active_tape.nodes.append(node)
    return node


def constant(value):
    value = _asarray(value)
    _check_finite(value, "constant")
    node = Node(value, "constant", (), False)
    if _active_tape is not None:
        _active_tape.nodes.append(node)
    return node


def leaf(value, name=None):
    """A differentiable input.  Registered on the active tape if any."""
    value = _asarray(value)
    _check_finite(value, "leaf")
    node = Node(value, "leaf", (), _grad_enabled)
    if _active_tape is not None:
        _active_tape.nodes.append(node)
        if name is not None:
            _active_tape.leaves[name] = node
    return node


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.value.shape == tuple(shape):
        return g
    return sum_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "add",
        (a, b),
        value,
        vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        fwd=lambda x, y: x + y,
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "subtract",
        (a, b),
        value,
        vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
        fwd=lambda x, y: x - y,
    )


def neg(a):
    a = _lift(a)
    return _make("negate", (a,), -a.value, vjp=lambda g: (neg(g),), fwd=lambda x: -x)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "multiply",
        (a, b),
        value,
        vjp=lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
        fwd=lambda x, y: x * y,
    )


def smul(a, c):
    """Multiply by a python float constant."""
    a = _lift(a)
    c = float(c)
    return _make(
        "scalar_multiply",
        (a,),
        a.value * c,
        vjp=lambda g: (smul(g, c),),
        fwd=lambda x: x * c,
    )


def square(a):
    a = _lift(a)
    return _make(
        "square",
        (a,),
        a.value * a.value,
        vjp=lambda g: (smul(mul(g, a), 2.0),),
        fwd=lambda x: x * x,
    )


def powi(a, n):
    """Integer power, n >= 0."""
    a = _lift(a)
    n = int(n)
    if n < 0:
        raise ShapeError("power: negative exponents not supported")

    def vjp(g):
        if n == 0:
            return (smul(g, 0.0),)
        return (smul(mul(g, powi(a, n - 1)), float(n)),)

    return _make("power", (a,), a.value**n, vjp=vjp, fwd=lambda x: x**n)


def sin(a):
    a = _lift(a)
    return _make("sine", (a,), np.sin(a.value), vjp=lambda g: (mul(g, cos(a)),), fwd=np.sin)


def cos(a):
    a = _lift(a)
    return _make(
        "cosine", (a,), np.cos(a.value), vjp=lambda g: (neg(mul(g, sin(a))),), fwd=np.cos
    )


def tanh(a):
    a = _lift(a)
    out = _make("tanh", (a,), np.tanh(a.value), fwd=np.tanh)
    out._vjp = lambda g: (mul(g, sub(1.0, square(out))),)
    return out


def sigmoid(a):
    a = _lift(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out = _make("sigmoid", (a,), value, fwd=lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)))
    out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a):
    a = _lift(a)
    return _make(
        "softplus",
        (a,),
        np.logaddexp(0.0, a.value),
        vjp=lambda g: (mul(g, sigmoid(a)),),
        fwd=lambda x: np.logaddexp(0.0, x),
    )


def absolute(a):
    """|x|; the subgradient sign(x) is captured as a constant (exact a.e.)."""
    a = _lift(a)
    sgn = np.sign(a.value)
    return _make(
        "abs",
        (a,),
        np.abs(a.value),
        vjp=lambda g: (mul(g, constant(sgn)),),
        fwd=np.abs,
    )


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    old = a.value.shape
    return _make(
        "reshape",
        (a,),
        a.value.reshape(shape),
        vjp=lambda g: (reshape(g, old),),
        fwd=lambda x: x.reshape(shape),
    )


def transpose(a):
    a = _lift(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got shape {a.shape}")
    return _make(
        "transpose", (a,), a.value.T, vjp=lambda g: (transpose(g),), fwd=lambda x: x.T
    )


def broadcast_to(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    old = a.value.shape
    return _make(
        "broadcast",
        (a,),
        value,
        vjp=lambda g: (sum_to(g, old),),
        fwd=lambda x: np.broadcast_to(x, shape).copy(),
    )


def _sum_to_value(x, shape):
    shape = tuple(shape)
    ndim_extra = x.ndim - len(shape)
    if ndim_extra < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    for _ in range(ndim_extra):
        x = x.sum(axis=0)
    for axis, s in enumerate(shape):
        if x.shape[axis] != s:
            if s != 1:
                raise ShapeError(f"sum_to: incompatible target {shape}")
            x = x.sum(axis=axis, keepdims=True)
    return x


def sum_to(a, shape):
    """Reduce over broadcast axes so the result has the given shape."""
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    return _make(
        "sum_to",
        (a,),
        _sum_to_value(a.value, shape),
        vjp=lambda g: (broadcast_to(g, a.shape),),
        fwd=lambda x: _sum_to_value(x, shape),
    )


def getitem(a, key):
    """Basic (non-fancy) indexing; backward scatters into zeros."""
    a = _lift(a)
    value = a.value[key]
    old = a.value.shape

    def vjp(g):
        return (scatter_slice(g, key, old),)

    return _make("slice", (a,), np.array(value, copy=True), vjp=vjp, fwd=lambda x: np.array(x[key], copy=True))


def scatter_slice(g, key, shape):
    """Place ``g`` into a zero array of ``shape`` at basic-index ``key``."""
    g = _lift(g)

    def fwd(x):
        out = np.zeros(shape)
        out[key] = x
        return out

    return _make("scatter_slice", (g,), fwd(g.value), vjp=lambda h: (getitem(h, key),), fwd=fwd)


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[p.shape for p in parts]} do not align on axis {axis}"
        )
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            key = [slice(None)] * g.value.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(getitem(g, tuple(key)))
        return tuple(grads)

    return _make(
        "concat",
        tuple(parts),
        value,
        vjp=vjp,
        fwd=lambda *xs: np.concatenate(xs, axis=axis),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")

        def vjp(g):
            return (matmul(g, transpose(b)), matmul(transpose(a), g))

    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
        m, k = av.shape

        def vjp(g):
            ga = matmul(reshape(g, (m, 1)), reshape(b, (1, k)))
            gb = matmul(transpose(a), g)
            return (ga, gb)

    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
        k, n = bv.shape

        def vjp(g):
            ga = matmul(b, g)
            gb = matmul(reshape(a, (k, 1)), reshape(g, (1, n)))
            return (ga, gb)

    else:
        raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")

    # einsum (not BLAS) keeps row sums in a fixed order, so evaluating a
    # batch of rows is bit-identical to evaluating each row alone
    subs = {(2, 2): "ij,jk->ik", (2, 1): "ij,j->i", (1, 2): "i,ik->k"}[(av.ndim, bv.ndim)]

    def _fwd(x, y):
        return np.einsum(subs, x, y)

    return _make("matmul", (a, b), _fwd(av, bv), vjp=vjp, fwd=_fwd)


# ---------------------------------------------------------------------------
# gather / scatter


def _leading_index(idx_shape):
    ndim = len(idx_shape)
    grids = []
    for axis in range(ndim - 1):
        shape = [1] * ndim
        shape[axis] = idx_shape[axis]
        grids.append(np.arange(idx_shape[axis]).reshape(shape))
    return tuple(grids)


def gather(a, idx):
    """out[..., j] = a[..., idx[..., j]] along the last axis.

    Leading dimensions of ``idx`` must equal those of ``a``.  This is exactly
    the product with a stack of one-hot measurement matrices.
    """
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != a.value.ndim or idx.shape[:-1] != a.value.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} vs source {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[-1]):
        raise ShapeError(
            f"gather: index out of range [0, {a.value.shape[-1] - 1}]"
        )
    src_shape = a.value.shape

    def fwd(x):
        return np.take_along_axis(x, idx, axis=-1)

    return _make(
        "gather",
        (a,),
        fwd(a.value),
        vjp=lambda g: (scatter_add(g, idx, src_shape),),
        fwd=fwd,
    )


def scatter_add(g, idx, shape):
    """Adjoint of gather: accumulate g into a zero array (duplicates add)."""
    g = _lift(g)
    idx = np.asarray(idx, dtype=np.intp)
    shape = tuple(shape)
    lead = _leading_index(idx.shape)

    def fwd(x):
        out = np.zeros(shape)
        np.add.at(out, lead + (idx,), x)
        return out

    return _make(
        "scatter_add",
        (g,),
        fwd(g.value),
        vjp=lambda h: (gather(h, idx),),
        fwd=fwd,
    )


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(a):
    a = _lift(a)
    shape = a.value.shape
    return _make(
        "sum",
        (a,),
        np.sum(a.value),
        vjp=lambda g: (broadcast_to(g, shape),),
        fwd=np.sum,
    )


def mean(a):
    a = _lift(a)
    return smul(sum_(a), 1.0 / a.value.size)


def mse(a, b):
    """Mean squared error reduction."""
    return mean(square(sub(a, b)))


def huber(a, b, delta=1.0):
    """Mean Huber loss with threshold delta.

    The quadratic/linear region mask is captured from the forward values; its
    derivative contribution is zero almost everywhere, so higher-order
    gradients through this composite remain exact a.e.
    """
    a, b = _lift(a), _lift(b)
    e = sub(a, b)
    quad = np.abs(e.value) <= delta
    mask = constant(quad.astype(np.float64))
    inv = constant((~quad).astype(np.float64))
    quadratic = smul(square(e), 0.5)
    linear = smul(sub(absolute(e), 0.5 * delta), delta)
    return mean(add(mul(mask, quadratic), mul(inv, linear)))


# ---------------------------------------------------------------------------
# stencil cross-correlation


def _corr_wrap(x, kernel):
    return ndimage.correlate(x, kernel, mode="wrap")


def _corr_valid(x, kernel):
    return signal.correlate2d(x, kernel, mode="valid")


def _corr_full(x, kernel):
    return signal.correlate2d(x, kernel, mode="full")


def conv2d(a, kernel, mode="wrap"):
    """2D cross-correlation with a fixed (constant) kernel.

    mode 'wrap' keeps the field size with periodic boundaries, 'valid'
    evaluates the interior only, 'full' zero-pads ('full' exists because it is
    the adjoint of 'valid').
    """
    a = _lift(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if a.value.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"conv2d: expected 2D field and kernel, got {a.shape}, {kernel.shape}")
    if mode in ("wrap", "valid") and (
        a.value.shape[0] < kernel.shape[0] or a.value.shape[1] < kernel.shape[1]
    ):
        raise ShapeError(f"conv2d: field {a.shape} smaller than kernel {kernel.shape}")
    flipped = kernel[::-1, ::-1].copy()
    if mode == "wrap":
        fwd = lambda x: _corr_wrap(x, kernel)
        vjp = lambda g: (conv2d(g, flipped, mode="wrap"),)
    elif mode == "valid":
        fwd = lambda x: _corr_valid(x, kernel)
        vjp = lambda g: (conv2d(g, flipped, mode="full"),)
    elif mode == "full":
        fwd = lambda x: _corr_full(x, kernel)
        vjp = lambda g: (conv2d(g, flipped, mode="valid"),)
    else:
        raise ShapeError(f"conv2d: unknown mode {mode!r}")
    return _make("conv2d", (a,), fwd(a.value), vjp=vjp, fwd=fwd)


def conv1d(a, kernel, mode="wrap"):
    """1D cross-correlation with a fixed kernel (periodic or valid interior)."""
    a = _lift(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if a.value.ndim != 1 or kernel.ndim != 1:
        raise ShapeError(f"conv1d: expected 1D field and kernel, got {a.shape}, {kernel.shape}")
    if mode in ("wrap", "valid") and a.value.shape[0] < kernel.shape[0]:
        raise ShapeError(f"conv1d: field {a.shape} smaller than kernel {kernel.shape}")
    flipped = kernel[::-1].copy()
    if mode == "wrap":
        fwd = lambda x: ndimage.correlate1d(x, kernel, mode="wrap")
        vjp = lambda g: (conv1d(g, flipped, mode="wrap"),)
    elif mode == "valid":
        fwd = lambda x: np.correlate(x, kernel, mode="valid")
        vjp = lambda g: (conv1d(g, flipped, mode="full"),)
    elif mode == "full":
        fwd = lambda x: np.correlate(x, kernel, mode="full")
        vjp = lambda g: (conv1d(g, flipped, mode="valid"),)
    else:
        raise ShapeError(f"conv1d: unknown mode {mode!r}")
    return _make("conv1d", (a,), fwd(a.value), vjp=vjp, fwd=fwd)


# ---------------------------------------------------------------------------
# gradient engine


def _topo_from(output):
    """Nodes reachable from output through requires_grad inputs, topo order."""
    order = []
    state = {}
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            state[id(node)] = 2
            continue
        if state.get(id(node), 0):
            continue
        state[id(node)] = 1
        stack.append((node, True))
        for inp in node.inputs:
            if inp.requires_grad and state.get(id(inp), 0) == 0:
                stack.append((inp, False))
    return order


def gradient(output, leaves, create_graph=False):
    """Reverse-mode gradients of a scalar output w.r.t. the given nodes.

    With ``create_graph=True`` the returned gradients are recorded nodes, so a
    further gradient call through them yields exact second-order derivatives.
    Otherwise plain float64 arrays are returned.  A leaf unreachable from the
    output gets a zero gradient of its shape.
    """
    if output.value.shape != ():
        raise ShapeError(f"gradient: output must be scalar, got shape {output.value.shape}")
    for lf in leaves:
        if not lf.requires_grad:
            raise AutodiffError("gradient: every target must have requires_grad")

    topo = _topo_from(output)
    targets = {id(lf) for lf in leaves}
    # a node is relevant if some differentiation target is in its subtree
    relevant = set()
    for node in topo:
        if id(node) in targets or any(id(i) in relevant for i in node.inputs):
            relevant.add(id(node))
    if id(output) not in relevant:
        result = [np.zeros(lf.value.shape) for lf in leaves]
        return [constant(r) for r in result] if create_graph else result

    grads = {}

    def run():
        grads[id(output)] = constant(np.ones(()))
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None or id(node) not in relevant:
                continue
            if id(node) in targets:
                targets_hit[id(node)] = (
                    add(targets_hit[id(node)], g) if id(node) in targets_hit else g
                )
                if node.op in ("leaf", "constant"):
                    continue
            if node._vjp is None:
                continue
            if not any(inp.requires_grad and id(inp) in relevant for inp in node.inputs):
                continue
            contribs = node._vjp(g)
            for inp, c in zip(node.inputs, contribs):
                if c is None or not inp.requires_grad or id(inp) not in relevant:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = c if prev is None else add(prev, c)

    targets_hit = {}
    if create_graph:
        run()
    else:
        with no_grad():
            run()

    out = []
    for lf in leaves:
        g = targets_hit.get(id(lf))
        if g is None:
            g = constant(np.zeros(lf.value.shape))
        out.append(g if create_graph else g.value)
    return out


def check_gradient(f, x0, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Node to a scalar Node; ``x0`` is the evaluation point.
    """
    x0 = _asarray(x0)
    x = leaf(x0)
    y = f(x)
    (analytic,) = gradient(y, [x])

    flat = x0.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn, slot in ((1.0, 0), (-1.0, 1)):
            pert = flat.copy()
            pert[i] += sgn * step
            with no_grad():
                val = f(constant(pert.reshape(x0.shape))).value
            if not np.isfinite(val):
                raise NonFiniteError("check_gradient: non-finite probe value")
            if slot == 0:
                plus = float(val)
            else:
                minus = float(val)
        numeric[i] = (plus - minus) / (2.0 * step)
    numeric = numeric.reshape(x0.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
