"""Reverse-mode automatic differentiation over dense float64 tensors.

Expressions form an immutable DAG.  ``gradient`` performs reverse
accumulation *symbolically*: the adjoints it returns are themselves
expressions built from the same op vocabulary, so gradients can be
differentiated again (nested/double backpropagation) to any depth.
``detach`` inserts a node that forwards its value but contributes zero
to every adjoint.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major.
Evaluation is pure and deterministic: identical bindings produce
bit-identical outputs.
"""

from __future__ import annotations

import itertools

import numpy as np

Tensor = np.ndarray

_ids = itertools.count()


class AutodiffError(Exception):
    """Raised for graph construction or evaluation errors."""


class UnboundLeafError(AutodiffError):
    """A leaf reachable from the evaluation root has no binding."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible for the requested op."""


class Expr:
    """One node of the expression DAG.

    Nodes are immutable after construction.  ``shape`` is inferred
    statically; ``requires_grad`` is true when some leaf beneath the
    node (not cut off by a detach) requires gradients.
    """

    __slots__ = ("op", "args", "attrs", "shape", "requires_grad", "detached", "_id")

    def __init__(self, op, args=(), attrs=None, shape=(), requires_grad=False,
                 detached=False):
        self.op = op
        self.args = tuple(args)
        self.attrs = attrs or {}
        self.shape = tuple(shape)
        self.requires_grad = requires_grad
        self.detached = detached
        self._id = next(_ids)

    def __repr__(self):
        name = self.attrs.get("name")
        tag = f" {name!r}" if name else ""
        return f"<Expr {self.op}{tag} shape={self.shape}>"

    # Operator sugar used throughout model/loss construction.
    def __add__(self, other):
        return add(self, _coerce(other, self.shape))

    def __radd__(self, other):
        return add(_coerce(other, self.shape), self)

    def __sub__(self, other):
        return add(self, scale(_coerce(other, self.shape), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.shape), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, shape):
    if isinstance(value, Expr):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return const(arr)


def _node(op, args, attrs, shape):
    rg = any(a.requires_grad for a in args)
    return Expr(op, args, attrs, shape, requires_grad=rg)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def leaf(name, shape, requires_grad=True):
    """A named input slot, bound to a concrete tensor at evaluation time."""
    return Expr("leaf", (), {"name": name}, tuple(shape), requires_grad=requires_grad)


def const(value):
    """A constant tensor; never receives gradients."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("constant contains non-finite entries")
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return Expr("const", (), {"value": arr}, arr.shape)


def detach(x):
    """Forward the value of ``x`` but block all gradient flow through it."""
    out = Expr("detach", (x,), {}, x.shape, requires_grad=False, detached=True)
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node("add", (a, b), {}, a.shape)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node("mul", (a, b), {}, a.shape)


def scale(x, c):
    """Multiply by a static Python scalar."""
    return _node("scale", (x,), {"c": float(c)}, x.shape)


def matmul(a, b):
    if a.shape == () or b.shape == ():
        raise ShapeError("matmul: operands must have rank >= 1")
    if len(a.shape) > 2 or len(b.shape) > 2:
        raise ShapeError("matmul: rank > 2 unsupported")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if len(a.shape) == 1 and len(b.shape) == 1:
        shape = ()
    elif len(a.shape) == 1:
        shape = (b.shape[1],)
    elif len(b.shape) == 1:
        shape = (a.shape[0],)
    else:
        shape = (a.shape[0], b.shape[1])
    return _node("matmul", (a, b), {}, shape)


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return _node("reshape", (x,), {"shape": shape}, shape)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(len(x.shape))))
    axes = tuple(axes)
    shape = tuple(x.shape[a] for a in axes)
    return _node("transpose", (x,), {"axes": axes}, shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: {x.shape} to {shape}") from exc
    return _node("broadcast", (x,), {"shape": shape}, shape)


def reduce_sum(x, axes=None):
    if axes is None:
        shape = ()
    else:
        axes = tuple(sorted(a % len(x.shape) for a in axes))
        shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return _node("reduce_sum", (x,), {"axes": axes}, shape)


def reduce_max(x):
    """Maximum over all entries; ties resolve to the first (row-major) index."""
    return _node("reduce_max", (x,), {}, ())


def mean(x):
    n = int(np.prod(x.shape, dtype=np.int64))
    return scale(reduce_sum(x), 1.0 / n)


def power(x, p):
    if p == 1.0:
        return x
    return _node("power", (x,), {"p": float(p)}, x.shape)


def relu(x):
    return _node("relu", (x,), {}, x.shape)


def softplus(x):
    return _node("softplus", (x,), {}, x.shape)


def sigmoid(x):
    return _node("sigmoid", (x,), {}, x.shape)


def exp(x):
    return _node("exp", (x,), {}, x.shape)


def absval(x):
    return _node("abs", (x,), {}, x.shape)


def sign(x):
    """Componentwise sign with sign(0) = 0; gradient is zero everywhere."""
    return _node("sign", (x,), {}, x.shape)


def step(x):
    """Heaviside with step(0) = 0; gradient is zero everywhere."""
    return _node("step", (x,), {}, x.shape)


def argmax_onehot(x):
    """One-hot mask of the first (row-major) argmax; gradient is zero."""
    return _node("argmax_onehot", (x,), {}, x.shape)


def logsumexp(x):
    """Numerically stable log-sum-exp over all entries of ``x``."""
    return _node("logsumexp", (x,), {}, ())


def gather(x, indices):
    if len(x.shape) != 1:
        raise ShapeError("gather: rank-1 operand required")
    indices = tuple(int(i) for i in indices)
    for i in indices:
        if not 0 <= i < x.shape[0]:
            raise ShapeError(f"gather: index {i} out of range for {x.shape}")
    return _node("gather", (x,), {"indices": indices}, (len(indices),))


def scatter(x, indices, size):
    """Dual of gather: place entries of ``x`` into zeros of length ``size``."""
    indices = tuple(int(i) for i in indices)
    if x.shape != (len(indices),):
        raise ShapeError("scatter: operand shape must match index count")
    return _node("scatter", (x,), {"indices": indices, "size": int(size)}, (int(size),))


def pad2d(x, p):
    if len(x.shape) != 3:
        raise ShapeError("pad2d: expects (C, H, W)")
    c, h, w = x.shape
    p = int(p)
    return _node("pad2d", (x,), {"p": p}, (c, h + 2 * p, w + 2 * p))


def crop2d(x, p):
    if len(x.shape) != 3:
        raise ShapeError("crop2d: expects (C, H, W)")
    c, h, w = x.shape
    p = int(p)
    if h <= 2 * p or w <= 2 * p:
        raise ShapeError("crop2d: crop exceeds extent")
    return _node("crop2d", (x,), {"p": p}, (c, h - 2 * p, w - 2 * p))


def unfold(x, kh, kw):
    """im2col: (C, H, W) -> (positions, C*kh*kw) patches at stride 1."""
    if len(x.shape) != 3:
        raise ShapeError("unfold: expects (C, H, W)")
    c, h, w = x.shape
    kh, kw = int(kh), int(kw)
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"unfold: kernel ({kh},{kw}) larger than input {x.shape}")
    return _node("unfold", (x,), {"kh": kh, "kw": kw, "in_shape": (c, h, w)},
                 (ho * wo, c * kh * kw))


def fold(x, in_shape, kh, kw):
    """col2im: scatter-add patch matrix back to (C, H, W). Dual of unfold."""
    c, h, w = in_shape
    kh, kw = int(kh), int(kw)
    ho, wo = h - kh + 1, w - kw + 1
    if x.shape != (ho * wo, c * kh * kw):
        raise ShapeError(f"fold: operand {x.shape} does not match {(c, h, w)}")
    return _node("fold", (x,), {"kh": kh, "kw": kw, "in_shape": (c, h, w)}, (c, h, w))


def conv2d(x, weight, bias, kh, kw, padding):
    """2-D convolution, stride 1, zero padding, built compositionally.

    x: (C_in, H, W); weight: (C_out, C_in*kh*kw); bias: (C_out,).
    Returns (C_out, H_out, W_out) with H_out = H + 2*padding - kh + 1.
    Assembled from pad/unfold/matmul, so every derivative, to any order,
    reduces to first-order rules of linear structural ops.
    """
    c_in, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, c_in * kh * kw):
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with "
                         f"input {x.shape} and kernel ({kh},{kw})")
    if kh > 5 or kw > 5:
        raise ShapeError("conv2d: kernels above 5x5 unsupported")
    xp = pad2d(x, padding) if padding else x
    cols = unfold(xp, kh, kw)                       # (P, C_in*kh*kw)
    out = matmul(cols, transpose(weight))           # (P, C_out)
    out = add(out, broadcast_to(bias, out.shape))
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    return reshape(transpose(out), (c_out, ho, wo))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _toposort(roots):
    order = []
    seen = set()
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, ready = stack.pop()
        if ready:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for a in node.args:
            if id(a) not in seen:
                stack.append((a, False))
    return order


def _softmax(v):
    m = np.max(v)
    e = np.exp(v - m)
    return e / np.sum(e)


def _eval_node(node, vals, bindings):
    op = node.op
    if op == "leaf":
        try:
            v = bindings[node]
        except KeyError:
            raise UnboundLeafError(f"unbound leaf {node.attrs['name']!r}") from None
        v = np.asarray(v, dtype=np.float64)
        if v.shape != node.shape:
            raise ShapeError(f"leaf {node.attrs['name']!r}: bound value has shape "
                             f"{v.shape}, declared {node.shape}")
        return v
    if op == "const":
        return node.attrs["value"]
    a = vals[id(node.args[0])] if node.args else None
    if op == "detach":
        return a
    if op == "add":
        return a + vals[id(node.args[1])]
    if op == "mul":
        return a * vals[id(node.args[1])]
    if op == "scale":
        return a * node.attrs["c"]
    if op == "matmul":
        return a @ vals[id(node.args[1])]
    if op == "reshape":
        return np.reshape(a, node.attrs["shape"])
    if op == "transpose":
        return np.transpose(a, node.attrs["axes"]).copy()
    if op == "broadcast":
        return np.broadcast_to(a, node.attrs["shape"]).copy()
    if op == "reduce_sum":
        return np.sum(a, axis=node.attrs["axes"])
    if op == "reduce_max":
        return np.max(a)
    if op == "power":
        return a ** node.attrs["p"]
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "softplus":
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    if op == "sigmoid":
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    if op == "exp":
        return np.exp(a)
    if op == "abs":
        return np.abs(a)
    if op == "sign":
        return np.sign(a)
    if op == "step":
        return (a > 0).astype(np.float64)
    if op == "argmax_onehot":
        out = np.zeros(a.shape)
        out.flat[np.argmax(a)] = 1.0
        return out
    if op == "logsumexp":
        m = np.max(a)
        return m + np.log(np.sum(np.exp(a - m)))
    if op == "gather":
        return a[list(node.attrs["indices"])]
    if op == "scatter":
        out = np.zeros(node.attrs["size"])
        np.add.at(out, list(node.attrs["indices"]), a)
        return out
    if op == "pad2d":
        p = node.attrs["p"]
        return np.pad(a, ((0, 0), (p, p), (p, p)))
    if op == "crop2d":
        p = node.attrs["p"]
        return a[:, p:-p, p:-p].copy()
    if op == "unfold":
        kh, kw = node.attrs["kh"], node.attrs["kw"]
        win = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(1, 2))
        # (C, Ho, Wo, kh, kw) -> (Ho*Wo, C*kh*kw)
        c = a.shape[0]
        ho, wo = win.shape[1], win.shape[2]
        return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)
    if op == "fold":
        kh, kw = node.attrs["kh"], node.attrs["kw"]
        c, h, w = node.attrs["in_shape"]
        ho, wo = h - kh + 1, w - kw + 1
        patches = a.reshape(ho, wo, c, kh, kw)
        out = np.zeros((c, h, w))
        for i in range(kh):
            for j in range(kw):
                out[:, i:i + ho, j:j + wo] += patches[:, :, :, i, j].transpose(2, 0, 1)
        return out
    raise AutodiffError(f"unknown op {op!r}")


def forward_many(roots, bindings):
    """Evaluate several roots with a shared memo; returns a list of arrays."""
    roots = list(roots)
    vals = {}
    for node in _toposort(roots):
        vals[id(node)] = _eval_node(node, vals, bindings)
    outs = []
    for r in roots:
        v = vals[id(r)]
        if not np.all(np.isfinite(v)):
            raise AutodiffError(f"non-finite value at {r!r}")
        outs.append(v)
    return outs


def forward(root, bindings):
    """Evaluate ``root`` under leaf ``bindings``; pure, deterministic."""
    return forward_many([root], bindings)[0]


class Runner:
    """Pre-toposorted evaluator for repeated evaluation of a fixed graph.

    Avoids re-walking the DAG every step of a training loop.  Bindings
    change between calls; the graph does not.
    """

    def __init__(self, roots):
        self.roots = list(roots)
        self.order = _toposort(self.roots)

    def __call__(self, bindings, check_finite=True):
        vals = {}
        for node in self.order:
            vals[id(node)] = _eval_node(node, vals, bindings)
        outs = [vals[id(r)] for r in self.roots]
        if check_finite:
            for r, v in zip(self.roots, outs):
                if not np.all(np.isfinite(v)):
                    raise AutodiffError(f"non-finite value at {r!r}")
        return outs


# ---------------------------------------------------------------------------
# Symbolic reverse accumulation
# ---------------------------------------------------------------------------

def _vjp(node, adj):
    """Adjoint contributions of ``node`` to its args, as expressions."""
    op = node.op
    a = node.args[0] if node.args else None
    if op == "add":
        return [(node.args[0], adj), (node.args[1], adj)]
    if op == "mul":
        x, y = node.args
        return [(x, mul(adj, y)), (y, mul(adj, x))]
    if op == "scale":
        return [(a, scale(adj, node.attrs["c"]))]
    if op == "matmul":
        x, y = node.args
        rx, ry = len(x.shape), len(y.shape)
        if rx == 1 and ry == 1:          # dot: () adjoint
            g = broadcast_to(adj, x.shape)
            return [(x, mul(g, y)), (y, mul(g, x))]
        if rx == 1 and ry == 2:          # (n,) @ (n,m) -> (m,)
            return [(x, matmul(y, adj)),
                    (y, matmul(reshape(x, (x.shape[0], 1)),
                               reshape(adj, (1, y.shape[1]))))]
        if rx == 2 and ry == 1:          # (n,m) @ (m,) -> (n,)
            return [(x, matmul(reshape(adj, (x.shape[0], 1)),
                               reshape(y, (1, y.shape[0])))),
                    (y, matmul(transpose(x), adj))]
        return [(x, matmul(adj, transpose(y))),
                (y, matmul(transpose(x), adj))]
    if op == "reshape":
        return [(a, reshape(adj, a.shape))]
    if op == "transpose":
        axes = node.attrs["axes"]
        inv = tuple(np.argsort(axes))
        return [(a, transpose(adj, inv))]
    if op == "broadcast":
        out_shape = node.attrs["shape"]
        in_shape = a.shape
        nlead = len(out_shape) - len(in_shape)
        axes = list(range(nlead))
        for i, d in enumerate(in_shape):
            if d == 1 and out_shape[nlead + i] != 1:
                axes.append(nlead + i)
        g = reduce_sum(adj, axes=axes) if axes else adj
        if g.shape != in_shape:
            g = reshape(g, in_shape)
        return [(a, g)]
    if op == "reduce_sum":
        axes = node.attrs["axes"]
        if axes is None:
            return [(a, broadcast_to(adj, a.shape))]
        keep = list(a.shape)
        for ax in axes:
            keep[ax] = 1
        return [(a, broadcast_to(reshape(adj, keep), a.shape))]
    if op == "reduce_max":
        return [(a, mul(broadcast_to(adj, a.shape), argmax_onehot(a)))]
    if op == "power":
        p = node.attrs["p"]
        return [(a, mul(adj, scale(power(a, p - 1.0), p)))]
    if op == "relu":
        return [(a, mul(adj, step(a)))]
    if op == "softplus":
        return [(a, mul(adj, sigmoid(a)))]
    if op == "sigmoid":
        s = sigmoid(a)
        one = const(np.ones(a.shape))
        return [(a, mul(adj, mul(s, add(one, scale(s, -1.0)))))]
    if op == "exp":
        return [(a, mul(adj, exp(a)))]
    if op == "abs":
        return [(a, mul(adj, sign(a)))]
    if op in ("sign", "step", "argmax_onehot"):
        return []                        # piecewise constant: zero gradient
    if op == "logsumexp":
        sm = exp(add(a, broadcast_to(scale(logsumexp(a), -1.0), a.shape)))
        return [(a, mul(broadcast_to(adj, a.shape), sm))]
    if op == "gather":
        return [(a, scatter(adj, node.attrs["indices"], a.shape[0]))]
    if op == "scatter":
        return [(a, gather(adj, node.attrs["indices"]))]
    if op == "pad2d":
        return [(a, crop2d(adj, node.attrs["p"]))]
    if op == "crop2d":
        return [(a, pad2d(adj, node.attrs["p"]))]
    if op == "unfold":
        at = node.attrs
        return [(a, fold(adj, at["in_shape"], at["kh"], at["kw"]))]
    if op == "fold":
        at = node.attrs
        return [(a, unfold(adj, at["kh"], at["kw"]))]
    raise AutodiffError(f"no vjp for op {op!r}")


def _sum_exprs(contribs):
    total = contribs[0]
    for c in contribs[1:]:
        total = add(total, c)
    return total


def gradient(scalar, wrt):
    """Symbolic gradients of a scalar expression.

    Returns ``{node: Expr}`` with one gradient expression per requested
    node.  The results are ordinary expressions, so they can be fed back
    into ``gradient`` (double backpropagation).  Detached nodes receive
    and propagate zero adjoints; nodes not reachable from ``scalar``
    get an explicit zero gradient.

    ``wrt`` entries are usually leaves; constants and interior nodes are
    also accepted (the adjoint arriving at that node is returned), which
    lets input gradients be taken at a fixed tensor without a leaf.
    """
    if scalar.shape != ():
        raise ShapeError(f"gradient: root must be scalar, got shape {scalar.shape}")
    wrt = list(wrt)
    for w in wrt:
        if w.op == "leaf" and not w.requires_grad:
            raise AutodiffError(f"gradient: leaf {w.attrs['name']!r} does not "
                                "require gradients")
    order = _toposort([scalar])
    wanted = {id(w) for w in wrt}
    # needs[node]: a wrt node is reachable at or below, without crossing
    # a detach barrier
    needs = {}
    for node in order:
        hit = id(node) in wanted
        if node.op in ("leaf", "const"):
            needs[id(node)] = hit
        elif node.detached:
            needs[id(node)] = hit
        else:
            needs[id(node)] = hit or any(needs[id(a)] for a in node.args)

    adjoints = {id(scalar): [const(1.0)]}
    grads = {}
    for node in reversed(order):
        contribs = adjoints.pop(id(node), None)
        if contribs is None or not needs[id(node)]:
            continue
        adj = _sum_exprs(contribs)
        if id(node) in wanted:
            grads[id(node)] = adj
        if node.op in ("leaf", "const") or node.detached:
            continue
        for arg, contrib in _vjp(node, adj):
            if needs[id(arg)]:
                adjoints.setdefault(id(arg), []).append(contrib)
    return {w: grads.get(id(w), const(np.zeros(w.shape))) for w in wrt}


# ---------------------------------------------------------------------------
# Numerical verification
# ---------------------------------------------------------------------------

def numerical_gradient_check(scalar, wrt_leaf, bindings, step_size=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Error per component is |analytic - numeric| / (|analytic| + 1e-12).
    The expression must be smooth at the binding point; use softplus
    networks rather than relu when checking.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    g_expr = gradient(scalar, [wrt_leaf])[wrt_leaf]
    analytic = forward(g_expr, bindings)
    base = np.array(bindings[wrt_leaf], dtype=np.float64)
    numeric = np.zeros_like(base)
    probe = dict(bindings)
    for i in range(base.size):
        bumped = base.copy()
        bumped.flat[i] += step_size
        probe[wrt_leaf] = bumped
        hi = forward(scalar, probe)
        bumped = base.copy()
        bumped.flat[i] -= step_size
        probe[wrt_leaf] = bumped
        lo = forward(scalar, probe)
        numeric.flat[i] = (hi - lo) / (2.0 * step_size)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    return float(np.max(err)) if err.size else 0.0
