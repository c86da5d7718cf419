"""Feed-forward classifier specs, parameter stores, and the two losses.

Models are described declaratively (``ModelSpec``) and applied either as
autodiff expressions (for training and exact gradients) or through a
vectorized numpy path (for attacks, sampling, and grid oracles).  The
two paths are cross-checked in the test suite.

Losses: cross-entropy for training, the margin loss
``max_{i != c} f_i(x) - f_c(x)`` for attacks and certification.  The
margin is negative exactly when the model strictly prefers the true
class; a tie counts as misclassified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Expr


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Conv2d:
    channels: int
    kernel: int = 3
    padding: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Softplus:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


_LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": Relu,
                "softplus": Softplus, "flatten": Flatten}


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus input shape and class count.

    Consecutive layer shapes must compose and the final layer must emit
    ``n_classes`` logits; both are checked at construction.
    """

    layers: tuple
    input_shape: tuple
    n_classes: int

    def __post_init__(self):
        out = self.output_shape()
        if out != (self.n_classes,):
            raise ValueError(f"spec emits shape {out}, expected ({self.n_classes},)")

    def output_shape(self):
        shape = tuple(self.input_shape)
        for lay in self.layers:
            shape = _layer_out_shape(lay, shape)
        return shape

    def to_dict(self):
        out = []
        for lay in self.layers:
            kind = next(k for k, cls in _LAYER_KINDS.items() if isinstance(lay, cls))
            d = {"kind": kind}
            d.update(vars(lay))
            out.append(d)
        return {"layers": out, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes}

    @staticmethod
    def from_dict(d):
        layers = []
        for item in d["layers"]:
            item = dict(item)
            cls = _LAYER_KINDS[item.pop("kind")]
            layers.append(cls(**item))
        return ModelSpec(tuple(layers), tuple(d["input_shape"]), int(d["n_classes"]))


def _layer_out_shape(lay, shape):
    if isinstance(lay, Dense):
        if len(shape) != 1:
            raise ValueError(f"dense layer needs rank-1 input, got {shape}")
        return (lay.units,)
    if isinstance(lay, Conv2d):
        if len(shape) != 3:
            raise ValueError(f"conv2d layer needs (C,H,W) input, got {shape}")
        c, h, w = shape
        ho = h + 2 * lay.padding - lay.kernel + 1
        wo = w + 2 * lay.padding - lay.kernel + 1
        if ho < 1 or wo < 1:
            raise ValueError("conv2d output collapses to zero extent")
        return (lay.channels, ho, wo)
    if isinstance(lay, Flatten):
        return (int(np.prod(shape, dtype=np.int64)),)
    return shape


def mlp(input_dim, hidden, n_classes, activation="relu"):
    """An MLP spec: dense/activation stacks ending in an n_classes head."""
    act = {"relu": Relu, "softplus": Softplus}[activation]
    layers = []
    for width in hidden:
        layers += [Dense(width), act()]
    layers.append(Dense(n_classes))
    return ModelSpec(tuple(layers), (int(input_dim),), int(n_classes))


def small_cnn(input_shape, channels, hidden, n_classes, kernel=3,
              activation="relu"):
    """A one-conv-block CNN spec for desk-scale image data."""
    act = {"relu": Relu, "softplus": Softplus}[activation]
    layers = [Conv2d(channels, kernel, kernel // 2), act(), Flatten()]
    for width in hidden:
        layers += [Dense(width), act()]
    layers.append(Dense(n_classes))
    return ModelSpec(tuple(layers), tuple(input_shape), int(n_classes))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def param_layout(spec):
    """(name, offset, shape) for each parameter block, in layer order."""
    layout = []
    offset = 0
    shape = tuple(spec.input_shape)
    for i, lay in enumerate(spec.layers):
        if isinstance(lay, Dense):
            w_shape = (shape[0], lay.units)
            layout.append((f"dense{i}.w", offset, w_shape))
            offset += shape[0] * lay.units
            layout.append((f"dense{i}.b", offset, (lay.units,)))
            offset += lay.units
        elif isinstance(lay, Conv2d):
            cin = shape[0]
            w_shape = (lay.channels, cin * lay.kernel * lay.kernel)
            layout.append((f"conv{i}.w", offset, w_shape))
            offset += w_shape[0] * w_shape[1]
            layout.append((f"conv{i}.b", offset, (lay.channels,)))
            offset += lay.channels
        shape = _layer_out_shape(lay, shape)
    return layout, offset


class Parameters:
    """Flat float64 store with named per-layer views (views share memory)."""

    def __init__(self, spec, flat=None):
        self.layout, self.size = param_layout(spec)
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"parameter store needs {self.size} entries, "
                             f"got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters contain non-finite entries")
        self.flat = flat

    def view(self, name):
        for n, off, shape in self.layout:
            if n == name:
                return self.flat[off:off + int(np.prod(shape, dtype=np.int64))].reshape(shape)
        raise KeyError(name)

    def views(self):
        return {n: self.flat[off:off + int(np.prod(s, dtype=np.int64))].reshape(s)
                for n, off, s in self.layout}

    def copy(self):
        p = Parameters.__new__(Parameters)
        p.layout, p.size = self.layout, self.size
        p.flat = self.flat.copy()
        return p


def init_params(spec, rng):
    """He-style init: gaussians scaled by fan-in, zero biases."""
    layout, size = param_layout(spec)
    flat = np.zeros(size)
    params = Parameters(spec, flat)
    for name, off, shape in layout:
        if name.endswith(".w"):
            fan_in = shape[0] if len(shape) == 2 and "dense" in name else shape[1]
            block = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            params.flat[off:off + block.size] = block.ravel()
    return params


# ---------------------------------------------------------------------------
# Expression path
# ---------------------------------------------------------------------------

class ModelGraph:
    """Differentiable view of a spec: one leaf per parameter block plus inputs.

    Build loss expressions against the shared parameter leaves, then bind
    concrete parameter values with :meth:`bind`.
    """

    def __init__(self, spec):
        self.spec = spec
        self.layout, self.size = param_layout(spec)
        self.param_leaves = {name: ad.leaf(name, shape)
                             for name, _, shape in self.layout}

    def input_leaf(self, name="x"):
        return ad.leaf(name, self.spec.input_shape)

    def logits(self, x):
        """Apply the model to an input expression or constant tensor."""
        if not isinstance(x, Expr):
            x = ad.const(np.asarray(x, dtype=np.float64))
        h = x
        for i, lay in enumerate(self.spec.layers):
            if isinstance(lay, Dense):
                w = self.param_leaves[f"dense{i}.w"]
                b = self.param_leaves[f"dense{i}.b"]
                h = ad.matmul(h, w) + b
            elif isinstance(lay, Conv2d):
                w = self.param_leaves[f"conv{i}.w"]
                b = self.param_leaves[f"conv{i}.b"]
                h = ad.conv2d(h, w, b, lay.kernel, lay.kernel, lay.padding)
            elif isinstance(lay, Relu):
                h = ad.relu(h)
            elif isinstance(lay, Softplus):
                h = ad.softplus(h)
            elif isinstance(lay, Flatten):
                h = ad.reshape(h, (int(np.prod(h.shape, dtype=np.int64)),))
        return h

    def loss(self, x, label_or_onehot, kind):
        logits = self.logits(x)
        if isinstance(label_or_onehot, Expr):
            if kind == "ce":
                return cross_entropy_onehot_expr(logits, label_or_onehot)
            return cw_margin_onehot_expr(logits, label_or_onehot)
        if kind == "ce":
            return cross_entropy_expr(logits, int(label_or_onehot))
        return cw_margin_expr(logits, int(label_or_onehot))

    def bind(self, params, extra=None):
        views = {name: params.flat[off:off + int(np.prod(s, dtype=np.int64))].reshape(s)
                 for name, off, s in self.layout}
        bindings = {self.param_leaves[n]: v for n, v in views.items()}
        if extra:
            bindings.update(extra)
        return bindings


def model_apply(spec, params, x):
    """Raw logits of a single input (no softmax); numeric fast path."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(spec.input_shape):
        raise ValueError(f"input shape {x.shape}, spec wants {spec.input_shape}")
    return forward_batch(spec, params, x[None])[0]


def model_apply_expr(graph, x_expr):
    """Logits as an expression; use when differentiability is requested."""
    return graph.logits(x_expr)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, label):
    """logsumexp(logits) - logits[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    m = np.max(logits, axis=-1)
    lse = m + np.log(np.sum(np.exp(logits - m[..., None]), axis=-1))
    return lse - logits[..., label]


def cross_entropy_expr(logits, label):
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range")
    picked = ad.reshape(ad.gather(logits, (label,)), ())
    return ad.logsumexp(logits) - picked


def cross_entropy_onehot_expr(logits, onehot):
    """Cross-entropy with the label supplied as a bound one-hot leaf."""
    return ad.logsumexp(logits) - ad.matmul(logits, onehot)


def cw_margin(logits, label):
    """max over i != label of logits[i] - logits[label]; >= 0 means error."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("margin loss needs at least 2 classes")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    others = np.delete(logits, label, axis=-1)
    return np.max(others, axis=-1) - logits[..., label]


def cw_margin_expr(logits, label):
    k = logits.shape[0]
    if k < 2:
        raise ValueError("margin loss needs at least 2 classes")
    others = ad.gather(logits, tuple(i for i in range(k) if i != label))
    picked = ad.reshape(ad.gather(logits, (label,)), ())
    return ad.reduce_max(others) - picked


# Large constant masking the true class out of a max; desk-scale logits
# stay orders of magnitude below it.
_MARGIN_MASK = 1e9


def cw_margin_onehot_expr(logits, onehot):
    """Margin loss with the label as a bound one-hot leaf (graph reuse)."""
    masked = logits + ad.scale(onehot, -_MARGIN_MASK)
    return ad.reduce_max(masked) - ad.matmul(logits, onehot)


def predict(logits):
    """Argmax; ties break toward the lowest index."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("empty logits")
    return int(np.argmax(logits, axis=-1)) if logits.ndim == 1 else np.argmax(logits, axis=-1)


def onehot(label, k):
    v = np.zeros(k)
    v[label] = 1.0
    return v


# ---------------------------------------------------------------------------
# Vectorized numeric path
# ---------------------------------------------------------------------------

def _unfold_batch(x, kh, kw):
    # x: (B, C, H, W) -> (B, P, C*kh*kw), rows in row-major spatial order
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, c * kh * kw), ho, wo


def _fold_batch(cols, c, h, w, kh, kw):
    # cols: (B, P, C*kh*kw) -> (B, C, H, W), adding overlaps
    b = cols.shape[0]
    ho, wo = h - kh + 1, w - kw + 1
    patches = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, h, w))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def forward_batch(spec, params, x, save_trace=False):
    """Vectorized forward pass; x is a batch (B, *input_shape).

    With ``save_trace`` also returns the per-layer activations needed by
    :func:`backward_batch`.
    """
    x = np.asarray(x, dtype=np.float64)
    views = params.views()
    h = x
    trace = []
    for i, lay in enumerate(spec.layers):
        if save_trace:
            trace.append(h)
        if isinstance(lay, Dense):
            h = h @ views[f"dense{i}.w"] + views[f"dense{i}.b"]
        elif isinstance(lay, Conv2d):
            w = views[f"conv{i}.w"]
            b, c, hh, ww = h.shape
            hp = np.pad(h, ((0, 0), (0, 0), (lay.padding,) * 2, (lay.padding,) * 2))
            cols, ho, wo = _unfold_batch(hp, lay.kernel, lay.kernel)
            out = cols @ w.T + views[f"conv{i}.b"]
            h = out.transpose(0, 2, 1).reshape(b, lay.channels, ho, wo)
        elif isinstance(lay, Relu):
            h = np.maximum(h, 0.0)
        elif isinstance(lay, Softplus):
            h = np.maximum(h, 0.0) + np.log1p(np.exp(-np.abs(h)))
        elif isinstance(lay, Flatten):
            h = h.reshape(h.shape[0], -1)
    if save_trace:
        return h, trace
    return h


def backward_batch(spec, params, trace, dlogits):
    """Input gradients for a batch given logit adjoints; mirrors forward."""
    views = params.views()
    g = dlogits
    for i in reversed(range(len(spec.layers))):
        lay = spec.layers[i]
        h_in = trace[i]
        if isinstance(lay, Dense):
            g = g @ views[f"dense{i}.w"].T
        elif isinstance(lay, Conv2d):
            w = views[f"conv{i}.w"]
            b, c, hh, ww = h_in.shape
            hp_h = hh + 2 * lay.padding
            hp_w = ww + 2 * lay.padding
            ho = hp_h - lay.kernel + 1
            wo = hp_w - lay.kernel + 1
            gout = g.reshape(b, lay.channels, ho * wo).transpose(0, 2, 1)
            gcols = gout @ w
            gp = _fold_batch(gcols, c, hp_h, hp_w, lay.kernel, lay.kernel)
            p = lay.padding
            g = gp[:, :, p:hp_h - p, p:hp_w - p] if p else gp
        elif isinstance(lay, Relu):
            g = g * (h_in > 0)
        elif isinstance(lay, Softplus):
            out = np.empty_like(h_in)
            pos = h_in >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-h_in[pos]))
            e = np.exp(h_in[~pos])
            out[~pos] = e / (1.0 + e)
            g = g * out
        elif isinstance(lay, Flatten):
            g = g.reshape(h_in.shape)
    return g


def loss_and_input_grad_batch(spec, params, x, y, kind):
    """Per-example loss values and input gradients, fully vectorized.

    ``y`` is an integer label array of length B.  Returns (loss, grad)
    with grad shaped like ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    logits, trace = forward_batch(spec, params, x, save_trace=True)
    b, k = logits.shape
    rows = np.arange(b)
    if kind == "ce":
        m = np.max(logits, axis=1)
        e = np.exp(logits - m[:, None])
        z = np.sum(e, axis=1)
        loss = m + np.log(z) - logits[rows, y]
        dlogits = e / z[:, None]
        dlogits[rows, y] -= 1.0
    elif kind == "margin":
        masked = logits.copy()
        masked[rows, y] = -np.inf
        top = np.argmax(masked, axis=1)
        loss = logits[rows, top] - logits[rows, y]
        dlogits = np.zeros_like(logits)
        dlogits[rows, top] = 1.0
        dlogits[rows, y] -= 1.0
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    grad = backward_batch(spec, params, trace, dlogits)
    return loss, grad


class CompiledModel:
    """A (spec, params) pair with batched forward/gradient entry points.

    This is the duck-typed interface the attack and certification code
    consumes; anything exposing the same methods (e.g. a hand-built
    staircase model in tests) works equally.
    """

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self.n_classes = spec.n_classes
        self.input_shape = tuple(spec.input_shape)

    def logits(self, x):
        return forward_batch(self.spec, self.params, np.asarray(x)[None])[0]

    def logits_batch(self, x):
        return forward_batch(self.spec, self.params, x)

    def margin(self, x, y):
        return float(cw_margin(self.logits(x), y))

    def margin_batch(self, x, y):
        logits = self.logits_batch(x)
        y = np.asarray(y, dtype=np.intp)
        if y.ndim == 0:
            y = np.full(logits.shape[0], int(y), dtype=np.intp)
        rows = np.arange(logits.shape[0])
        masked = logits.copy()
        masked[rows, y] = -np.inf
        return np.max(masked, axis=1) - logits[rows, y]

    def margin_grad(self, x, y):
        _, g = loss_and_input_grad_batch(self.spec, self.params,
                                         np.asarray(x)[None], [y], "margin")
        return g[0]

    def loss_and_grad_batch(self, x, y, kind="margin"):
        return loss_and_input_grad_batch(self.spec, self.params, x, y, kind)

    def predict(self, x):
        return predict(self.logits(x))

    def predict_batch(self, x):
        return np.argmax(self.logits_batch(x), axis=1)


class QueryCounter:
    """Wraps a model, counting forward and gradient queries separately.

    Used to enforce that gradient-free attacks never touch gradients.
    """

    def __init__(self, model):
        self.model = model
        self.n_classes = model.n_classes
        self.input_shape = model.input_shape
        self.forward_queries = 0
        self.grad_queries = 0

    def logits(self, x):
        self.forward_queries += 1
        return self.model.logits(x)

    def logits_batch(self, x):
        self.forward_queries += len(x)
        return self.model.logits_batch(x)

    def margin(self, x, y):
        self.forward_queries += 1
        return self.model.margin(x, y)

    def margin_batch(self, x, y):
        self.forward_queries += len(x)
        return self.model.margin_batch(x, y)

    def margin_grad(self, x, y):
        self.grad_queries += 1
        return self.model.margin_grad(x, y)

    def predict(self, x):
        self.forward_queries += 1
        return self.model.predict(x)
