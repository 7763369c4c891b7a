"""Reverse-mode tensor engine and the variational training step.

The graph is a flat record of operations in execution order, so walking it
backwards is already a reverse topological sweep. Sampled weight matrices
enter the graph as leaves: the tape produces dLoss/dW, and the posterior
machinery (grouped radial-directional or mean-field Gaussian) maps that
cotangent onto its own raw parameters outside the tape.

Everything runs in double precision; these are desk-scale networks and the
uniform precision keeps gradient checks free of dtype noise.
"""

import math

import numpy as np

from .dists import (
    GammaParams,
    kl_gamma_gamma,
    kl_gamma_gamma_grad,
    kl_gauss_gauss_diag,
    kl_gauss_gauss_diag_grad,
)
from .rdp import RdpLayer, layer_kl, layer_kl_grads, sample_weights, \
    weight_backward
from .specfun import digamma, trigamma

__all__ = [
    "Var", "Graph", "backward",
    "add", "sub", "mul", "square", "relu", "reshape", "mean", "total",
    "dense", "conv2d", "maxpool2",
    "softmax_cross_entropy", "gaussian_expected_nll",
    "AdamState", "adam_step",
    "GaussianLayer", "Stage", "Model", "elbo_step", "predict",
    "finite_difference",
]

_LOG_2PI = math.log(2.0 * math.pi)


class Var:
    """Graph node: a float64 array plus the adjoint plumbing."""

    __slots__ = ("value", "grad", "graph", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.graph = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Execution record; creation order doubles as topological order."""

    def __init__(self):
        self._order = []
        self._swept = False

    def leaf(self, value):
        return self._track(Var(value))

    def _track(self, var):
        var.graph = self
        self._order.append(var)
        return var


def _accum(var, g):
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


def backward(loss):
    """Propagate d(loss)/d(node) into every .grad of the loss's graph."""
    if not isinstance(loss, Var) or loss.graph is None:
        raise ValueError("backward needs a Var produced by a forward pass")
    if loss.value.ndim != 0:
        raise ValueError("backward needs a scalar loss")
    graph = loss.graph
    if graph._swept:
        raise RuntimeError("backward already ran for this graph")
    graph._swept = True
    loss.grad = np.ones(())
    for var in reversed(graph._order):
        if var._vjp is not None and var.grad is not None:
            var._vjp(var.grad)


def _lift(x, graph):
    return x if isinstance(x, Var) else graph.leaf(x)


def _unbroadcast(g, shape):
    # collapse numpy broadcasting: sum away leading axes, then size-1 axes
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    g = a.graph if isinstance(a, Var) else b.graph
    a = _lift(a, g)
    b = _lift(b, g)
    out = a.value + b.value

    def vjp(gy):
        _accum(a, _unbroadcast(gy, a.value.shape))
        _accum(b, _unbroadcast(gy, b.value.shape))

    return g._track(Var(out, (a, b), vjp))


def sub(a, b):
    g = a.graph if isinstance(a, Var) else b.graph
    a = _lift(a, g)
    b = _lift(b, g)
    out = a.value - b.value

    def vjp(gy):
        _accum(a, _unbroadcast(gy, a.value.shape))
        _accum(b, _unbroadcast(-gy, b.value.shape))

    return g._track(Var(out, (a, b), vjp))


def mul(a, b):
    g = a.graph if isinstance(a, Var) else b.graph
    a = _lift(a, g)
    b = _lift(b, g)
    out = a.value * b.value

    def vjp(gy):
        _accum(a, _unbroadcast(gy * b.value, a.value.shape))
        _accum(b, _unbroadcast(gy * a.value, b.value.shape))

    return g._track(Var(out, (a, b), vjp))


def square(x):
    out = x.value * x.value

    def vjp(gy):
        _accum(x, 2.0 * gy * x.value)

    return x.graph._track(Var(out, (x,), vjp))


def relu(x):
    out = np.maximum(x.value, 0.0)

    def vjp(gy):
        _accum(x, gy * (x.value > 0.0))

    return x.graph._track(Var(out, (x,), vjp))


def reshape(x, shape):
    shape = tuple(int(n) for n in shape)
    out = x.value.reshape(shape)

    def vjp(gy):
        _accum(x, gy.reshape(x.value.shape))

    return x.graph._track(Var(out, (x,), vjp))


def mean(x):
    out = x.value.mean()
    n = float(x.value.size)

    def vjp(gy):
        _accum(x, np.full(x.value.shape, float(gy) / n))

    return x.graph._track(Var(out, (x,), vjp))


def total(x):
    out = x.value.sum()

    def vjp(gy):
        _accum(x, np.full(x.value.shape, float(gy)))

    return x.graph._track(Var(out, (x,), vjp))


def dense(x, weights, bias):
    """Affine y = x W^T + b over row-major batches (or a single vector)."""
    g = x.graph
    w = _lift(weights, g)
    b = _lift(bias, g)
    single = x.value.ndim == 1
    xv = x.value[None] if single else x.value
    if xv.ndim != 2 or w.value.ndim != 2 or xv.shape[1] != w.value.shape[1]:
        raise ValueError("dense needs x (batch, n_in) and weights (n_out, n_in)")
    if b.value.shape != (w.value.shape[0],):
        raise ValueError("bias must have one entry per output")
    out = xv @ w.value.T + b.value
    if single:
        out = out[0]

    def vjp(gy):
        gy2 = gy[None] if single else gy
        gx = gy2 @ w.value
        _accum(x, gx[0] if single else gx)
        _accum(w, gy2.T @ xv)
        _accum(b, gy2.sum(axis=0))

    return g._track(Var(out, (x, w, b), vjp))


def conv2d(x, filters, bias, padding=(0, 0)):
    """Stride-1 correlation of (B, C, H, W) inputs with (F, C, kh, kw)
    filters.

    padding counts the total zeros added along each spatial axis (split as
    evenly as integer division allows), so the output height is
    H + ph - kh + 1 and likewise for the width.
    """
    g = x.graph
    w = _lift(filters, g)
    b = _lift(bias, g)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(
            "conv2d needs x (B, C, H, W) and filters (F, C, kh, kw)")
    ph, pw = int(padding[0]), int(padding[1])
    if ph < 0 or pw < 0:
        raise ValueError("padding must be nonnegative")
    nb, nc, h, wd = xv.shape
    nf, _, kh, kw = wv.shape
    oh = h + ph - kh + 1
    ow = wd + pw - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than the padded input")
    if b.value.shape != (nf,):
        raise ValueError("bias must have one entry per filter")

    top, left = ph // 2, pw // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (top, ph - top), (left, pw - left)))
    cols = np.empty((nb, nc, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
    cols2 = cols.reshape(nb, nc * kh * kw, oh * ow)
    w2 = wv.reshape(nf, nc * kh * kw)
    out = (w2 @ cols2).reshape(nb, nf, oh, ow) + b.value[None, :, None, None]

    def vjp(gy):
        gy2 = gy.reshape(nb, nf, oh * ow)
        _accum(b, gy.sum(axis=(0, 2, 3)))
        gw2 = np.einsum("bfp,bkp->fk", gy2, cols2)
        _accum(w, gw2.reshape(wv.shape))
        gcols = (w2.T @ gy2).reshape(nb, nc, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
        _accum(x, gxp[:, :, top:top + h, left:left + wd])

    return g._track(Var(out, (x, w, b), vjp))


def maxpool2(x):
    """2x2 max pooling with stride 2; spatial dimensions must be even.

    Ties resolve to the first flat index, so the backward scatter is
    deterministic.
    """
    xv = x.value
    if xv.ndim != 4:
        raise ValueError("maxpool2 needs (B, C, H, W)")
    nb, nc, h, w = xv.shape
    if h % 2 or w % 2:
        raise ValueError("spatial dimensions must be even")
    h2, w2 = h // 2, w // 2
    win = xv.reshape(nb, nc, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(nb, nc, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(gy):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        gx = gwin.reshape(nb, nc, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                 .reshape(xv.shape)
        _accum(x, gx)

    return x.graph._track(Var(out, (x,), vjp))


def softmax_cross_entropy(logits, labels):
    """Per-example cross-entropy, stabilized by max subtraction.

    labels are integer class ids; batched logits give a vector of losses,
    a single logit row gives a scalar.
    """
    single = logits.value.ndim == 1
    z = logits.value[None] if single else logits.value
    if z.ndim != 2:
        raise ValueError("logits must be 1-d or 2-d")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != z.shape[0]:
        raise ValueError("one label per logit row required")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ValueError("label out of range")
    rows = np.arange(lab.size)
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    losses = lse - zs[rows, lab]
    out = losses[0] if single else losses

    def vjp(gy):
        p = np.exp(zs - lse[:, None])
        p[rows, lab] -= 1.0
        gl = p * np.reshape(gy, (-1, 1))
        _accum(logits, gl[0] if single else gl)

    return logits.graph._track(Var(out, (logits,), vjp))


def gaussian_expected_nll(y, f, precision):
    """Expected negative Gaussian log-density under a Gamma posterior on
    the precision:

        -(E[log tau] - log 2 pi) / 2 + E[tau] (y - f)^2 / 2

    with E[log tau] = digamma(a1) - log b1 and E[tau] = a1/b1. precision
    is either GammaParams (fixed) or a Var holding (log a1, log b1), which
    then receives gradients; a plain-array f short-circuits to a plain
    result.
    """
    raw = None
    if isinstance(precision, Var):
        raw = precision
        if raw.value.shape != (2,):
            raise ValueError("precision Var must hold (log a1, log b1)")
        a1 = math.exp(float(raw.value[0]))
        b1 = math.exp(float(raw.value[1]))
    else:
        a1 = float(precision.alpha)
        b1 = float(precision.beta)
    if not (math.isfinite(a1) and math.isfinite(b1) and a1 > 0.0 and b1 > 0.0):
        raise ValueError("precision posterior parameters must be positive")
    const = -0.5 * (float(digamma(a1)) - math.log(b1) - _LOG_2PI)
    ratio = a1 / b1

    if not isinstance(f, Var):
        r = np.asarray(y, dtype=np.float64) - np.asarray(f, dtype=np.float64)
        out = const + 0.5 * ratio * r * r
        return float(out) if np.ndim(out) == 0 else out

    yv = np.asarray(y, dtype=np.float64)
    if yv.shape != f.value.shape:
        raise ValueError("y and f must have matching shapes")
    r = yv - f.value
    out = const + 0.5 * ratio * r * r

    def vjp(gy):
        _accum(f, gy * ratio * (f.value - yv))
        if raw is not None:
            s = float(np.sum(gy))
            sr2 = float(np.sum(gy * r * r))
            da = -0.5 * float(trigamma(a1)) * s + 0.5 * sr2 / b1
            db = 0.5 * s / b1 - 0.5 * a1 * sr2 / (b1 * b1)
            _accum(raw, np.array([a1 * da, b1 * db]))

    parents = (f,) if raw is None else (f, raw)
    return f.graph._track(Var(out, parents, vjp))


def finite_difference(fun, x, h=1e-6):
    """Central-difference gradient of a scalar function of one array.

    Mutates and restores x entry by entry; the workhorse behind the
    gradient checks.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    if x.ndim == 0:
        raise ValueError("finite_difference needs an array argument")
    for ij in np.ndindex(x.shape):
        old = x[ij]
        x[ij] = old + h
        up = float(fun(x))
        x[ij] = old - h
        dn = float(fun(x))
        x[ij] = old
        out[ij] = (up - dn) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected Adam accumulators keyed like the parameter dict."""

    def __init__(self, params, step_size=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.step = 0
        self.step_size = float(step_size)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state):
    """One in-place Adam update; returns params for chaining."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        gr = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * gr * gr
        p -= state.step_size * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# model assembly


class GaussianLayer:
    """Fully factorized Gaussian weight matrix with a zero-mean isotropic
    prior; the regression protocol uses this for its output stage."""

    def __init__(self, mean, log_sigma2, prior_var=1.0):
        self.mean = np.array(mean, dtype=np.float64)
        self.log_sigma2 = np.array(log_sigma2, dtype=np.float64)
        if self.mean.ndim != 2 or self.mean.shape != self.log_sigma2.shape:
            raise ValueError("mean and log_sigma2 must be matching 2-d arrays")
        self.prior_var = float(prior_var)
        if not (math.isfinite(self.prior_var) and self.prior_var > 0.0):
            raise ValueError("prior_var must be positive and finite")
        self.n_out, self.n_in = self.mean.shape
        self.kernel = None

    @classmethod
    def initialize(cls, n_out, n_in, rng, prior_var=1.0):
        mean = rng.normal(size=(n_out, n_in)) * math.sqrt(2.0 / n_in)
        log_sigma2 = np.full((n_out, n_in), math.log(0.01))
        return cls(mean, log_sigma2, prior_var)

    def parameters(self):
        return {"mean": self.mean, "log_sigma2": self.log_sigma2}

    def sample(self, rng):
        z = rng.normal(size=self.mean.shape)
        return self.mean + np.exp(0.5 * self.log_sigma2) * z, z

    def backward(self, z, grad_weights):
        sigma = np.exp(0.5 * self.log_sigma2)
        return {"mean": grad_weights.copy(),
                "log_sigma2": 0.5 * grad_weights * sigma * z}

    def kl(self):
        return kl_gauss_gauss_diag(self.mean, np.exp(self.log_sigma2),
                                   0.0, self.prior_var)

    def kl_grads(self):
        s2 = np.exp(self.log_sigma2)
        dmean, dvar = kl_gauss_gauss_diag_grad(self.mean, s2,
                                               0.0, self.prior_var)
        return {"mean": dmean, "log_sigma2": dvar * s2}

    def state(self):
        return {"mean": self.mean.copy(),
                "log_sigma2": self.log_sigma2.copy(),
                "prior_var": self.prior_var}

    @classmethod
    def from_state(cls, s):
        return cls(s["mean"], s["log_sigma2"], s["prior_var"])


class Stage:
    """One affine stage: a weight posterior, a point-estimate bias, and
    the wiring around it.

    kind is "dense" or "conv"; conv stages take their 4-d filter shape
    from the weight layer's kernel, read as (kh, kw), and may be followed
    by 2x2 max pooling. Biases are plain parameters, not variational.
    """

    def __init__(self, kind, weights, bias, activation="relu", pool=False,
                 padding=(0, 0)):
        if kind not in ("dense", "conv"):
            raise ValueError("kind must be 'dense' or 'conv'")
        if kind == "conv" and getattr(weights, "kernel", None) is None:
            raise ValueError("conv stages need a weight layer with a kernel")
        if activation not in (None, "relu"):
            raise ValueError("activation must be None or 'relu'")
        if pool and kind != "conv":
            raise ValueError("pooling only follows conv stages")
        self.kind = kind
        self.weights = weights
        self.bias = np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (weights.n_out,):
            raise ValueError("bias must have one entry per output unit")
        self.activation = activation
        self.pool = bool(pool)
        self.padding = (int(padding[0]), int(padding[1]))


class Model:
    """Sequential stack of stages, optionally with a learned Gamma
    posterior over the Gaussian likelihood precision (regression)."""

    def __init__(self, stages, precision_raw=None,
                 precision_prior=GammaParams(6.0, 6.0)):
        self.stages = list(stages)
        if not self.stages:
            raise ValueError("model needs at least one stage")
        self.precision_raw = None
        if precision_raw is not None:
            self.precision_raw = np.array(precision_raw,
                                          dtype=np.float64).reshape(2)
        self.precision_prior = precision_prior

    def parameters(self):
        """Live raw-parameter arrays, keyed s{i}.{name}; optimizer updates
        mutate the model in place through these."""
        params = {}
        for i, st in enumerate(self.stages):
            for name, arr in st.weights.parameters().items():
                params[f"s{i}.{name}"] = arr
            params[f"s{i}.bias"] = st.bias
        if self.precision_raw is not None:
            params["precision_raw"] = self.precision_raw
        return params

    def precision(self):
        if self.precision_raw is None:
            return None
        return GammaParams(math.exp(float(self.precision_raw[0])),
                           math.exp(float(self.precision_raw[1])))

    def kl(self):
        out = 0.0
        for st in self.stages:
            if isinstance(st.weights, RdpLayer):
                out += layer_kl(st.weights)
            else:
                out += st.weights.kl()
        if self.precision_raw is not None:
            out += kl_gamma_gamma(self.precision(), self.precision_prior)
        return out

    def kl_grads(self):
        grads = {}
        for i, st in enumerate(self.stages):
            if isinstance(st.weights, RdpLayer):
                part = layer_kl_grads(st.weights)
            else:
                part = st.weights.kl_grads()
            for name, arr in part.items():
                grads[f"s{i}.{name}"] = arr
        if self.precision_raw is not None:
            q = self.precision()
            da, db = kl_gamma_gamma_grad(q, self.precision_prior)
            grads["precision_raw"] = np.array([q.alpha * da, q.beta * db])
        return grads

    def state(self):
        stages = []
        for st in self.stages:
            family = "rdp" if isinstance(st.weights, RdpLayer) else "gauss"
            stages.append({
                "kind": st.kind,
                "family": family,
                "weights": st.weights.state(),
                "bias": st.bias.copy(),
                "activation": st.activation,
                "pool": st.pool,
                "padding": list(st.padding),
            })
        return {
            "stages": stages,
            "precision_raw": None if self.precision_raw is None
            else self.precision_raw.copy(),
            "precision_prior": [self.precision_prior.alpha,
                                self.precision_prior.beta],
        }

    @classmethod
    def from_state(cls, s):
        stages = []
        for ss in s["stages"]:
            if ss["family"] == "rdp":
                weights = RdpLayer.from_state(ss["weights"])
            else:
                weights = GaussianLayer.from_state(ss["weights"])
            stages.append(Stage(ss["kind"], weights, ss["bias"],
                                activation=ss["activation"], pool=ss["pool"],
                                padding=tuple(ss["padding"])))
        prior = GammaParams(*s["precision_prior"])
        return cls(stages, precision_raw=s["precision_raw"],
                   precision_prior=prior)


def _sample_model_weights(model, rng):
    mats, traces = [], []
    for st in model.stages:
        if isinstance(st.weights, RdpLayer):
            w, tr = sample_weights(st.weights, rng)
        else:
            w, tr = st.weights.sample(rng)
        mats.append(w)
        traces.append(tr)
    return mats, traces


def _wire(model, graph, x, mats):
    cur = graph.leaf(x)
    wvars, bvars = [], []
    for st, w in zip(model.stages, mats):
        wv = graph.leaf(w)
        bv = graph.leaf(st.bias)
        wvars.append(wv)
        bvars.append(bv)
        if st.kind == "conv":
            kh, kw = st.weights.kernel
            filters = reshape(wv, (st.weights.n_out, st.weights.n_in, kh, kw))
            cur = conv2d(cur, filters, bv, st.padding)
        else:
            if cur.value.ndim == 4:
                flat = int(np.prod(cur.value.shape[1:]))
                cur = reshape(cur, (cur.value.shape[0], flat))
            cur = dense(cur, wv, bv)
        if st.activation == "relu":
            cur = relu(cur)
        if st.pool:
            cur = maxpool2(cur)
    return cur, wvars, bvars


def predict(model, x, rng):
    """Network output under one posterior weight draw; no gradients."""
    x = np.asarray(x, dtype=np.float64)
    mats, _ = _sample_model_weights(model, rng)
    out, _, _ = _wire(model, Graph(), x, mats)
    return out.value


def elbo_step(model, batch, dataset_size, rng, kl_weight=None):
    """Single-sample negative-ELBO evaluation with full gradients.

    batch is (inputs, targets); the loss is the batch mean expected NLL
    plus kl_weight times the total KL, with kl_weight defaulting to
    1/dataset_size so one epoch of disjoint minibatches applies the full
    KL once. Integer targets select the cross-entropy likelihood, real
    targets the Gaussian one (which requires the model's precision
    posterior). Returns (loss, gradients keyed like model.parameters()).

    Gradients of the directional concentrations combine the pathwise term
    with the sampler's acceptance correction, weighted by the NLL value;
    the correction is applied per directional factor.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if kl_weight is None:
        kl_weight = 1.0 / float(dataset_size)
    kl_weight = float(kl_weight)

    graph = Graph()
    mats, traces = _sample_model_weights(model, rng)
    out, wvars, bvars = _wire(model, graph, x, mats)

    if model.precision_raw is None:
        nll = mean(softmax_cross_entropy(out, y))
    else:
        f = out
        if f.value.ndim == 2 and f.value.shape[1] == 1:
            f = reshape(f, (f.value.shape[0],))
        pvar = graph.leaf(model.precision_raw)
        nll = mean(gaussian_expected_nll(
            np.asarray(y, dtype=np.float64), f, pvar))
    backward(nll)
    nll_value = float(nll.value)

    grads = {}
    for i, st in enumerate(model.stages):
        gw = wvars[i].grad
        if gw is None:
            gw = np.zeros_like(mats[i])
        if isinstance(st.weights, RdpLayer):
            part = weight_backward(st.weights, traces[i], gw,
                                   loglik=nll_value)
        else:
            part = st.weights.backward(traces[i], gw)
        for name, arr in part.items():
            grads[f"s{i}.{name}"] = arr
        gb = bvars[i].grad
        grads[f"s{i}.bias"] = np.zeros_like(st.bias) if gb is None else gb
    if model.precision_raw is not None:
        gp = pvar.grad
        grads["precision_raw"] = np.zeros(2) if gp is None else gp

    loss = nll_value
    if kl_weight != 0.0:
        loss += kl_weight * model.kl()
        for name, gk in model.kl_grads().items():
            grads[name] = grads[name] + kl_weight * gk

    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    for name, gr in grads.items():
        if not np.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    return loss, grads
