"""Grouped radial-and-directional weight posteriors.

A weight matrix is factorized per group (rows, columns, or both) into a
directional component on the unit sphere and a radial norm built from a
chain of log-normal factors:

    row_r = rho_r * x_r,   rho_r = (s_a s_b)^2 (alpha_r beta_r)^2,
    x_r ~ vMF(mu_r, kappa_q)

with kappa_q shared by every group in the layer. The radial factors carry
a half-Cauchy hierarchy through its Gamma times inverse-Gamma product
decomposition: per-group alpha_r against Gamma(1/2, 1) and beta_r against
InvGamma(1/2, 1), and one global pair per grouping direction, s_a against
Gamma(1/2, rate 1/gamma^2) and s_b against InvGamma(1/2, 1), where gamma
is the half-Cauchy scale. Pruning reads nothing but the per-group local
log-normal modes.

Raw parameter storage is optimizer-friendly: directions are kept as free
vectors normalized on read (their gradients projected onto the tangent
space), kappa_q through a softplus, and every log-variance through exp.
Sampling records the consumed noise so the backward pass can replay exact
pathwise gradients plus the density-reweighting correction for the
concentration.

Layer state is owned by a single optimizer step at a time; sampling and
KL evaluation only read parameters, so independent layers may be handled
concurrently as long as each uses its own RngStream.
"""

import enum
import math
from typing import NamedTuple, Optional

import numpy as np

from .dists import (
    GammaParams,
    HalfCauchyScale,
    InvGammaParams,
    LogNormalParams,
    VmfParams,
    VmfSampleTrace,
    _householder_rows,
    kl_lognormal_gamma,
    kl_lognormal_gamma_grad,
    kl_lognormal_invgamma,
    kl_lognormal_invgamma_grad,
    kl_vmf_grad_from_dots,
    kl_vmf_vmf_from_dots,
    vmf_grad_correction,
    vmf_sample_rows,
)
from .specfun import bessel_ratio, lgamma

# fixed priors of the local half-Cauchy decomposition (unit scale)
_LOCAL_ALPHA_PRIOR = GammaParams(0.5, 1.0)
_LOCAL_BETA_PRIOR = InvGammaParams(0.5, 1.0)
_GLOBAL_B_PRIOR = InvGammaParams(0.5, 1.0)

_INIT_LOG_SIGMA2 = math.log(0.01)  # sigma = 0.1 in log space at init


class GroupingScheme(enum.Enum):
    """How a layer's weights are partitioned into radial groups."""

    ROW = "row"
    COLUMN = "column"
    DOUBLE = "double"


class RadialGroupPosterior(NamedTuple):
    """The two local log-normal factors of one group's norm."""

    alpha: LogNormalParams
    beta: LogNormalParams


class LayerScalePosterior(NamedTuple):
    """The global log-normal pair shared by all groups of one direction."""

    s_a: LogNormalParams
    s_b: LogNormalParams


class RdpPrior(NamedTuple):
    """Per-layer prior: directional concentration and location per group,
    plus the half-Cauchy scale governing the global radial pair."""

    kappa_p: float
    mu_p: np.ndarray
    gamma: HalfCauchyScale


class PruneMask(NamedTuple):
    """Which outputs and inputs survive, with the thresholds that chose them.

    keep_rows has length n_out and keep_cols length n_in regardless of the
    grouping; thresholds are in log-mode units, -inf meaning keep-all.
    """

    keep_rows: np.ndarray
    keep_cols: np.ndarray
    threshold_row: float
    threshold_col: float


class PrunedLayer(NamedTuple):
    layer: "RdpLayer"
    rows: np.ndarray
    cols: np.ndarray


class WeightTrace(NamedTuple):
    """Noise record of one sample_weights call, consumed by weight_backward.

    x_dir holds the unit directional draws (one row per group in the
    grouping's own view); z_* hold the standard-normal draws behind each
    log-normal factor; rho_* the resulting squared radial products.
    """

    x_dir: np.ndarray
    omega: np.ndarray
    epsilon: np.ndarray
    tangent: np.ndarray
    rejections: np.ndarray
    z_row: Optional[np.ndarray]
    z_col: Optional[np.ndarray]
    z_scale_row: Optional[np.ndarray]
    z_scale_col: Optional[np.ndarray]
    rho_row: Optional[np.ndarray]
    rho_col: Optional[np.ndarray]

    def vmf_traces(self):
        """Per-group VmfSampleTrace list for the correction machinery."""
        return [
            VmfSampleTrace(float(w), float(e), int(r), t)
            for w, e, r, t in zip(
                self.omega, self.epsilon, self.rejections, self.tangent
            )
        ]


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))),
                   np.log1p(np.exp(np.minimum(x, 0.0))))
    return out


def _softplus_inv(y):
    y = float(y)
    if y <= 0.0:
        raise ValueError("softplus inverse needs a positive value")
    if y > 30.0:
        # e^-y underflows the correction well below double precision
        return y
    return y + math.log(-math.expm1(-y))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))  # never overflows; reuse for both signs
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def _normalize_rows(raw):
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms < 1e-12) or not np.isfinite(norms).all():
        raise ValueError("direction parameters collapsed to zero norm")
    return raw / norms[:, None], norms


def _project_rows(grad_mu_hat, mu_hat, norms):
    # pull back through mu_hat = u / |u|: remove the radial component and
    # divide by the stored norm
    radial = np.einsum("ij,ij->i", grad_mu_hat, mu_hat)
    return (grad_mu_hat - radial[:, None] * mu_hat) / norms[:, None]


def _expected_he_norm(dim, fan_in):
    # mean norm of a dim-vector with N(0, 2/fan_in) entries
    return math.sqrt(2.0 / fan_in) * math.sqrt(2.0) * math.exp(
        lgamma(0.5 * (dim + 1.0)) - lgamma(0.5 * dim))


def _radial_block(n, log_mean):
    block = np.zeros((n, 4))
    block[:, 0] = log_mean
    block[:, 2] = log_mean
    block[:, 1] = _INIT_LOG_SIGMA2
    block[:, 3] = _INIT_LOG_SIGMA2
    return block


def _scale_block():
    return np.array([0.0, _INIT_LOG_SIGMA2, 0.0, _INIT_LOG_SIGMA2])


class RdpLayer:
    """Variational state of one weight tensor under the grouped family.

    Construction takes raw parameter arrays; ``initialize`` builds them so
    initial weight samples match a standard fan-in-scaled dense init in
    distribution. ``kernel`` marks a convolutional tensor (k_w, k_h) whose
    grouping views are the 2-d flattenings of ``flatten_conv``.
    """

    def __init__(self, n_out, n_in, grouping, kernel=None, *,
                 mu_raw, kappa_raw, row_radial_raw=None, col_radial_raw=None,
                 scale_row_raw=None, scale_col_raw=None,
                 kappa_p=1e-3, mu_p=None, gamma=1e-5):
        if not isinstance(grouping, GroupingScheme):
            raise ValueError("grouping must be a GroupingScheme")
        n_out = int(n_out)
        n_in = int(n_in)
        if n_out < 1 or n_in < 1:
            raise ValueError("layer dimensions must be positive")
        if kernel is not None:
            kw, kh = (int(kernel[0]), int(kernel[1]))
            if kw < 1 or kh < 1:
                raise ValueError("kernel dimensions must be positive")
            kernel = (kw, kh)
        self.n_out = n_out
        self.n_in = n_in
        self.kernel = kernel
        self.grouping = grouping

        kk = 1 if kernel is None else kernel[0] * kernel[1]
        self.d_row = n_in * kk
        self.d_col = n_out * kk

        if grouping is GroupingScheme.COLUMN:
            n_groups, dim = n_in, self.d_col
        else:
            n_groups, dim = n_out, self.d_row
        if dim < 2:
            raise ValueError("directional groups need dimension >= 2")

        self.mu_raw = np.array(mu_raw, dtype=np.float64)
        if self.mu_raw.shape != (n_groups, dim):
            raise ValueError(
                f"mu_raw must have shape {(n_groups, dim)}, "
                f"got {self.mu_raw.shape}")
        _normalize_rows(self.mu_raw)  # reject degenerate directions early

        self.kappa_raw = np.array(kappa_raw, dtype=np.float64).reshape(1)
        if not np.isfinite(self.kappa_raw).all():
            raise ValueError("kappa_raw must be finite")

        def radial(arr, n, name):
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != (n, 4):
                raise ValueError(f"{name} must have shape {(n, 4)}")
            return arr

        def scale(arr, name):
            arr = np.array(arr, dtype=np.float64).reshape(-1)
            if arr.shape != (4,):
                raise ValueError(f"{name} must have 4 entries")
            return arr

        self.row_radial_raw = None
        self.col_radial_raw = None
        self.scale_row_raw = None
        self.scale_col_raw = None
        if grouping in (GroupingScheme.ROW, GroupingScheme.DOUBLE):
            self.row_radial_raw = radial(row_radial_raw, n_out, "row_radial_raw")
            self.scale_row_raw = scale(scale_row_raw, "scale_row_raw")
        if grouping in (GroupingScheme.COLUMN, GroupingScheme.DOUBLE):
            self.col_radial_raw = radial(col_radial_raw, n_in, "col_radial_raw")
            self.scale_col_raw = scale(scale_col_raw, "scale_col_raw")

        self.kappa_p = float(kappa_p)
        if not (math.isfinite(self.kappa_p) and self.kappa_p > 0.0):
            raise ValueError("kappa_p must be positive and finite")
        self.gamma = float(gamma)
        if not (math.isfinite(self.gamma) and self.gamma > 0.0):
            raise ValueError("gamma must be positive and finite")
        if mu_p is None:
            mu_p = self.mu_raw
        mu_p = np.array(mu_p, dtype=np.float64)
        if mu_p.shape != (n_groups, dim):
            raise ValueError(f"mu_p must have shape {(n_groups, dim)}")
        self.mu_p, _ = _normalize_rows(mu_p)

    # -- derived views -----------------------------------------------------

    @property
    def kappa_q(self):
        return float(_softplus(self.kappa_raw[0]))

    @property
    def dir_dim(self):
        return self.mu_raw.shape[1]

    @property
    def n_dir_groups(self):
        return self.mu_raw.shape[0]

    @property
    def weight_shape(self):
        if self.kernel is None:
            return (self.n_out, self.n_in)
        return (self.n_out, self.n_in) + self.kernel

    @property
    def prior(self):
        return RdpPrior(self.kappa_p, self.mu_p, HalfCauchyScale(self.gamma))

    def directions(self):
        """Normalized directional locations, one row per group."""
        mu_hat, _ = _normalize_rows(self.mu_raw)
        return mu_hat

    def _radial_posteriors(self, raw):
        return [
            RadialGroupPosterior(
                LogNormalParams(float(r[0]), float(math.exp(r[1]))),
                LogNormalParams(float(r[2]), float(math.exp(r[3]))),
            )
            for r in raw
        ]

    @property
    def row_groups(self):
        """(direction, radial) pairs for row groups; None direction when the
        grouping gives rows no directional factor."""
        if self.row_radial_raw is None:
            return None
        radials = self._radial_posteriors(self.row_radial_raw)
        mu_hat = self.directions()
        kq = self.kappa_q
        return [(VmfParams(mu_hat[i], kq), radials[i])
                for i in range(self.n_out)]

    @property
    def col_groups(self):
        if self.col_radial_raw is None:
            return None
        radials = self._radial_posteriors(self.col_radial_raw)
        if self.grouping is GroupingScheme.COLUMN:
            mu_hat = self.directions()
            kq = self.kappa_q
            return [(VmfParams(mu_hat[i], kq), radials[i])
                    for i in range(self.n_in)]
        return [(None, radials[i]) for i in range(self.n_in)]

    def _scale_posterior(self, raw):
        return LayerScalePosterior(
            LogNormalParams(float(raw[0]), float(math.exp(raw[1]))),
            LogNormalParams(float(raw[2]), float(math.exp(raw[3]))),
        )

    @property
    def layer_scale_row(self):
        if self.scale_row_raw is None:
            return None
        return self._scale_posterior(self.scale_row_raw)

    @property
    def layer_scale_col(self):
        if self.scale_col_raw is None:
            return None
        return self._scale_posterior(self.scale_col_raw)

    def parameters(self):
        """Live raw arrays keyed by name; optimizers update them in place."""
        out = {"mu_raw": self.mu_raw, "kappa_raw": self.kappa_raw}
        if self.row_radial_raw is not None:
            out["row_radial_raw"] = self.row_radial_raw
            out["scale_row_raw"] = self.scale_row_raw
        if self.col_radial_raw is not None:
            out["col_radial_raw"] = self.col_radial_raw
            out["scale_col_raw"] = self.scale_col_raw
        return out

    def state(self):
        s = {
            "n_out": self.n_out,
            "n_in": self.n_in,
            "kernel": self.kernel,
            "grouping": self.grouping.value,
            "kappa_p": self.kappa_p,
            "gamma": self.gamma,
            "mu_p": self.mu_p.copy(),
        }
        for name, arr in self.parameters().items():
            s[name] = arr.copy()
        return s

    @classmethod
    def from_state(cls, s):
        kernel = s["kernel"]
        if kernel is not None:
            kernel = tuple(kernel)
        return cls(
            s["n_out"], s["n_in"], GroupingScheme(s["grouping"]), kernel,
            mu_raw=s["mu_raw"], kappa_raw=s["kappa_raw"],
            row_radial_raw=s.get("row_radial_raw"),
            col_radial_raw=s.get("col_radial_raw"),
            scale_row_raw=s.get("scale_row_raw"),
            scale_col_raw=s.get("scale_col_raw"),
            kappa_p=s["kappa_p"], mu_p=s["mu_p"], gamma=s["gamma"],
        )

    @classmethod
    def initialize(cls, n_out, n_in, grouping, rng, kernel=None,
                   kappa_p=1e-3, gamma=1e-5):
        """Fresh layer whose first weight samples mimic fan-in-scaled init.

        Directions are normalized Gaussian rows; kappa_q starts at 10 times
        the group dimension so directional noise is present but small; the
        local log-normal means split the log of the expected init norm
        evenly across the radial factors (two factors of exponent two each,
        four under double grouping), and every log-sigma starts at 0.1.
        """
        n_out, n_in = int(n_out), int(n_in)
        kk = 1 if kernel is None else int(kernel[0]) * int(kernel[1])
        fan_in = n_in * kk
        if grouping is GroupingScheme.COLUMN:
            n_groups, dim = n_in, n_out * kk
        else:
            n_groups, dim = n_out, fan_in
        raw = rng.normal(size=(n_groups, dim)) * math.sqrt(2.0 / fan_in)
        mu_raw, _ = _normalize_rows(raw)
        kappa_raw = np.array([_softplus_inv(10.0 * dim)])

        kwargs = {}
        if grouping in (GroupingScheme.ROW, GroupingScheme.DOUBLE):
            t = _expected_he_norm(fan_in, fan_in)
            split = 8.0 if grouping is GroupingScheme.DOUBLE else 4.0
            kwargs["row_radial_raw"] = _radial_block(n_out, math.log(t) / split)
            kwargs["scale_row_raw"] = _scale_block()
        if grouping in (GroupingScheme.COLUMN, GroupingScheme.DOUBLE):
            if grouping is GroupingScheme.COLUMN:
                t = _expected_he_norm(n_out * kk, fan_in)
                log_mean = math.log(t) / 4.0
            else:
                t = _expected_he_norm(fan_in, fan_in)
                log_mean = math.log(t) / 8.0
            kwargs["col_radial_raw"] = _radial_block(n_in, log_mean)
            kwargs["scale_col_raw"] = _scale_block()

        return cls(n_out, n_in, grouping, kernel, mu_raw=mu_raw,
                   kappa_raw=kappa_raw, kappa_p=kappa_p, gamma=gamma, **kwargs)


# ---------------------------------------------------------------------------
# convolutional flattening


def flatten_conv(weights, grouping):
    """2-d grouping view of a 4-d (n_out, n_in, k_w, k_h) filter tensor.

    Row (and double, whose directional axis is the row one): one group per
    output channel, dimension n_in*k_w*k_h. Column: one group per input
    channel, dimension n_out*k_w*k_h. Lossless; see unflatten_conv.
    """
    w = np.asarray(weights)
    if w.ndim != 4:
        raise ValueError(f"expected a 4-d filter tensor, got {w.ndim}-d")
    if grouping is GroupingScheme.COLUMN:
        return w.transpose(1, 0, 2, 3).reshape(w.shape[1], -1)
    return w.reshape(w.shape[0], -1)


def unflatten_conv(mat, shape, grouping):
    """Inverse of flatten_conv for the given 4-d shape."""
    mat = np.asarray(mat)
    n_out, n_in, kw, kh = shape
    if grouping is GroupingScheme.COLUMN:
        if mat.shape != (n_in, n_out * kw * kh):
            raise ValueError("matrix does not match the column view of shape")
        return mat.reshape(n_in, n_out, kw, kh).transpose(1, 0, 2, 3)
    if mat.shape != (n_out, n_in * kw * kh):
        raise ValueError("matrix does not match the row view of shape")
    return mat.reshape(n_out, n_in, kw, kh)


# ---------------------------------------------------------------------------
# sampling and its backward pass


def _log_normal_draws(raw, z):
    # raw columns: (mu_a, log s2_a, mu_b, log s2_b); z columns match a, b
    sig = np.exp(0.5 * raw[..., 1::2])
    return raw[..., 0::2] + sig * z


def _canonical_from_column(mat, layer):
    if layer.kernel is None:
        return mat.T
    kw, kh = layer.kernel
    w4 = unflatten_conv(mat, (layer.n_out, layer.n_in, kw, kh),
                        GroupingScheme.COLUMN)
    return w4.reshape(layer.n_out, -1)


def _column_from_canonical(w2, layer):
    if layer.kernel is None:
        return w2.T
    kw, kh = layer.kernel
    w4 = w2.reshape(layer.n_out, layer.n_in, kw, kh)
    return flatten_conv(w4, GroupingScheme.COLUMN)


def sample_weights(layer, rng):
    """One reparameterized weight draw in the canonical row-flattened shape.

    Returns (weights, trace): weights is (n_out, n_in*k_w*k_h), and the
    trace records every noise variable consumed, in a fixed order, so
    weight_backward can replay exact parameter gradients and identical
    seeds give identical draws.
    """
    mu_hat = layer.directions()
    kq = layer.kappa_q
    x, omega, eps, rej, tang = vmf_sample_rows(mu_hat, kq, rng)

    z_row = z_col = z_srow = z_scol = None
    rho_row = rho_col = None
    if layer.row_radial_raw is not None:
        z_row = rng.normal(size=(layer.n_out, 2))
        z_srow = rng.normal(size=2)
        local = _log_normal_draws(layer.row_radial_raw, z_row).sum(axis=1)
        glob = _log_normal_draws(layer.scale_row_raw, z_srow).sum()
        rho_row = np.exp(2.0 * (local + glob))
    if layer.col_radial_raw is not None:
        z_col = rng.normal(size=(layer.n_in, 2))
        z_scol = rng.normal(size=2)
        local = _log_normal_draws(layer.col_radial_raw, z_col).sum(axis=1)
        glob = _log_normal_draws(layer.scale_col_raw, z_scol).sum()
        rho_col = np.exp(2.0 * (local + glob))

    if layer.grouping is GroupingScheme.ROW:
        weights = rho_row[:, None] * x
    elif layer.grouping is GroupingScheme.COLUMN:
        weights = _canonical_from_column(rho_col[:, None] * x, layer)
    else:
        kk = 1 if layer.kernel is None else layer.kernel[0] * layer.kernel[1]
        cscale = np.repeat(rho_col, kk)
        weights = rho_row[:, None] * x * cscale[None, :]

    trace = WeightTrace(x, omega, eps, tang, rej, z_row, z_col,
                        z_srow, z_scol, rho_row, rho_col)
    return weights, trace


def _radial_grads(raw, z, glr):
    # d log rho / d mu = 2, d log rho / d raw_log_s2 = z * sigma, per factor
    glr = np.asarray(glr, dtype=np.float64)
    g = np.zeros_like(raw)
    sig = np.exp(0.5 * raw[..., 1::2])
    g[..., 0::2] = 2.0 * glr[..., None]
    g[..., 1::2] = glr[..., None] * z * sig
    return g


def _direction_backward(layer, trace, gx, kq):
    """Gradients of the directional draw: (mu_raw grad, kappa path term).

    gx is dL/dx in the grouping's own view. The draw is x = H(mu)[omega;
    sqrt(1-omega^2) t] with H the Householder map sending e1 to mu, so mu
    gets a pure geometry gradient and kappa flows through the cosine.
    """
    mu_hat, norms = _normalize_rows(layer.mu_raw)
    omega, eps, tang = trace.omega, trace.epsilon, trace.tangent
    d = layer.dir_dim
    m1 = d - 1.0

    s1 = np.sqrt(np.maximum(1.0 - omega * omega, 1e-300))
    y = np.empty_like(gx)
    y[:, 0] = omega
    y[:, 1:] = s1[:, None] * tang

    # adjoint of the reflection x = y - (2 v.y / v.v) v at v = e1 - mu
    v = -mu_hat.copy()
    v[:, 0] += 1.0
    q = np.einsum("ij,ij->i", v, v)
    a = np.einsum("ij,ij->i", v, y)
    gv = np.einsum("ij,ij->i", gx, v)
    safe_q = np.where(q < 1e-24, 1.0, q)
    dl_dv = (-(2.0 / safe_q) * gv)[:, None] * y \
        - ((2.0 * a / safe_q))[:, None] * gx \
        + ((4.0 * a * gv / (safe_q * safe_q)))[:, None] * v
    dl_dv[q < 1e-24] = 0.0  # mu == e1: reflection degenerates to identity
    g_mu = _project_rows(-dl_dv, mu_hat, norms)

    # kappa path: only omega moves; H is linear and symmetric, so fold it
    # into the cotangent once
    s = math.hypot(2.0 * kq, m1)
    b = m1 / (s + 2.0 * kq)
    db = -2.0 * m1 / (s * (s + 2.0 * kq))
    den = 1.0 - (1.0 - b) * eps
    num = 1.0 - (1.0 + b) * eps
    domega = -eps * (den + num) / (den * den) * db
    h = _householder_rows(gx, mu_hat)
    path = h[:, 0] * domega \
        + np.einsum("ij,ij->i", h[:, 1:], tang) * (-omega / s1) * domega
    return g_mu, float(path.sum())


def weight_backward(layer, trace, grad_weights, loglik=0.0):
    """Parameter gradients of a sampled-weight objective.

    grad_weights is dL/dW against the canonical matrix sample_weights
    returned; loglik is the objective value itself, which multiplies the
    per-group density-reweighting factors in the kappa gradient (the term
    a pure pathwise derivative of a rejection-sampled cosine misses).
    Returns a dict keyed like layer.parameters().
    """
    gw = np.asarray(grad_weights, dtype=np.float64)
    if gw.shape != (layer.n_out, layer.d_row):
        raise ValueError(
            f"grad_weights must have shape {(layer.n_out, layer.d_row)}")
    kq = layer.kappa_q
    x = trace.x_dir
    grads = {}

    if layer.grouping is GroupingScheme.ROW:
        drho = np.einsum("ij,ij->i", gw, x)
        gx = trace.rho_row[:, None] * gw
        glr = drho * trace.rho_row
        grads["row_radial_raw"] = _radial_grads(
            layer.row_radial_raw, trace.z_row, glr)
        grads["scale_row_raw"] = _radial_grads(
            layer.scale_row_raw, trace.z_scale_row, glr.sum())
    elif layer.grouping is GroupingScheme.COLUMN:
        gcol = _column_from_canonical(gw, layer)
        drho = np.einsum("ij,ij->i", gcol, x)
        gx = trace.rho_col[:, None] * gcol
        glr = drho * trace.rho_col
        grads["col_radial_raw"] = _radial_grads(
            layer.col_radial_raw, trace.z_col, glr)
        grads["scale_col_raw"] = _radial_grads(
            layer.scale_col_raw, trace.z_scale_col, glr.sum())
    else:
        kk = 1 if layer.kernel is None else layer.kernel[0] * layer.kernel[1]
        cscale = np.repeat(trace.rho_col, kk)
        gwc = gw * cscale[None, :]
        drho_row = np.einsum("ij,ij->i", gwc, x)
        gcs = (gw * trace.rho_row[:, None] * x).sum(axis=0)
        drho_col = gcs.reshape(layer.n_in, kk).sum(axis=1)
        gx = trace.rho_row[:, None] * gwc
        glr_row = drho_row * trace.rho_row
        glr_col = drho_col * trace.rho_col
        grads["row_radial_raw"] = _radial_grads(
            layer.row_radial_raw, trace.z_row, glr_row)
        grads["scale_row_raw"] = _radial_grads(
            layer.scale_row_raw, trace.z_scale_row, glr_row.sum())
        grads["col_radial_raw"] = _radial_grads(
            layer.col_radial_raw, trace.z_col, glr_col)
        grads["scale_col_raw"] = _radial_grads(
            layer.scale_col_raw, trace.z_scale_col, glr_col.sum())

    g_mu, path_k = _direction_backward(layer, trace, gx, kq)
    grads["mu_raw"] = g_mu
    total_k = path_k
    if loglik != 0.0:
        d = layer.dir_dim
        total_k += loglik * sum(
            vmf_grad_correction(1.0, d, kq, tr) for tr in trace.vmf_traces())
    grads["kappa_raw"] = np.array(
        [total_k * float(_sigmoid(layer.kappa_raw[0]))])
    return grads


# ---------------------------------------------------------------------------
# KL assembly


def _prior_dots(layer, mu_hat):
    dots = np.einsum("ij,ij->i", mu_hat, layer.mu_p)
    return np.clip(dots, -1.0, 1.0)


def _radial_kl_terms(raw):
    mu_a, s2_a = raw[:, 0], np.exp(raw[:, 1])
    mu_b, s2_b = raw[:, 2], np.exp(raw[:, 3])
    return (kl_lognormal_gamma(LogNormalParams(mu_a, s2_a), _LOCAL_ALPHA_PRIOR)
            + kl_lognormal_invgamma(LogNormalParams(mu_b, s2_b),
                                    _LOCAL_BETA_PRIOR))


def _scale_kl(raw, gamma):
    s_a = LogNormalParams(float(raw[0]), math.exp(raw[1]))
    s_b = LogNormalParams(float(raw[2]), math.exp(raw[3]))
    # Gamma(1/2, rate 1/gamma^2): the global factor of the half-Cauchy
    # product decomposition at scale gamma
    return (kl_lognormal_gamma(s_a, GammaParams(0.5, gamma ** -2))
            + kl_lognormal_invgamma(s_b, _GLOBAL_B_PRIOR))


def layer_kl(layer):
    """KL of the layer posterior against its prior: one vMF term per
    directional group, local radial pairs per group, one global radial
    pair per grouping direction."""
    mu_hat = layer.directions()
    dots = _prior_dots(layer, mu_hat)
    total = float(np.sum(kl_vmf_vmf_from_dots(
        layer.dir_dim, layer.kappa_q, layer.kappa_p, dots)))
    if layer.row_radial_raw is not None:
        total += float(np.sum(_radial_kl_terms(layer.row_radial_raw)))
        total += float(_scale_kl(layer.scale_row_raw, layer.gamma))
    if layer.col_radial_raw is not None:
        total += float(np.sum(_radial_kl_terms(layer.col_radial_raw)))
        total += float(_scale_kl(layer.scale_col_raw, layer.gamma))
    return total


def _radial_kl_grads(raw):
    g = np.zeros_like(raw)
    s2_a = np.exp(raw[:, 1])
    s2_b = np.exp(raw[:, 3])
    dmu, ds2 = kl_lognormal_gamma_grad(
        LogNormalParams(raw[:, 0], s2_a), _LOCAL_ALPHA_PRIOR)
    g[:, 0] = dmu
    g[:, 1] = ds2 * s2_a
    dmu, ds2 = kl_lognormal_invgamma_grad(
        LogNormalParams(raw[:, 2], s2_b), _LOCAL_BETA_PRIOR)
    g[:, 2] = dmu
    g[:, 3] = ds2 * s2_b
    return g


def _scale_kl_grads(raw, gamma):
    g = np.zeros(4)
    s2_a, s2_b = math.exp(raw[1]), math.exp(raw[3])
    dmu, ds2 = kl_lognormal_gamma_grad(
        LogNormalParams(float(raw[0]), s2_a), GammaParams(0.5, gamma ** -2))
    g[0], g[1] = dmu, ds2 * s2_a
    dmu, ds2 = kl_lognormal_invgamma_grad(
        LogNormalParams(float(raw[2]), s2_b), _GLOBAL_B_PRIOR)
    g[2], g[3] = dmu, ds2 * s2_b
    return g


def layer_kl_grads(layer):
    """Exact gradients of layer_kl for every raw parameter array."""
    mu_hat, norms = _normalize_rows(layer.mu_raw)
    dots = _prior_dots(layer, mu_hat)
    kq = layer.kappa_q
    d = layer.dir_dim
    grads = {}

    gk = float(np.sum(kl_vmf_grad_from_dots(d, kq, layer.kappa_p, dots)))
    grads["kappa_raw"] = np.array([gk * float(_sigmoid(layer.kappa_raw[0]))])

    ratio = bessel_ratio(0.5 * d, kq)
    g_mu_hat = (-layer.kappa_p * ratio) * layer.mu_p
    grads["mu_raw"] = _project_rows(g_mu_hat, mu_hat, norms)

    if layer.row_radial_raw is not None:
        grads["row_radial_raw"] = _radial_kl_grads(layer.row_radial_raw)
        grads["scale_row_raw"] = _scale_kl_grads(layer.scale_row_raw,
                                                 layer.gamma)
    if layer.col_radial_raw is not None:
        grads["col_radial_raw"] = _radial_kl_grads(layer.col_radial_raw)
        grads["scale_col_raw"] = _scale_kl_grads(layer.scale_col_raw,
                                                 layer.gamma)
    return grads


# ---------------------------------------------------------------------------
# pruning


def group_log_modes(layer):
    """Log-modes of the combined local radial products, (rows, cols).

    Per group this is the mode of the log-normal with summed parameters,
    (mu_alpha + mu_beta) - (sigma2_alpha + sigma2_beta); the global scale
    pair is deliberately excluded so thresholds compare groups within a
    layer on their own contributions. A direction with no groups is None.
    """

    def modes(raw):
        if raw is None:
            return None
        return (raw[:, 0] + raw[:, 2]) - (np.exp(raw[:, 1]) + np.exp(raw[:, 3]))

    return modes(layer.row_radial_raw), modes(layer.col_radial_raw)


def select_threshold(log_modes):
    """Midpoint of the largest gap between consecutive sorted log-modes.

    The bimodal separation this exploits is what the radial family is
    trained to produce; when every mode ties there is no gap to cut and
    the -inf sentinel keeps everything.
    """
    values = np.asarray(log_modes, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise ValueError("need at least two log-modes to place a threshold")
    if not np.isfinite(values).all():
        raise ValueError("log-modes must be finite")
    s = np.sort(values)
    gaps = np.diff(s)
    i = int(np.argmax(gaps))
    if gaps[i] <= 0.0:
        return float("-inf")
    return float(0.5 * (s[i] + s[i + 1]))


def mask_from_thresholds(layer, threshold_row=None, threshold_col=None):
    """PruneMask keeping groups whose log-mode is >= the given threshold.

    None keeps that side untouched; passing a threshold for a side the
    grouping gives no radial groups is an error rather than a no-op.
    """
    row_modes, col_modes = group_log_modes(layer)

    def side(modes, thr, n, name):
        if thr is None:
            return np.ones(n, dtype=bool), float("-inf")
        if modes is None:
            raise ValueError(f"layer has no {name} groups to threshold")
        thr = float(thr)
        return modes >= thr, thr

    keep_rows, thr_r = side(row_modes, threshold_row, layer.n_out, "row")
    keep_cols, thr_c = side(col_modes, threshold_col, layer.n_in, "column")
    return PruneMask(keep_rows, keep_cols, thr_r, thr_c)


def _as_mask(vec, n, name):
    vec = np.asarray(vec, dtype=bool).reshape(-1)
    if vec.shape != (n,):
        raise ValueError(f"{name} must have length {n}")
    if not vec.any():
        raise ValueError(f"{name} would empty the layer")
    return vec


def prune_weight_matrix(weights, mask, kernel=None):
    """Index surgery on a canonical weight matrix: rows by keep_rows,
    input blocks (kernel-sized for convolutions) by keep_cols."""
    w = np.asarray(weights)
    keep_r = np.flatnonzero(np.asarray(mask.keep_rows, dtype=bool))
    kk = 1 if kernel is None else int(kernel[0]) * int(kernel[1])
    keep_c = np.flatnonzero(np.repeat(np.asarray(mask.keep_cols, dtype=bool), kk))
    return w[np.ix_(keep_r, keep_c)]


def prune(layer, mask):
    """Restrict a layer to the surviving rows and input columns.

    Directional raw vectors simply lose the dropped coordinates (they are
    normalized on read, so no rescaling is stored); prior locations are
    re-normalized to stay unit. Raises if the mask empties either side or
    strips all the mass from some direction.
    """
    keep_r = _as_mask(mask.keep_rows, layer.n_out, "keep_rows")
    keep_c = _as_mask(mask.keep_cols, layer.n_in, "keep_cols")
    kk = 1 if layer.kernel is None else layer.kernel[0] * layer.kernel[1]
    coords_in = np.repeat(keep_c, kk)
    coords_out = np.repeat(keep_r, kk)
    n_out = int(keep_r.sum())
    n_in = int(keep_c.sum())

    if layer.grouping is GroupingScheme.COLUMN:
        group_keep, coord_keep = keep_c, coords_out
    else:
        group_keep, coord_keep = keep_r, coords_in
    mu_raw = layer.mu_raw[group_keep][:, coord_keep]
    mu_p = layer.mu_p[group_keep][:, coord_keep]
    norms = np.linalg.norm(mu_raw, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("pruning removed all the mass of some direction")

    kwargs = {}
    if layer.row_radial_raw is not None:
        kwargs["row_radial_raw"] = layer.row_radial_raw[keep_r]
        kwargs["scale_row_raw"] = layer.scale_row_raw.copy()
    if layer.col_radial_raw is not None:
        kwargs["col_radial_raw"] = layer.col_radial_raw[keep_c]
        kwargs["scale_col_raw"] = layer.scale_col_raw.copy()

    new = RdpLayer(n_out, n_in, layer.grouping, layer.kernel,
                   mu_raw=mu_raw, kappa_raw=layer.kappa_raw.copy(),
                   kappa_p=layer.kappa_p, mu_p=mu_p, gamma=layer.gamma,
                   **kwargs)
    return PrunedLayer(new, np.flatnonzero(keep_r), np.flatnonzero(keep_c))
