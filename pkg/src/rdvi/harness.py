"""Experiment plumbing around the variational family.

Dataset ingestion (UCI-style CSV, IDX image files), the two training
protocols (heteroscedastic regression with a learned Gamma precision,
softmax classification with structured pruning), predictive evaluation,
versioned JSON checkpoints, CSV metrics/histogram emission, and exact
FLOP/parameter counting of conv/dense architectures.

Randomness discipline: every protocol consumes a single integer seed.
``derive_seed`` hashes the seed together with a task label into the root
of an ``RngStream``; fixed child indices then separate initialization
(0), data ordering (1), step noise (2), and evaluation draws (3), so a
rerun with the same seed reproduces every file byte for byte.
"""

import gzip
import hashlib
import json
import math
import os
import struct
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .dists import GammaParams, RngStream
from .rdp import (
    GroupingScheme,
    PruneMask,
    RdpLayer,
    _softplus_inv,
    group_log_modes,
    prune as prune_layer,
    select_threshold,
)

_TINY_LOG_S2 = math.log(1e-20)


# ---------------------------------------------------------------------------
# standardization and dataset splits


class Standardizer:
    """Per-column affine map to zero mean and unit variance.

    Fit on training data only; the recorded mean/std make ``inverse`` an
    exact inverse of ``transform``. Constant columns get scale one so
    they map to zero instead of dividing by zero.
    """

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have matching shapes")
        if not (np.isfinite(self.std).all() and (self.std > 0.0).all()):
            raise ValueError("std entries must be positive and finite")

    @classmethod
    def fit(cls, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim not in (1, 2):
            raise ValueError("standardizer expects 1-d or 2-d data")
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        std = np.where(np.isfinite(std) & (std > 0.0), std, 1.0)
        return cls(mean, std)

    def transform(self, data):
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std

    def inverse(self, data):
        return np.asarray(data, dtype=np.float64) * self.std + self.mean


class DatasetSplit(NamedTuple):
    """Standardized train/test arrays plus the fitted scalers.

    Targets are stored standardized; ``y_scaler`` records the affine map
    back to original units for likelihood reporting.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    x_scaler: Standardizer
    y_scaler: Standardizer


def derive_seed(seed, label):
    """Stable 63-bit sub-seed for one named stream of a run.

    Hashing the task label with the run seed keeps streams for distinct
    tasks independent while the whole run remains a function of one
    integer: sha256 over "label/seed", top eight bytes, sign bit cleared.
    """
    digest = hashlib.sha256(f"{label}/{int(seed)}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def split_arrays(x, y, seed, train_fraction=0.9):
    """Seeded shuffle into standardized train/test pieces.

    The split permutation comes from the "split" stream of ``seed``; the
    scalers are fit on the training rows only.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("need x (n, d) and y (n,) with matching n")
    n = x.shape[0]
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = RngStream(derive_seed(seed, "split")).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    xs = Standardizer.fit(x[tr])
    ys = Standardizer.fit(y[tr])
    return DatasetSplit(xs.transform(x[tr]), ys.transform(y[tr]),
                        xs.transform(x[te]), ys.transform(y[te]), xs, ys)


def split_pool(x, y, seed, train_fraction=0.9):
    """Seeded train/test partition without standardization (image data)."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("inputs and labels must have matching counts")
    n = x.shape[0]
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = RngStream(derive_seed(seed, "pool-split")).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    return x[tr], y[tr], x[te], y[te]


# ---------------------------------------------------------------------------
# file ingestion


def load_uci_csv(path, target, seed=0, train_fraction=0.9):
    """Standardized DatasetSplit from a CSV regression table.

    The header row is auto-detected (a first line that does not parse as
    numbers); fields split on commas when the first line contains one,
    otherwise on whitespace. ``target`` picks the target column by
    header name or integer position.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: no data rows")
    comma = "," in lines[0]

    def fields(line):
        return [t.strip() for t in (line.split(",") if comma else line.split())]

    first = fields(lines[0])
    header = None
    try:
        [float(t) for t in first]
    except ValueError:
        header = first
        lines = lines[1:]
    if not lines:
        raise ValueError(f"{path}: header but no data rows")

    ncol = len(first)
    rows = np.empty((len(lines), ncol))
    for i, line in enumerate(lines):
        parts = fields(line)
        if len(parts) != ncol:
            raise ValueError(
                f"{path}: row {i + 1} has {len(parts)} fields, expected {ncol}")
        try:
            rows[i] = [float(t) for t in parts]
        except ValueError as exc:
            raise ValueError(f"{path}: row {i + 1} is not numeric: {exc}")

    if isinstance(target, str):
        if header is None:
            raise ValueError("named target column requires a header row")
        if target not in header:
            raise ValueError(
                f"target column {target!r} not in header {header}")
        t = header.index(target)
    else:
        t = int(target)
        if not -ncol <= t < ncol:
            raise ValueError(f"target column {target} out of range for {ncol} columns")
        t %= ncol
    y = rows[:, t]
    x = np.delete(rows, t, axis=1)
    return split_arrays(x, y, seed, train_fraction)


def _read_idx(path, expected_magic, name, ndim):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            raw = fh.read()
    else:
        with open(path, "rb") as fh:
            raw = fh.read()

    if len(raw) < 4:
        raise ValueError(
            f"{name} file {path}: truncated magic at byte 0 "
            f"(need 4 bytes, file holds {len(raw)})")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(
            f"{name} file {path}: bad magic {magic} at byte 0 "
            f"(expected {expected_magic})")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(
            f"{name} file {path}: truncated dimension header at byte {len(raw)} "
            f"(need {header_end} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = 1
    for d in dims:
        count *= d
    if len(raw) != header_end + count:
        raise ValueError(
            f"{name} file {path}: expected {count} data bytes from byte "
            f"{header_end}, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Images scaled to [0, 1] and integer labels from an IDX pair.

    Big-endian IDX with magics 2051 (images, three dimensions) and 2049
    (labels, one dimension); plain and gzipped files are both accepted,
    sniffed by the gzip signature. Malformed inputs raise with the byte
    offset of the defect.
    """
    images = _read_idx(images_path, 2051, "images", 3)
    labels = _read_idx(labels_path, 2049, "labels", 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"images hold {images.shape[0]} items but labels {labels.shape[0]}")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# architecture descriptions and counting


class ConvSpec(NamedTuple):
    """One convolution: channels, kernel, expected input extent, total padding."""

    c_in: int
    c_out: int
    k_h: int
    k_w: int
    in_h: int
    in_w: int
    p_h: int = 0
    p_w: int = 0


class DenseSpec(NamedTuple):
    n_in: int
    n_out: int


class PoolSpec(NamedTuple):
    size: int = 2


class ArchitectureSpec(NamedTuple):
    """Ordered layer descriptors plus the spatial input extent (conv nets)."""

    name: str
    layers: tuple
    input_hw: Optional[tuple] = None


class LayerCount(NamedTuple):
    label: str
    params: int
    flops: int


class CompressionReport(NamedTuple):
    """Counting summary of an architecture, with optional pruning context.

    ``retained`` holds (interface, kept, total) unit triples and
    ``histograms`` (layer, group_kind, log_mode) triples when the report
    came out of a pruning pass; both stay empty for plain counting.
    Totals equal the sums of the per-layer entries.
    """

    architecture: str
    total_params: int
    total_flops: int
    per_layer: tuple
    retained: tuple = ()
    histograms: tuple = ()


def flops_report(arch):
    """Exact multiply-accumulate and parameter counts per layer.

    Convolutions cost (K_h K_w C_in + 1) output_h output_w C_out with
    output extent (I + P - K + 1); dense layers cost (I_in + 1) I_out.
    Pooling halves the spatial extent and costs nothing. Shape
    incompatibilities between consecutive layers raise.
    """
    spatial = None if arch.input_hw is None else (int(arch.input_hw[0]),
                                                  int(arch.input_hw[1]))
    chans = None
    flat = None
    per_layer = []
    n_conv = n_dense = n_pool = 0
    for spec in arch.layers:
        if isinstance(spec, ConvSpec):
            n_conv += 1
            if spatial is None:
                raise ValueError("conv layer needs a spatial input extent")
            if chans is not None and chans != spec.c_in:
                raise ValueError(
                    f"conv{n_conv} expects {spec.c_in} input channels, "
                    f"previous layer emits {chans}")
            if spatial != (spec.in_h, spec.in_w):
                raise ValueError(
                    f"conv{n_conv} expects input {spec.in_h}x{spec.in_w}, "
                    f"previous layer emits {spatial[0]}x{spatial[1]}")
            out_h = spec.in_h + spec.p_h - spec.k_h + 1
            out_w = spec.in_w + spec.p_w - spec.k_w + 1
            if out_h < 1 or out_w < 1:
                raise ValueError(f"conv{n_conv} kernel exceeds its padded input")
            unit = spec.k_h * spec.k_w * spec.c_in + 1
            per_layer.append(LayerCount(f"conv{n_conv}", unit * spec.c_out,
                                        unit * out_h * out_w * spec.c_out))
            spatial, chans, flat = (out_h, out_w), spec.c_out, None
        elif isinstance(spec, PoolSpec):
            n_pool += 1
            if spatial is None or chans is None:
                raise ValueError("pooling needs a convolutional input")
            if spatial[0] % spec.size or spatial[1] % spec.size:
                raise ValueError(
                    f"pool{n_pool} input {spatial[0]}x{spatial[1]} not divisible "
                    f"by {spec.size}")
            spatial = (spatial[0] // spec.size, spatial[1] // spec.size)
            per_layer.append(LayerCount(f"pool{n_pool}", 0, 0))
        elif isinstance(spec, DenseSpec):
            n_dense += 1
            if chans is not None:
                flat = chans * spatial[0] * spatial[1]
                chans = None
            if flat is not None and flat != spec.n_in:
                raise ValueError(
                    f"dense{n_dense} expects {spec.n_in} inputs, previous "
                    f"layer emits {flat}")
            cost = (spec.n_in + 1) * spec.n_out
            per_layer.append(LayerCount(f"dense{n_dense}", cost, cost))
            flat = spec.n_out
        else:
            raise ValueError(f"unknown layer descriptor {spec!r}")
    return CompressionReport(
        architecture=arch.name,
        total_params=sum(entry.params for entry in per_layer),
        total_flops=sum(entry.flops for entry in per_layer),
        per_layer=tuple(per_layer),
    )


def parse_arch(text):
    """ArchitectureSpec from a compact family string.

    "mlp:a-b-...": dense chain, first number the input width. "lenet5:
    a-b-c-d": the 28x28 counting geometry with 5x5 kernels and 2x2
    pools, conv widths a and b, then a dense chain c, d, 10 fed by the
    16*b flattened pool outputs. Parse errors name the character
    position of the offending token.
    """
    family, sep, rest = text.partition(":")
    if family not in ("mlp", "lenet5"):
        raise ValueError(f"unknown architecture family {family!r} at position 0")
    if not sep:
        raise ValueError(f"expected ':' after {family!r} at position {len(family)}")

    numbers = []
    pos = len(family) + 1
    for part in rest.split("-"):
        if not part.isdigit() or int(part) < 1:
            raise ValueError(
                f"expected a positive integer at position {pos}, got {part!r}")
        numbers.append(int(part))
        pos += len(part) + 1

    if family == "mlp":
        if len(numbers) < 2:
            raise ValueError("mlp needs at least an input and an output width")
        layers = tuple(DenseSpec(a, b) for a, b in zip(numbers, numbers[1:]))
        return ArchitectureSpec(f"mlp:{'-'.join(map(str, numbers))}", layers)

    if len(numbers) != 4:
        raise ValueError(
            f"lenet5 takes exactly 4 widths, got {len(numbers)}")
    a, b, c, d = numbers
    layers = (
        ConvSpec(1, a, 5, 5, 28, 28), PoolSpec(2),
        ConvSpec(a, b, 5, 5, 12, 12), PoolSpec(2),
        DenseSpec(16 * b, c), DenseSpec(c, d), DenseSpec(d, 10),
    )
    return ArchitectureSpec(f"lenet5:{a}-{b}-{c}-{d}", layers, (28, 28))


def model_architecture(model, input_hw=None):
    """ArchitectureSpec describing a live model's wiring.

    ``input_hw`` is required when the model has conv stages. All-dense
    models get a parseable "mlp:..." name; conv chains a descriptive
    token join.
    """
    layers = []
    tokens = []
    spatial = None if input_hw is None else (int(input_hw[0]), int(input_hw[1]))
    for st in model.stages:
        w = st.weights
        if st.kind == "conv":
            if spatial is None:
                raise ValueError("conv stages need input_hw")
            kh, kw = w.kernel
            layers.append(ConvSpec(w.n_in, w.n_out, kh, kw,
                                   spatial[0], spatial[1],
                                   st.padding[0], st.padding[1]))
            tokens.append(f"conv{w.n_out}k{kh}x{kw}")
            spatial = (spatial[0] + st.padding[0] - kh + 1,
                       spatial[1] + st.padding[1] - kw + 1)
            if st.pool:
                layers.append(PoolSpec(2))
                tokens.append("pool2")
                spatial = (spatial[0] // 2, spatial[1] // 2)
        else:
            layers.append(DenseSpec(w.n_in, w.n_out))
            tokens.append(f"dense{w.n_out}")
    if all(isinstance(sp, DenseSpec) for sp in layers):
        widths = [layers[0].n_in] + [sp.n_out for sp in layers]
        name = "mlp:" + "-".join(map(str, widths))
    else:
        name = "-".join(tokens)
    return ArchitectureSpec(name, tuple(layers), input_hw)


# ---------------------------------------------------------------------------
# model builders


class PrecisionPosterior(NamedTuple):
    """Gamma posterior over the Gaussian likelihood precision."""

    a1: float
    b1: float


PRECISION_PRIOR = GammaParams(6.0, 6.0)


def precision_posterior(model):
    q = model.precision()
    if q is None:
        raise ValueError("model has no precision posterior")
    return PrecisionPosterior(q.alpha, q.beta)


def build_regression_model(n_in, hidden, rng, *, kappa_p=1e-3, gamma=1.0):
    """n_in - hidden - 1 regressor: a double-grouped first layer, a fully
    factorized Gaussian output row, and a learned Gamma precision whose
    prior (and initial posterior) is G(6, 6)."""
    if n_in < 2:
        raise ValueError("regression needs at least two input features")
    first = RdpLayer.initialize(int(hidden), int(n_in), GroupingScheme.DOUBLE,
                                rng.child(0), kappa_p=kappa_p, gamma=gamma)
    out = nn.GaussianLayer.initialize(1, int(hidden), rng.child(1))
    stages = [
        nn.Stage("dense", first, np.zeros(int(hidden))),
        nn.Stage("dense", out, np.zeros(1), activation=None),
    ]
    raw = math.log(6.0)
    return nn.Model(stages, precision_raw=np.array([raw, raw]),
                    precision_prior=PRECISION_PRIOR)


def build_classification_model(arch, rng, *, kappa_p=1e-3, gamma=1e-5):
    """Double-grouped classifier from an ArchitectureSpec (or family
    string); the final stage is linear, every other stage relu."""
    if isinstance(arch, str):
        arch = parse_arch(arch)
    # a PoolSpec marks the conv right before it
    specs = []
    pools = []
    for sp in arch.layers:
        if isinstance(sp, PoolSpec):
            if not pools or not isinstance(specs[-1], ConvSpec):
                raise ValueError("pooling must follow a conv layer")
            pools[-1] = True
        else:
            specs.append(sp)
            pools.append(False)

    stages = []
    for i, (sp, pooled) in enumerate(zip(specs, pools)):
        last = i == len(specs) - 1
        act = None if last else "relu"
        if isinstance(sp, ConvSpec):
            layer = RdpLayer.initialize(sp.c_out, sp.c_in, GroupingScheme.DOUBLE,
                                        rng.child(i), kernel=(sp.k_h, sp.k_w),
                                        kappa_p=kappa_p, gamma=gamma)
            stages.append(nn.Stage("conv", layer, np.zeros(sp.c_out),
                                   activation=act, pool=pooled,
                                   padding=(sp.p_h, sp.p_w)))
        else:
            layer = RdpLayer.initialize(sp.n_out, sp.n_in, GroupingScheme.DOUBLE,
                                        rng.child(i), kappa_p=kappa_p, gamma=gamma)
            stages.append(nn.Stage("dense", layer, np.zeros(sp.n_out),
                                   activation=act))
    return nn.Model(stages)


# ---------------------------------------------------------------------------
# training loops


def _apply_freeze(grads, frozen):
    for name, mask in frozen.items():
        g = grads.get(name)
        if g is None:
            continue
        if mask is None:
            g[...] = 0.0
        else:
            g[mask] = 0.0


def _train_loop(model, train_x, train_y, *, epochs, batch_size, step_size,
                data_rng, step_rng, kl_weight=None, frozen=None,
                epoch_end=None):
    """Minibatch Adam over the single-sample objective.

    Per epoch: a fresh permutation from data_rng, one step-noise child
    per global step. Returns the list of epoch_end results. Non-finite
    losses or gradients abort with a RuntimeError naming the epoch.
    """
    params = model.parameters()
    adam = nn.AdamState(params, step_size=step_size)
    n = train_x.shape[0]
    kw = 1.0 / n if kl_weight is None else float(kl_weight)
    rows = []
    step = 0
    for epoch in range(epochs):
        order = data_rng.child(epoch).permutation(n)
        nll_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            kl_now = model.kl() if kw != 0.0 else 0.0
            try:
                loss, grads = nn.elbo_step(
                    model, (train_x[idx], train_y[idx]), n,
                    step_rng.child(step), kl_weight=kl_weight)
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: {exc}") from exc
            if frozen:
                _apply_freeze(grads, frozen)
            nn.adam_step(params, grads, adam)
            nll_sum += (loss - kw * kl_now) * idx.size
            step += 1
        if epoch_end is not None:
            rows.append(epoch_end(epoch, nll_sum / n, model.kl()))
    return rows


REGRESSION_COLUMNS = ("epoch", "elbo", "nll", "kl", "test_ll")
CLASSIFICATION_COLUMNS = ("epoch", "elbo", "nll", "kl", "accuracy")


def _make_deterministic(model):
    """Collapse the posterior noise of a regression model in place.

    Concentrations are pinned huge and every log-variance tiny, then
    held there; what remains trainable are the direction and radial
    means, the biases, and the precision, so training reduces to fitting
    a deterministic network. Returns the freeze masks.
    """
    frozen = {}
    for i, st in enumerate(model.stages):
        w = st.weights
        if isinstance(w, RdpLayer):
            w.kappa_raw[0] = _softplus_inv(1e9)
            frozen[f"s{i}.kappa_raw"] = None
            for name in ("row_radial_raw", "col_radial_raw"):
                raw = getattr(w, name)
                if raw is None:
                    continue
                raw[:, 1] = _TINY_LOG_S2
                raw[:, 3] = _TINY_LOG_S2
                mask = np.zeros(raw.shape, dtype=bool)
                mask[:, 1] = mask[:, 3] = True
                frozen[f"s{i}.{name}"] = mask
            for name in ("scale_row_raw", "scale_col_raw"):
                raw = getattr(w, name)
                if raw is None:
                    continue
                raw[1] = raw[3] = _TINY_LOG_S2
                mask = np.zeros(4, dtype=bool)
                mask[1] = mask[3] = True
                frozen[f"s{i}.{name}"] = mask
        else:
            w.log_sigma2[...] = _TINY_LOG_S2
            frozen[f"s{i}.log_sigma2"] = None
    return frozen


def train_regression(split, *, seed, epochs=200, batch_size=32,
                     step_size=1e-3, hidden=50, kappa_p=1e-3, gamma=1.0,
                     kl_weight=None, eval_samples=20, metrics_path=None,
                     deterministic=False):
    """The regression protocol on a standardized DatasetSplit.

    Trains the n_in-hidden-1 model by minibatch Adam on the single-sample
    objective, evaluating the test log-likelihood (original units,
    ``eval_samples`` posterior draws) after every epoch. Metric rows hold
    (epoch, elbo, nll, kl, test_ll) where elbo is the negative per-point
    objective, nll the epoch mean expected negative log-likelihood, and
    kl the total divergence in nats at epoch end.

    ``deterministic=True`` collapses the posterior noise, freezes it, and
    drops the KL term: the protocol then fits a deterministic network by
    maximum likelihood (the classical reduction used as a sanity check).

    Returns (model, metric rows); ``metrics_path`` additionally writes
    the rows as CSV, atomically.
    """
    rng = RngStream(derive_seed(seed, "regression"))
    model = build_regression_model(split.train_x.shape[1], hidden,
                                   rng.child(0), kappa_p=kappa_p, gamma=gamma)
    frozen = None
    if deterministic:
        frozen = _make_deterministic(model)
        kl_weight = 0.0
    n = split.train_x.shape[0]
    kw = (1.0 / n) if kl_weight is None else float(kl_weight)
    eval_rng = rng.child(3)

    def at_epoch(epoch, nll, kl):
        tll = eval_test_ll(model, split, n_samples=eval_samples,
                           rng=eval_rng.child(epoch))
        return {"epoch": epoch, "elbo": -(nll + kw * kl), "nll": nll,
                "kl": kl, "test_ll": tll}

    rows = _train_loop(model, split.train_x, split.train_y, epochs=epochs,
                       batch_size=batch_size, step_size=step_size,
                       data_rng=rng.child(1), step_rng=rng.child(2),
                       kl_weight=kl_weight, frozen=frozen, epoch_end=at_epoch)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows, REGRESSION_COLUMNS)
    return model, rows


def train_classification(train_x, train_y, *, seed, arch="mlp:784-300-100-10",
                         epochs=40, batch_size=128, step_size=2e-3,
                         kappa_p=1e-3, gamma=1e-5, kl_weight=None,
                         select_window=10, input_hw=(28, 28),
                         accuracy_samples=1, metrics_path=None,
                         histogram_path=None):
    """The classification protocol: double grouping everywhere.

    Trains on the cross-entropy expected NLL and keeps the state with the
    best training NLL over the last ``select_window`` epochs. Metric rows
    hold (epoch, elbo, nll, kl, accuracy) with accuracy measured on the
    training inputs from ``accuracy_samples`` posterior draws; the
    histogram file gains one (epoch, layer, group_kind, log_mode) row per
    radial group per epoch.

    Returns (selected model, metric rows, info) where info records the
    selected epoch and its training NLL.
    """
    rng = RngStream(derive_seed(seed, "classification"))
    model = build_classification_model(arch, rng.child(0),
                                       kappa_p=kappa_p, gamma=gamma)
    x = np.asarray(train_x, dtype=np.float64)
    if model.stages[0].kind == "conv":
        x = x.reshape(x.shape[0], model.stages[0].weights.n_in,
                      int(input_hw[0]), int(input_hw[1]))
    else:
        x = x.reshape(x.shape[0], -1)
    y = np.asarray(train_y, dtype=np.int64)
    n = x.shape[0]
    kw = (1.0 / n) if kl_weight is None else float(kl_weight)
    eval_rng = rng.child(3)
    hist_rows = []
    best = {"nll": math.inf, "state": None, "epoch": None}

    def at_epoch(epoch, nll, kl):
        acc = eval_accuracy(model, x, y, eval_rng.child(epoch),
                            n_samples=accuracy_samples)
        for layer, kind, value in histogram_rows(model):
            hist_rows.append((epoch, layer, kind, value))
        if epoch >= epochs - select_window and nll < best["nll"]:
            best.update(nll=nll, state=model.state(), epoch=epoch)
        return {"epoch": epoch, "elbo": -(nll + kw * kl), "nll": nll,
                "kl": kl, "accuracy": acc}

    rows = _train_loop(model, x, y, epochs=epochs, batch_size=batch_size,
                       step_size=step_size, data_rng=rng.child(1),
                       step_rng=rng.child(2), kl_weight=kl_weight,
                       epoch_end=at_epoch)
    if best["state"] is not None:
        model = nn.Model.from_state(best["state"])
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows, CLASSIFICATION_COLUMNS)
    if histogram_path is not None:
        _write_csv(histogram_path, ("epoch",) + HISTOGRAM_COLUMNS, hist_rows)
    return model, rows, {"selected_epoch": best["epoch"],
                         "selected_nll": best["nll"]}


# ---------------------------------------------------------------------------
# evaluation


def _predict_batched(model, x, rng, batch_size=2048):
    # one weight draw shared by all batches
    mats, _ = nn._sample_model_weights(model, rng)
    outs = []
    for start in range(0, x.shape[0], batch_size):
        out, _, _ = nn._wire(model, nn.Graph(), x[start:start + batch_size],
                             mats)
        outs.append(out.value)
    return np.concatenate(outs, axis=0)


def eval_test_ll(model, split, n_samples=100, rng=None, per_point=False):
    """Average test log-likelihood in the original target units.

    Per test point: log of the mean over ``n_samples`` posterior weight
    draws of a Gaussian density at the drawn prediction, with variance
    b1/a1 (the posterior mean precision, inverted) mapped through the
    target scaler. Draw s uses rng.child(s), so a replayed stream
    reproduces the estimate exactly.
    """
    if n_samples < 1:
        raise ValueError("need at least one posterior draw")
    if rng is None:
        rng = RngStream(0)
    q = precision_posterior(model)
    scale = float(np.asarray(split.y_scaler.std))
    var = (q.b1 / q.a1) * scale ** 2
    y = split.y_scaler.inverse(split.test_y)
    lps = np.empty((n_samples, y.shape[0]))
    base = -0.5 * math.log(2.0 * math.pi * var)
    for s in range(n_samples):
        f = _predict_batched(model, split.test_x, rng.child(s)).reshape(-1)
        mean = split.y_scaler.inverse(f)
        lps[s] = base - (y - mean) ** 2 / (2.0 * var)
    top = lps.max(axis=0)
    ll = top + np.log(np.exp(lps - top).mean(axis=0))
    return ll if per_point else float(ll.mean())


def eval_rmse(model, split, n_samples=20, rng=None):
    """Root mean squared error of the posterior mean prediction, in the
    original target units."""
    if rng is None:
        rng = RngStream(0)
    acc = np.zeros(split.test_x.shape[0])
    for s in range(n_samples):
        acc += _predict_batched(model, split.test_x, rng.child(s)).reshape(-1)
    mean = split.y_scaler.inverse(acc / n_samples)
    y = split.y_scaler.inverse(split.test_y)
    return float(np.sqrt(np.mean((y - mean) ** 2)))


def eval_accuracy(model, x, y, rng=None, n_samples=25, batch_size=2048):
    """Classification accuracy of posterior-averaged class probabilities."""
    if rng is None:
        rng = RngStream(0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).reshape(-1)
    probs = np.zeros((x.shape[0], model.stages[-1].weights.n_out))
    for s in range(n_samples):
        logits = _predict_batched(model, x, rng.child(s),
                                  batch_size=batch_size)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs += e / e.sum(axis=1, keepdims=True)
    return float(np.mean(probs.argmax(axis=1) == y))


# ---------------------------------------------------------------------------
# structured pruning of whole models


def histogram_rows(model):
    """(layer, group_kind, log_mode) triples for every radial group."""
    rows = []
    for i, st in enumerate(model.stages):
        if not isinstance(st.weights, RdpLayer):
            continue
        row_modes, col_modes = group_log_modes(st.weights)
        if row_modes is not None:
            rows.extend((f"s{i}", "row", float(v)) for v in row_modes)
        if col_modes is not None:
            rows.extend((f"s{i}", "col", float(v)) for v in col_modes)
    return rows


def _prune_gaussian(layer, keep_rows, keep_cols):
    ix = np.ix_(np.flatnonzero(keep_rows), np.flatnonzero(keep_cols))
    return nn.GaussianLayer(layer.mean[ix], layer.log_sigma2[ix],
                            layer.prior_var)


def prune_model(model, *, threshold_row=None, threshold_col=None):
    """Prune whole units at the internal interfaces of a sequential model.

    A unit between stage k and k+1 survives when its producing row group
    and its consuming column group (where the groupings provide them)
    both sit at or above their side's threshold. Thresholds default to
    the largest-gap heuristic per layer side; explicit values override
    every layer. Model inputs and final outputs are interface and are
    never pruned, and a conv-to-dense flatten boundary keeps or drops
    dense inputs in whole channel blocks so the pruned model stays
    exactly wireable.

    Returns (pruned model, per-stage PruneMask list, retained triples).
    Raises when a threshold would empty an interface.
    """
    stages = model.stages
    n = len(stages)
    modes = []
    for st in stages:
        if isinstance(st.weights, RdpLayer):
            modes.append(group_log_modes(st.weights))
        else:
            modes.append((None, None))

    row_thr = [float("-inf")] * n
    col_thr = [float("-inf")] * n
    keep = []
    for k in range(n - 1):
        units = stages[k].weights.n_out
        mask = np.ones(units, dtype=bool)
        row_modes = modes[k][0]
        if row_modes is not None:
            t = (select_threshold(row_modes) if threshold_row is None
                 else float(threshold_row))
            row_thr[k] = t
            mask &= row_modes >= t
        col_modes = modes[k + 1][1]
        if col_modes is not None:
            t = (select_threshold(col_modes) if threshold_col is None
                 else float(threshold_col))
            col_thr[k + 1] = t
            passed = col_modes >= t
            n_in_next = stages[k + 1].weights.n_in
            if n_in_next == units:
                mask &= passed
            elif n_in_next % units == 0:
                block = n_in_next // units
                mask &= passed.reshape(units, block).any(axis=1)
            else:
                raise ValueError(
                    f"stage {k + 1} input width {n_in_next} is incompatible "
                    f"with {units} upstream units")
        if not mask.any():
            raise ValueError(
                f"pruning would remove every unit after stage {k}")
        keep.append(mask)

    new_stages = []
    masks = []
    retained = []
    prev = None
    for i, st in enumerate(stages):
        w = st.weights
        keep_rows = keep[i] if i < n - 1 else np.ones(w.n_out, dtype=bool)
        if prev is None:
            keep_cols = np.ones(w.n_in, dtype=bool)
        elif w.n_in == prev.size:
            keep_cols = prev
        else:
            keep_cols = np.repeat(prev, w.n_in // prev.size)
        mask = PruneMask(keep_rows, keep_cols, row_thr[i], col_thr[i])
        masks.append(mask)
        if isinstance(w, RdpLayer):
            new_w = prune_layer(w, mask).layer
        else:
            new_w = _prune_gaussian(w, keep_rows, keep_cols)
        new_stages.append(nn.Stage(st.kind, new_w, st.bias[keep_rows],
                                   activation=st.activation, pool=st.pool,
                                   padding=st.padding))
        if i < n - 1:
            retained.append((f"s{i}.out", int(keep_rows.sum()),
                             int(keep_rows.size)))
        prev = keep_rows
    praw = None if model.precision_raw is None else model.precision_raw.copy()
    pruned = nn.Model(new_stages, precision_raw=praw,
                      precision_prior=model.precision_prior)
    return pruned, masks, tuple(retained)


def compression_report(model, input_hw=None, retained=(), histograms=()):
    """CompressionReport for a live model's architecture."""
    counts = flops_report(model_architecture(model, input_hw))
    return counts._replace(retained=tuple(retained),
                           histograms=tuple(histograms))


# ---------------------------------------------------------------------------
# checkpoints and CSV emission


CHECKPOINT_FORMAT = "rdvi-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file that cannot be decoded safely."""


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_checkpoint(path, model, meta=None):
    """Versioned JSON snapshot of the full variational state.

    Plain-text floats round-trip float64 exactly, keys are sorted, and
    the write is atomic, so save/load/save is byte-identical. Non-finite
    parameters are refused rather than silently encoded.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": _jsonable(meta or {}),
        "model": _jsonable(model.state()),
    }
    try:
        text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)
    except ValueError as exc:
        raise CheckpointError(f"state is not JSON-encodable: {exc}")
    _atomic_write_text(path, text + "\n")


def load_checkpoint(path):
    """(model, meta) from a checkpoint written by save_checkpoint.

    Truncated or non-JSON files, missing markers, version mismatches,
    and malformed state all raise CheckpointError before any partial
    model escapes.
    """
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a complete JSON document: {exc}")
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing checkpoint format marker")
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} is not supported, this "
            f"build reads version {CHECKPOINT_VERSION}")
    try:
        model = nn.Model.from_state(doc["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed model state: {exc}")
    return model, doc.get("meta", {})


HISTOGRAM_COLUMNS = ("layer", "group_kind", "log_mode")


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(_csv_cell(v) for v in row) for row in rows)
    _atomic_write_text(path, "\n".join(lines) + "\n")


def write_metrics_csv(path, rows, columns):
    """Atomic CSV of per-epoch metric dicts, one column set per protocol."""
    _write_csv(path, columns, ([row[c] for c in columns] for row in rows))


def write_histogram_csv(path, rows):
    """Atomic CSV of (layer, group_kind, log_mode) triples."""
    _write_csv(path, HISTOGRAM_COLUMNS, rows)
