"""Gradient-based measurements of a trained classifier.

Covers loss-input gradients and their norm statistics (optionally
conditioned on attack outcome or prediction correctness), per-channel
gradient-magnitude histograms, saliency maps, oriented edge energy and
its log-log correlation with gradients, curvature via Hessian power
iteration, local linearity probes, and statistics along the attack
direction.

Conventions shared across the module: "success" of an example means the
model still classifies it correctly after the attack; log statistics
add a 1e-17 floor before taking logs; per-pixel maps pool multi-channel
gradients by channel-wise max; nothing here mutates the model, and
every randomized measurement takes an explicit rng or seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import edges
from . import nn
from .autodiff import Tensor
from .objectives import EdgeRegConfig, cross_entropy

__all__ = [
    "LOG_FLOOR",
    "GradientStats",
    "GeometryStats",
    "CurvatureResult",
    "LinearityProbe",
    "EdgeCorrelation",
    "loss_input_gradient",
    "partition_means",
    "gradient_norm_stats",
    "correctness_conditioned_norm_distribution",
    "channel_magnitude_histogram",
    "saliency_map",
    "oriented_energy",
    "edge_correlation",
    "normalized_curvature",
    "curvature_from_loss",
    "geometry_stats",
    "local_linearity_error",
    "attack_direction_sweep",
]

LOG_FLOOR = 1e-17


def _logits(net, x):
    if callable(net):
        return net(x)
    return nn.forward(net, x)


def _as_batch(x):
    arr = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def _dataset_arrays(dataset):
    if hasattr(dataset, "images"):
        images = dataset.images
        labels = dataset.labels
    else:
        images, labels = dataset
    images = images.numpy() if isinstance(images, Tensor) else np.asarray(images)
    return images.astype(np.float64), np.asarray(labels, dtype=np.int64)


def _per_example_ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


# ---------------------------------------------------------------------------
# First-order gradient measurements
# ---------------------------------------------------------------------------

def loss_input_gradient(net, x, y):
    """Per-example gradient of each example's own CE loss, shape of x."""
    batch, squeeze = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    with ad.Tape() as tape:
        xg = Tensor(batch, requires_grad=True)
        ce = cross_entropy(_logits(net, xg), y, 0.0)
        # batch rows are independent, so the gradient of B*mean is per-example
        (g,) = tape.gradient(ad.mul(ce, float(len(y))), [xg])
    out = g.numpy()
    return Tensor(out[0] if squeeze else out)


def _grad_l1_per_example(net, images, labels, batch_size=256):
    out = []
    for start in range(0, len(labels), batch_size):
        g = loss_input_gradient(net, Tensor(images[start:start + batch_size]),
                                labels[start:start + batch_size]).numpy()
        out.append(np.abs(g).reshape(len(g), -1).sum(axis=1))
    return np.concatenate(out)


def _log_histogram(values, bins=32):
    """Histogram over log10-spaced bins spanning the data; returns (edges, counts)."""
    safe = np.asarray(values, dtype=np.float64) + LOG_FLOOR
    lo, hi = np.log10(safe.min()), np.log10(safe.max())
    if hi - lo < 1e-9:
        hi = lo + 1e-9
    edges = np.logspace(lo, hi, bins + 1)
    edges[0] = min(edges[0], safe.min())
    edges[-1] = max(edges[-1], safe.max())
    counts, _ = np.histogram(safe, bins=edges)
    return edges, counts


@dataclass
class GradientStats:
    """Loss-gradient L1 norms, conditioned on attack outcome.

    "success" means the example is still correctly classified after the
    attack; conditionals over empty partitions are None, never zero.
    """

    mean_l1: float
    mean_l1_given_success: float | None
    mean_l1_given_failure: float | None
    histogram: tuple
    per_example_l1: np.ndarray
    success_mask: np.ndarray

    def to_dict(self):
        edges, counts = self.histogram
        return {
            "mean_l1": self.mean_l1,
            "mean_l1_given_success": self.mean_l1_given_success,
            "mean_l1_given_failure": self.mean_l1_given_failure,
            "histogram_edges": list(map(float, edges)),
            "histogram_counts": list(map(int, counts)),
            "n": int(len(self.per_example_l1)),
            "n_success": int(self.success_mask.sum()),
            "n_failure": int((~self.success_mask).sum()),
        }


def partition_means(values, success_mask):
    """(mean, mean given success, mean given failure); empty sides are None."""
    values = np.asarray(values, dtype=np.float64)
    success_mask = np.asarray(success_mask, dtype=bool)
    given_success = float(values[success_mask].mean()) if success_mask.any() else None
    given_failure = float(values[~success_mask].mean()) if (~success_mask).any() else None
    return float(values.mean()), given_success, given_failure


def gradient_norm_stats(net, dataset, attack_cfg, seed=0):
    """Clean-input gradient L1 norms partitioned by attack outcome."""
    from . import attacks

    images, labels = _dataset_arrays(dataset)
    l1 = _grad_l1_per_example(net, images, labels)
    _, mask = attacks.robust_accuracy(net, (images, labels), attack_cfg, seed=seed)
    mean, given_success, given_failure = partition_means(l1, mask)
    return GradientStats(mean, given_success, given_failure,
                         _log_histogram(l1), l1, mask)


def correctness_conditioned_norm_distribution(net, dataset, bins=32):
    """L1-norm histograms split by clean correctness, on shared bins.

    Returns (edges, counts_correct, counts_incorrect); the two count
    arrays sum to the unconditioned histogram bin by bin.
    """
    images, labels = _dataset_arrays(dataset)
    l1 = _grad_l1_per_example(net, images, labels)
    preds = []
    for start in range(0, len(labels), 256):
        preds.append(_logits(net, Tensor(images[start:start + 256])).numpy().argmax(axis=1))
    correct = np.concatenate(preds) == labels
    edges, _ = _log_histogram(l1, bins=bins)
    counts_correct, _ = np.histogram(l1[correct] + LOG_FLOOR, bins=edges)
    counts_incorrect, _ = np.histogram(l1[~correct] + LOG_FLOOR, bins=edges)
    return edges, counts_correct, counts_incorrect


def channel_magnitude_histogram(net, dataset, log10_range=(-12.0, 2.0), bins=28):
    """Distribution of |gradient| entries pooled per channel.

    Fixed log10 bins over ``log10_range``; entries below the range
    (zeros included) land in a separate underflow count. Returns
    (edges, counts[C, bins], underflow[C]).
    """
    images, labels = _dataset_arrays(dataset)
    c = images.shape[1]
    edges = np.logspace(log10_range[0], log10_range[1], bins + 1)
    counts = np.zeros((c, bins), dtype=np.int64)
    underflow = np.zeros(c, dtype=np.int64)
    for start in range(0, len(labels), 256):
        g = loss_input_gradient(net, Tensor(images[start:start + 256]),
                                labels[start:start + 256]).numpy()
        mags = np.abs(g)
        for ch in range(c):
            vals = mags[:, ch].reshape(-1)
            below = vals < edges[0]
            underflow[ch] += int(below.sum())
            h, _ = np.histogram(vals[~below], bins=edges)
            counts[ch] += h
    return edges, counts, underflow


def saliency_map(net, x, t):
    """Channel-max |d f(x)_t / dx| for one image; returns Tensor[H,W]."""
    batch, _ = _as_batch(x)
    if batch.shape[0] != 1:
        raise ValueError("saliency_map takes a single image")
    with ad.Tape() as tape:
        xg = Tensor(batch, requires_grad=True)
        logits = _logits(net, xg)
        if not 0 <= t < logits.shape[1]:
            raise ValueError(f"class {t} out of range")
        pick = np.zeros(logits.shape)
        pick[0, t] = 1.0
        score = ad.sum_(ad.mul(logits, ad.constant(pick)))
        (g,) = tape.gradient(score, [xg])
    return Tensor(np.abs(g.numpy()[0]).max(axis=0))


def oriented_energy(x, edge_filter="sobel", filter_sigma=1.0):
    """|g_u*x|^2 + |g_v*x|^2 over channels; accepts an EdgeRegConfig too."""
    if isinstance(edge_filter, EdgeRegConfig):
        cfg = edge_filter
    else:
        cfg = EdgeRegConfig(edge_filter=edge_filter, filter_sigma=filter_sigma)
    arr = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    return Tensor(edges.oriented_energy_map(arr, cfg.kernels()))


# ---------------------------------------------------------------------------
# Edge correlation
# ---------------------------------------------------------------------------

@dataclass
class EdgeCorrelation:
    """Per-image log-log Pearson correlations with oriented energy."""

    pearson_saliency: float
    pearson_lossgrad: float
    saliency_std: float
    lossgrad_std: float
    saliency_values: np.ndarray
    lossgrad_values: np.ndarray
    skipped: int

    def to_dict(self):
        return {
            "pearson_saliency": self.pearson_saliency,
            "pearson_lossgrad": self.pearson_lossgrad,
            "saliency_std": self.saliency_std,
            "lossgrad_std": self.lossgrad_std,
            "n": int(len(self.saliency_values)),
            "skipped": self.skipped,
        }


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return None
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def edge_correlation(net, dataset, cfg, batch_size=256):
    """corr(log map, log max(edge, clamp_floor)) per image, for both the
    true-class saliency map and the channel-max |loss gradient| map.

    Images where either log series is constant are skipped and counted.
    """
    if cfg.clamp_floor <= 0:
        raise ValueError("clamp_floor must be positive")
    images, labels = _dataset_arrays(dataset)
    kernels = cfg.kernels()
    sal_vals, lg_vals = [], []
    skipped = 0
    for start in range(0, len(labels), batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        g_loss = loss_input_gradient(net, Tensor(xb), yb).numpy()
        for i in range(len(yb)):
            edge = np.maximum(edges.oriented_energy_map(xb[i], kernels), cfg.clamp_floor)
            log_edge = np.log(edge).reshape(-1)
            sal = saliency_map(net, Tensor(xb[i]), int(yb[i])).numpy()
            lg = np.abs(g_loss[i]).max(axis=0)
            r_sal = _pearson(np.log(sal + LOG_FLOOR).reshape(-1), log_edge)
            r_lg = _pearson(np.log(lg + LOG_FLOOR).reshape(-1), log_edge)
            if r_sal is None or r_lg is None:
                skipped += 1
                continue
            sal_vals.append(r_sal)
            lg_vals.append(r_lg)
    sal_vals = np.asarray(sal_vals)
    lg_vals = np.asarray(lg_vals)
    if len(sal_vals) == 0:
        return EdgeCorrelation(float("nan"), float("nan"), float("nan"), float("nan"),
                               sal_vals, lg_vals, skipped)
    return EdgeCorrelation(float(sal_vals.mean()), float(lg_vals.mean()),
                           float(sal_vals.std()), float(lg_vals.std()),
                           sal_vals, lg_vals, skipped)


# ---------------------------------------------------------------------------
# Second-order geometry
# ---------------------------------------------------------------------------

@dataclass
class CurvatureResult:
    """One example's geometry: gradient norm, Hessian spectral norm, ratio.

    curvature is None when the gradient norm is below 1e-12 (the ratio
    is undefined there); eigen_sign carries the sign of the dominant
    eigenvalue, hess_spec its magnitude.
    """

    grad_l2: float
    hess_spec: float
    curvature: float | None
    eigen_sign: int
    iterations: int
    converged: bool


def curvature_from_loss(loss_fn, x, power_iters=20, init="gradient", rng=None,
                        rel_tol=1e-6):
    """Power-iteration spectral norm of d2(loss)/dx2 at x, plus the ratio.

    loss_fn maps a requires_grad Tensor shaped like x to a scalar on the
    active tape. init "gradient" starts from the normalized gradient;
    "random" draws a unit vector from rng.
    """
    x0 = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    with ad.Tape() as tape:
        xg = Tensor(x0, requires_grad=True)
        loss = loss_fn(xg)
        (g,) = tape.gradient(loss, [xg], create_graph=True)
        g_np = g.numpy()
        grad_l2 = float(np.linalg.norm(g_np))
        if init == "gradient":
            if grad_l2 < 1e-12:
                return CurvatureResult(grad_l2, 0.0, None, 0, 0, False)
            v = g_np / grad_l2
        elif init == "random":
            if rng is None:
                raise ValueError("random init needs an rng")
            v = rng.normal(size=x0.shape)
            v /= np.linalg.norm(v)
        else:
            raise ValueError(f"unknown init {init!r}")

        def hvp(vec):
            inner = ad.sum_(ad.mul(g, ad.constant(vec)))
            return tape.gradient(inner, [xg])[0].numpy()

        rayleigh = None
        iterations = 0
        converged = False
        for _ in range(power_iters):
            iterations += 1
            hv = hvp(v)
            current = float((v * hv).reshape(-1).sum())
            norm_hv = np.linalg.norm(hv)
            if norm_hv < 1e-30:
                rayleigh = 0.0
                converged = True
                break
            v = hv / norm_hv
            if rayleigh is not None and abs(current - rayleigh) <= rel_tol * abs(current):
                rayleigh = current
                converged = True
                break
            rayleigh = current
    hess_spec = abs(rayleigh)
    sign = int(np.sign(rayleigh))
    curvature = hess_spec / grad_l2 if grad_l2 >= 1e-12 else None
    return CurvatureResult(grad_l2, hess_spec, curvature, sign, iterations, converged)


def normalized_curvature(net, x, y, power_iters=20, init="gradient", rng=None,
                         rel_tol=1e-6):
    """Curvature of the CE loss at one example."""
    batch, _ = _as_batch(x)
    if batch.shape[0] != 1:
        raise ValueError("normalized_curvature takes a single example")
    y_arr = np.asarray([int(y)], dtype=np.int64)

    def loss_fn(xg):
        return cross_entropy(_logits(net, xg), y_arr, 0.0)

    return curvature_from_loss(loss_fn, batch, power_iters=power_iters, init=init,
                               rng=rng, rel_tol=rel_tol)


@dataclass
class GeometryStats:
    """Dataset-level aggregation of CurvatureResult values."""

    grad_l2: float
    hess_spec: float
    curvature: float
    per_example: list = field(repr=False)
    skipped: int = 0

    def log10_distributions(self):
        usable = [r for r in self.per_example if r.curvature is not None]
        return {
            "grad_l2": np.log10([r.grad_l2 + LOG_FLOOR for r in usable]),
            "hess_spec": np.log10([r.hess_spec + LOG_FLOOR for r in usable]),
            "curvature": np.log10([r.curvature + LOG_FLOOR for r in usable]),
        }

    def to_dict(self):
        return {
            "grad_l2": self.grad_l2,
            "hess_spec": self.hess_spec,
            "curvature": self.curvature,
            "n": len(self.per_example),
            "skipped": self.skipped,
        }


def geometry_stats(net, dataset, power_iters=20, init="gradient", seed=0,
                   max_examples=None):
    """Mean gradient norm, Hessian norm, and normalized curvature over a dataset."""
    images, labels = _dataset_arrays(dataset)
    if max_examples is not None:
        images, labels = images[:max_examples], labels[:max_examples]
    rng = np.random.default_rng(seed)
    results = []
    for i in range(len(labels)):
        results.append(normalized_curvature(net, Tensor(images[i]), labels[i],
                                            power_iters=power_iters, init=init, rng=rng))
    usable = [r for r in results if r.curvature is not None]
    skipped = len(results) - len(usable)
    if not usable:
        return GeometryStats(float("nan"), float("nan"), float("nan"), results, skipped)
    return GeometryStats(float(np.mean([r.grad_l2 for r in usable])),
                         float(np.mean([r.hess_spec for r in usable])),
                         float(np.mean([r.curvature for r in usable])),
                         results, skipped)


# ---------------------------------------------------------------------------
# Linearity and attack-direction probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearityProbe:
    samples_per_example: int = 8
    epsilon: float = 4.0 / 255.0

    def __post_init__(self):
        if self.samples_per_example < 1:
            raise ValueError("samples_per_example must be at least 1")


def _probe_values(net, arr, y):
    vals = _logits(net, Tensor(arr)).numpy()
    if y is None:
        # net maps inputs straight to per-example scalars
        return vals.reshape(len(arr), -1)[:, 0] if vals.ndim > 1 else vals.reshape(-1)
    return _per_example_ce(vals, y)


def local_linearity_error(net, x, y, probe, rng):
    """Monte Carlo mean of the squared interpolation defect of the loss.

    For each sample: alpha ~ U(0,1), eta1, eta2 ~ U(-eps, eps), defect =
    alpha L(x+eta1) + (1-alpha) L(x+eta2) - L(x + alpha eta1 + (1-alpha) eta2).
    Returns the per-example mean of defect^2. Only forward passes.

    With labels, L is the per-example CE loss; with y=None, net itself
    must map inputs to per-example scalars, which are probed directly
    (so an affine function scores exactly zero for any draw).
    """
    batch, _ = _as_batch(x)
    if y is not None:
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(batch)
    total = np.zeros(n)
    for _ in range(probe.samples_per_example):
        alpha = rng.uniform(0.0, 1.0, size=(n,) + (1,) * (batch.ndim - 1))
        eta1 = rng.uniform(-probe.epsilon, probe.epsilon, size=batch.shape)
        eta2 = rng.uniform(-probe.epsilon, probe.epsilon, size=batch.shape)
        l1 = _probe_values(net, batch + eta1, y)
        l2 = _probe_values(net, batch + eta2, y)
        mid = batch + alpha * eta1 + (1.0 - alpha) * eta2
        lmid = _probe_values(net, mid, y)
        a = alpha.reshape(-1)
        defect = a * l1 + (1.0 - a) * l2 - lmid
        total += defect * defect
    return total / probe.samples_per_example


def attack_direction_sweep(net, dataset, attack_cfg, eps_grid, seed=0,
                           power_iters=10, max_examples=None):
    """(loss, grad L1, curvature) along x + (t/eps)*(attack(x) - x).

    The attack runs once at the config's budget; grid values interpolate
    (and extrapolate past the budget if the grid goes beyond it).
    """
    from . import attacks

    images, labels = _dataset_arrays(dataset)
    if max_examples is not None:
        images, labels = images[:max_examples], labels[:max_examples]
    base = attack_cfg.epsilon
    if base <= 0:
        raise ValueError("attack_direction_sweep needs a positive base epsilon")
    result = attacks.pgd(net, Tensor(images), labels, attack_cfg, seed=seed,
                         evaluate=False)
    delta = result.adversarial.numpy() - images
    rows = []
    for t in eps_grid:
        x_t = np.clip(images + (float(t) / base) * delta, 0.0, 1.0)
        logits = []
        for start in range(0, len(labels), 256):
            logits.append(_logits(net, Tensor(x_t[start:start + 256])).numpy())
        loss = float(_per_example_ce(np.concatenate(logits), labels).mean())
        grad_l1 = float(_grad_l1_per_example(net, x_t, labels).mean())
        curvatures = []
        for i in range(len(labels)):
            r = normalized_curvature(net, Tensor(x_t[i]), labels[i],
                                     power_iters=power_iters)
            if r.curvature is not None:
                curvatures.append(r.curvature)
        curvature = float(np.mean(curvatures)) if curvatures else float("nan")
        rows.append({"eps": float(t), "loss": loss, "grad_l1": grad_l1,
                     "curvature": curvature})
    return rows
