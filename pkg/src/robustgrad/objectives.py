"""Training objectives: cross entropy, the input-gradient-norm penalty,
edge-alignment regularization, adversarial training, and the per-batch
pass-count cost model.

The gradient-norm objective is

    lambda_ce * L_CE(f(x'), y) + lambda_gn * (eps/sigma) * ||w_c . d L_CE/dx'||_1

with the L1 norm taken over all channels and pixels of one example and
averaged over the batch, computed on natural (optionally noised)
inputs. Differentiating it with respect to parameters requires the
backward pass itself to be differentiable, which the tape provides via
``create_graph``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import edges
from .autodiff import Tensor
from .nn import forward

__all__ = [
    "LabelOutOfRange",
    "GradNormConfig",
    "EdgeRegConfig",
    "AdvTrainConfig",
    "cross_entropy",
    "gradnorm_loss",
    "edge_reg_loss",
    "adv_train_loss",
    "pass_count",
]

log = logging.getLogger(__name__)


class LabelOutOfRange(Exception):
    """A label lies outside [0, num_classes)."""


@dataclass(frozen=True)
class GradNormConfig:
    """Weights and scaling for the gradient-norm objective.

    input_noise: None, ("gaussian", std), or ("adversarial", AttackConfig);
    applied to x before both loss terms.
    """

    lambda_ce: float = 0.8
    lambda_gn: float = 1.2
    epsilon: float = 4.0 / 255.0
    sigma: float = 0.225
    channel_weights: tuple | None = None
    input_noise: tuple | None = None
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_gn < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.channel_weights is not None and any(w <= 0 for w in self.channel_weights):
            raise ValueError("channel_weights must be positive")
        if self.input_noise is not None and self.input_noise[0] not in ("gaussian", "adversarial"):
            raise ValueError(f"unknown input_noise kind {self.input_noise[0]!r}")


@dataclass(frozen=True)
class EdgeRegConfig:
    """Edge-alignment regularizer: class sampling and target filter."""

    temperature: float = 0.5
    edge_filter: str = "sobel"
    filter_sigma: float = 1.0
    clamp_floor: float = 1e-3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.edge_filter not in ("sobel", "gaussian-derivative"):
            raise ValueError(f"unknown edge_filter {self.edge_filter!r}")

    def kernels(self):
        if self.edge_filter == "sobel":
            return edges.sobel_kernels()
        return edges.gaussian_derivative_kernels(self.filter_sigma)


@dataclass(frozen=True)
class AdvTrainConfig:
    """Adversarial training: the inner-maximization attack plus smoothing."""

    attack: object
    label_smoothing: float = 0.0

    def __post_init__(self):
        if getattr(self.attack, "direction", "sign") != "sign":
            raise ValueError("adversarial training uses the L-infinity sign attack")


def _check_labels(y, num_classes):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(logits, y, smoothing=0.0):
    """Mean smoothed negative log-likelihood over the batch.

    The smoothed target distribution is (1-s)*onehot + s/K, equivalently
    (1-s)*CE(y) + s*(mean of CE over all classes).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    b, k = logits.shape
    y = _check_labels(y, k)
    target = np.full((b, k), smoothing / k, dtype=np.float64)
    target[np.arange(b), y] += 1.0 - smoothing
    logp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.mean(ad.sum_(ad.mul(ad.constant(target), logp), axis=1)))


def _require_tape():
    tape = ad.active_tape()
    if tape is None:
        raise ad.AutodiffError("objective needs an active Tape")
    return tape


def gradnorm_loss(net, x, y, cfg, rng=None):
    """Cross entropy plus the scaled L1 norm of the loss-input gradient."""
    tape = _require_tape()
    if cfg.input_noise is not None:
        kind = cfg.input_noise[0]
        if kind == "gaussian":
            if rng is None:
                raise ValueError("gaussian input_noise needs an rng")
            x = Tensor(x.numpy() + rng.normal(0.0, cfg.input_noise[1], size=x.shape))
        else:
            from . import attacks  # attacks imports this module; resolve lazily

            x = attacks.pgd(net, x, y, cfg.input_noise[1], evaluate=False).adversarial
    xg = Tensor(x.numpy(), requires_grad=True)
    logits = forward(net, xg)
    ce = cross_entropy(logits, y, cfg.label_smoothing)
    if cfg.lambda_gn == 0.0:
        return ad.mul(ce, cfg.lambda_ce) if cfg.lambda_ce != 1.0 else ce
    (gx,) = tape.gradient(ce, [xg], create_graph=True)
    if cfg.channel_weights is not None:
        c = len(cfg.channel_weights)
        if c != x.shape[1]:
            raise ValueError(f"{c} channel weights for {x.shape[1]} channels")
        w_c = ad.constant(np.asarray(cfg.channel_weights, dtype=np.float64).reshape(1, c, 1, 1))
        gx = ad.mul(gx, w_c)
    batch = x.shape[0]
    per_example_l1 = ad.sum_(ad.reshape(ad.abs_(gx), (batch, gx.size // batch)), axis=1)
    penalty = ad.mean(per_example_l1)
    return ad.add(ad.mul(ce, cfg.lambda_ce),
                  ad.mul(penalty, cfg.lambda_gn * cfg.epsilon / cfg.sigma))


def _sample_classes(probs, rng):
    """One categorical draw per row via inverse CDF on a single uniform."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def edge_reg_loss(net, x, cfg, rng):
    """Mean (1 - cosine) between sampled-class input gradients and edge energy.

    Classes are sampled per example from softmax(f(x)/temperature). The
    target is the oriented-energy map of the image, shared across input
    channels; only gradient direction is penalized, never magnitude.
    Examples where either vector is near zero are skipped and counted in
    the log.
    """
    tape = _require_tape()
    xg = Tensor(x.numpy(), requires_grad=True)
    logits = forward(net, xg)
    probs = _softmax_np(logits.numpy() / cfg.temperature)
    t = _sample_classes(probs, rng)
    b, k = logits.shape
    picked = np.zeros((b, k), dtype=np.float64)
    picked[np.arange(b), t] = 1.0
    score = ad.sum_(ad.mul(logits, ad.constant(picked)))
    (gx,) = tape.gradient(score, [xg], create_graph=True)

    kernels = cfg.kernels()
    c = x.shape[1]
    targets = np.stack([edges.oriented_energy_map(img, kernels) for img in x.numpy()])
    target_flat = np.repeat(targets[:, None], c, axis=1).reshape(b, -1)
    target_norms = np.linalg.norm(target_flat, axis=1)

    grad_flat = ad.reshape(gx, (b, gx.size // b))
    grad_norms = np.linalg.norm(gx.numpy().reshape(b, -1), axis=1)
    keep = (grad_norms >= 1e-12) & (target_norms >= 1e-12)
    skipped = int(b - keep.sum())
    if skipped:
        log.info("edge_reg_loss skipped %d/%d near-zero examples", skipped, b)
    if not keep.any():
        return ad.constant(0.0)

    tgt = ad.constant(target_flat)
    dots = ad.sum_(ad.mul(grad_flat, tgt), axis=1)
    g_norm = ad.sqrt(ad.sum_(ad.mul(grad_flat, grad_flat), axis=1))
    cos = ad.div(dots, ad.mul(g_norm, ad.constant(target_norms)))
    one_minus = ad.sub(1.0, cos)
    mask = ad.constant(keep.astype(np.float64))
    return ad.div(ad.sum_(ad.mul(one_minus, mask)), float(keep.sum()))


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def adv_train_loss(net, x, y, cfg, seed=0, step_size=None):
    """Cross entropy at attack-perturbed inputs (inner maximization detached).

    The attack records onto its own tapes, so nothing of the inner
    maximization reaches the caller's parameter tape. step_size overrides
    the configured attack step, which lets trainers warm it up.
    """
    from . import attacks

    result = attacks.pgd(net, x, y, cfg.attack, seed=seed, evaluate=False,
                         step_size=step_size)
    adv = Tensor(result.adversarial.numpy())
    return cross_entropy(forward(net, adv), y, cfg.label_smoothing)


def pass_count(objective, attack_steps=3):
    """Measured network passes per batch for an objective's training step.

    Runs the objective plus its parameter-gradient sweep on a small
    fixture and reports the instrumented tally; nothing is hardcoded.
    """
    from . import attacks
    from .nn import NetworkConfig, init_network

    cfg = NetworkConfig(
        layers=({"kind": "conv", "out_channels": 2, "kernel": 3, "padding": 1},),
        activation="gelu", num_classes=2, input_shape=(1, 6, 6))
    net = init_network(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(size=(2, 1, 6, 6)))
    y = np.array([0, 1])
    params = list(net.params.values())
    with ad.count_passes() as counter:
        with ad.Tape() as tape:
            if objective == "natural":
                loss = cross_entropy(forward(net, x), y)
            elif objective == "gradnorm":
                loss = gradnorm_loss(net, x, y, GradNormConfig())
            elif objective == "advtrain":
                atk = attacks.AttackConfig(epsilon=0.1, step_size=0.05,
                                           iterations=attack_steps, random_init=False)
                loss = adv_train_loss(net, x, y, AdvTrainConfig(attack=atk))
            else:
                raise ValueError(f"unknown objective {objective!r}")
            tape.gradient(loss, params)
    return counter.total
