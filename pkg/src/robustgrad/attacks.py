"""L-infinity attacks and evaluation drivers.

All budgets, steps, and clamps live in raw pixel space: networks here
consume [0, 1] pixels (any normalization happens inside the model), so
an epsilon of 4/255 means exactly that in the perturbation tensor.

Every attack records forward/gradient work on its own short-lived
tapes, so calling one inside a training objective leaves the caller's
parameter tape untouched. Restart r of every run draws randomness from
``default_rng([seed, r])``; a single-restart run therefore follows
restart 0 of a multi-restart run exactly, and keeping the first
successful restart (else the max-loss one) per example makes more
restarts never weaker.

``net`` may be a Network or any callable mapping a Tensor batch to
logits (used by gradient-masking fixtures).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeMismatchError, Tensor
from .objectives import cross_entropy

__all__ = [
    "AttackConfig",
    "AttackResult",
    "fgsm",
    "pgd",
    "pgd_l2_direction",
    "random_search_attack",
    "transfer_attack",
    "robust_accuracy",
    "epsilon_sweep",
    "write_attack_csv",
    "export_adversarial_tensors",
]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float = 1.0 / 255.0
    iterations: int = 10
    restarts: int = 1
    random_init: bool = False
    direction: str = "sign"
    loss: str = "cross_entropy"
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.iterations > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive when iterating")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.direction not in ("sign", "l2"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.loss != "cross_entropy":
            raise ValueError("only the cross_entropy attack loss is supported")


@dataclass
class AttackResult:
    """adversarial inputs, per-example success, loss trace, pass tally.

    success is None when the run skipped its final evaluation forward
    (the adversarial-training fast path). loss_trace follows restart 0:
    entry i is the mean loss at iterate i, with the final iterate
    appended when evaluation runs.
    """

    adversarial: Tensor
    success: np.ndarray | None
    loss_trace: np.ndarray
    pass_count: ad.PassCounter


def _logits(net, x):
    if callable(net):
        return net(x)
    return nn.forward(net, x)


def _per_example_ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def _loss_and_grad(net, x_np, y):
    """Mean-CE input gradient plus per-example losses at x_np."""
    with ad.Tape() as tape:
        xg = Tensor(x_np, requires_grad=True)
        logits = _logits(net, xg)
        loss = cross_entropy(logits, y, 0.0)
        (g,) = tape.gradient(loss, [xg])
    return g.numpy(), _per_example_ce(logits.numpy(), y), logits.numpy()


def _predict(net, x_np):
    logits = _logits(net, Tensor(x_np)).numpy()
    return logits.argmax(axis=1), logits


def _project(x_adv, x0, epsilon, clamp):
    delta = np.clip(x_adv - x0, -epsilon, epsilon)
    return np.clip(x0 + delta, clamp[0], clamp[1])


def _run_restart(net, x0, y, cfg, step_size, rng, trace_sink):
    x_t = x0.copy()
    if cfg.random_init and cfg.epsilon > 0:
        x_t = _project(x_t + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x_t.shape),
                       x0, cfg.epsilon, cfg.clamp)
    for _ in range(cfg.iterations):
        grad, losses, _ = _loss_and_grad(net, x_t, y)
        if trace_sink is not None:
            trace_sink.append(float(losses.mean()))
        if cfg.direction == "sign":
            step = step_size * np.sign(grad)
        else:
            norms = np.sqrt((grad * grad).reshape(len(grad), -1).sum(axis=1))
            scale = np.where(norms > 1e-20, step_size / np.maximum(norms, 1e-20), 0.0)
            step = grad * scale.reshape(-1, *([1] * (grad.ndim - 1)))
        x_t = _project(x_t + step, x0, cfg.epsilon, cfg.clamp)
    return x_t


def pgd(net, x, y, cfg, seed=0, evaluate=True, step_size=None):
    """Iterated ascent with per-step L-infinity projection and clamping."""
    if cfg.restarts > 1 and not evaluate:
        raise ValueError("restart aggregation needs the final evaluation")
    x0 = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    step = cfg.step_size if step_size is None else step_size
    with ad.count_passes() as counter:
        best_adv = None
        best_loss = None
        best_success = None
        trace = []
        for r in range(cfg.restarts):
            rng = np.random.default_rng([seed, r])
            adv = _run_restart(net, x0, y, cfg, step, rng, trace if r == 0 else None)
            if not evaluate:
                best_adv = adv
                continue
            preds, logits = _predict(net, adv)
            success = preds != y
            losses = _per_example_ce(logits, y)
            if r == 0:
                trace.append(float(losses.mean()))
                best_adv, best_loss, best_success = adv, losses, success
            else:
                # replace only while the best so far is unsuccessful:
                # first success wins, else highest loss
                better = ~best_success & (success | (losses > best_loss))
                best_adv = np.where(better.reshape(-1, *([1] * (adv.ndim - 1))), adv, best_adv)
                best_loss = np.where(better, losses, best_loss)
                best_success = best_success | success
    return AttackResult(Tensor(best_adv), best_success, np.asarray(trace), counter)


def fgsm(net, x, y, cfg, seed=0):
    """Single signed-gradient step; with random_init, start inside the ball."""
    if cfg.iterations != 1:
        raise ValueError("fgsm requires cfg.iterations == 1")
    step = cfg.step_size if cfg.random_init else cfg.epsilon
    one_step = replace(cfg, direction="sign")
    return pgd(net, x, y, one_step, seed=seed, evaluate=True, step_size=step)


def pgd_l2_direction(net, x, y, cfg, seed=0, evaluate=True):
    """PGD stepping along gradient/||gradient||_2, same projection and clamp."""
    if cfg.direction != "l2":
        raise ValueError("pgd_l2_direction requires cfg.direction == 'l2'")
    return pgd(net, x, y, cfg, seed=seed, evaluate=evaluate)


def random_search_attack(net, x, y, cfg, rng):
    """Gradient-free square-patch search at the epsilon boundary.

    Each query proposes, per example, one axis-aligned square patch set
    to +-epsilon per channel and keeps the proposal where the loss
    increased. The patch side starts at half the image side and halves
    every iterations/5 queries (floor 1 pixel). Never calls gradient().
    """
    x0 = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    b, c, h, w = x0.shape
    with ad.count_passes() as counter:
        preds, logits = _predict(net, x0)
        best_loss = _per_example_ce(logits, y)
        trace = [float(best_loss.mean())]
        delta = np.zeros_like(x0)
        budget = cfg.iterations
        shrink_every = max(1, budget // 5)
        side = max(1, min(h, w) // 2)
        for q in range(budget):
            if q > 0 and q % shrink_every == 0:
                side = max(1, side // 2)
            cand = delta.copy()
            rows = rng.integers(0, h - side + 1, size=b)
            cols = rng.integers(0, w - side + 1, size=b)
            signs = rng.choice([-1.0, 1.0], size=(b, c))
            for i in range(b):
                patch = signs[i].reshape(c, 1, 1) * cfg.epsilon
                cand[i, :, rows[i]:rows[i] + side, cols[i]:cols[i] + side] = patch
            x_cand = np.clip(x0 + cand, cfg.clamp[0], cfg.clamp[1])
            losses = _per_example_ce(_predict(net, x_cand)[1], y)
            improved = losses > best_loss
            delta[improved] = cand[improved]
            best_loss = np.where(improved, losses, best_loss)
            trace.append(float(best_loss.mean()))
        adv = np.clip(x0 + delta, cfg.clamp[0], cfg.clamp[1])
        preds, _ = _predict(net, adv)
    return AttackResult(Tensor(adv), preds != y, np.asarray(trace), counter)


def transfer_attack(source, target, x, y, cfg, seed=0):
    """Generate on source, judge on target."""
    src_shape = getattr(getattr(source, "config", None), "input_shape", None)
    tgt_shape = getattr(getattr(target, "config", None), "input_shape", None)
    if src_shape is not None and tgt_shape is not None and src_shape != tgt_shape:
        raise ShapeMismatchError(f"source {src_shape} vs target {tgt_shape}")
    result = pgd(source, x, y, cfg, seed=seed, evaluate=True)
    with ad.count_passes() as counter:
        preds, _ = _predict(target, result.adversarial.numpy())
    tally = ad.PassCounter()
    tally.forward = result.pass_count.forward + counter.forward
    tally.backward = result.pass_count.backward + counter.backward
    return AttackResult(result.adversarial, preds != np.asarray(y), result.loss_trace, tally)


_ATTACK_FNS = {"pgd": pgd, "fgsm": fgsm, "pgd_l2": pgd_l2_direction}


def robust_accuracy(net, dataset, cfg, seed=0, batch_size=256, attack="pgd"):
    """Accuracy after attack, plus the per-example correct-after-attack mask."""
    images, labels = _dataset_arrays(dataset)
    if len(labels) == 0:
        raise ValueError("dataset is empty")
    attack_fn = _ATTACK_FNS[attack]
    masks = []
    for start in range(0, len(labels), batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        result = attack_fn(net, Tensor(xb), yb, cfg, seed=seed + start)
        masks.append(~result.success)
    mask = np.concatenate(masks)
    return float(mask.mean()), mask


def epsilon_sweep(net, dataset, base_cfg, eps_grid, seed=0, attack="pgd"):
    """Robust accuracy per epsilon; steps scale with the epsilon ratio."""
    eps_grid = list(eps_grid)
    if any(b < a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps_grid must be sorted ascending")
    curve = []
    for eps in eps_grid:
        if base_cfg.epsilon > 0:
            step = base_cfg.step_size * (eps / base_cfg.epsilon)
        else:
            step = eps / 4.0
        cfg = replace(base_cfg, epsilon=float(eps),
                      step_size=float(step) if step > 0 else base_cfg.step_size)
        acc, _ = robust_accuracy(net, dataset, cfg, seed=seed, attack=attack)
        curve.append((float(eps), acc))
    return curve


def _dataset_arrays(dataset):
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images.numpy() if isinstance(dataset.images, Tensor)
                          else dataset.images, dtype=np.float64), np.asarray(dataset.labels)
    images, labels = dataset
    images = images.numpy() if isinstance(images, Tensor) else np.asarray(images)
    return images.astype(np.float64), np.asarray(labels)


def write_attack_csv(path, net, x, y, result):
    """Per-example report: correctness, losses, and clean gradient norms."""
    x_np = np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    grad, loss_clean, logits_clean = _loss_and_grad(net, x_np, y)
    clean_correct = logits_clean.argmax(axis=1) == y
    adv_np = result.adversarial.numpy()
    preds_adv, logits_adv = _predict(net, adv_np)
    loss_adv = _per_example_ce(logits_adv, y)
    grad_l1 = np.abs(grad).reshape(len(y), -1).sum(axis=1)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "clean_correct", "adv_correct",
                         "loss_clean", "loss_adv", "grad_l1"])
        for i in range(len(y)):
            writer.writerow([i, int(clean_correct[i]), int(preds_adv[i] == y[i]),
                             repr(float(loss_clean[i])), repr(float(loss_adv[i])),
                             repr(float(grad_l1[i]))])


def export_adversarial_tensors(path, result, y):
    """Adversarial batch in the checkpoint tensor-table format."""
    from . import serialize

    tensors = {"adversarial": result.adversarial.numpy(),
               "labels": np.asarray(y, dtype=np.int64)}
    if result.success is not None:
        tensors["attack_success"] = result.success.astype(np.uint8)
    serialize.save_tensors(path, {"kind": "adversarial-batch"}, tensors)
