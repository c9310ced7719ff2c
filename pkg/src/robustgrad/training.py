"""Training harness: AdamW, cosine warmup schedule, EMA, epoch loop.

The loop trains one of five objectives (natural, gradnorm, edgereg,
advtrain, fgsm-train), warms the regularizer weight and the attack step
linearly over the first epochs, evaluates clean and PGD robust accuracy
every epoch, and instruments network passes per batch. Everything is
deterministic given (seed, config, data): identical runs produce
identical logs and checkpoints bit for bit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import attacks, objectives
from .attacks import AttackConfig
from .autodiff import Tensor
from .nn import Network, forward
from .objectives import AdvTrainConfig, EdgeRegConfig, GradNormConfig

log = logging.getLogger(__name__)

__all__ = [
    "Objective",
    "AdamWConfig",
    "SGDConfig",
    "CosineSchedule",
    "TrainingConfig",
    "TrainLog",
    "NonFiniteLoss",
    "cosine_warmup_lr",
    "adamw_step",
    "sgd_step",
    "ema_update",
    "regularizer_warmup",
    "clone_network",
    "clean_accuracy",
    "detect_collapse",
    "train",
    "lambda_sweep",
    "preset",
]


class NonFiniteLoss(Exception):
    """Training hit a non-finite loss; carries the last good state.

    Attributes network, ema, log hold the model rolled back to the end
    of the last completed epoch, the EMA weights at that point, and the
    log accumulated so far.
    """

    def __init__(self, message, network=None, ema=None, train_log=None, epoch=None):
        super().__init__(message)
        self.network = network
        self.ema = ema
        self.log = train_log
        self.epoch = epoch


_OBJECTIVE_KINDS = ("natural", "gradnorm", "edgereg", "advtrain", "fgsm-train")


@dataclass(frozen=True)
class Objective:
    """Tagged union over the training objectives.

    ``weight`` is the regularizer target for edgereg (gradnorm carries
    its own weight in its config); ``smoothing`` applies to the plain
    cross-entropy objectives (natural, fgsm-train).
    """

    kind: str = "natural"
    config: object = None
    weight: float = 1.0
    smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in _OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        expected = {
            "natural": type(None),
            "gradnorm": GradNormConfig,
            "edgereg": EdgeRegConfig,
            "advtrain": AdvTrainConfig,
            "fgsm-train": AttackConfig,
        }[self.kind]
        if not isinstance(self.config, expected):
            raise ValueError(f"{self.kind} objective needs a {expected.__name__} config")
        if self.kind == "fgsm-train" and self.config.iterations != 1:
            raise ValueError("fgsm-train requires a single-iteration attack")

    @staticmethod
    def natural(smoothing=0.0):
        return Objective("natural", None, smoothing=smoothing)

    @staticmethod
    def gradnorm(cfg):
        return Objective("gradnorm", cfg)

    @staticmethod
    def edgereg(cfg, weight=1.0):
        return Objective("edgereg", cfg, weight=weight)

    @staticmethod
    def advtrain(cfg):
        return Objective("advtrain", cfg)

    @staticmethod
    def fgsm_train(attack_cfg, smoothing=0.0):
        return Objective("fgsm-train", attack_cfg, smoothing=smoothing)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 6.25e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("lr and eps must be positive")


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-2
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float = 6.25e-4
    warmup_lr: float = 1e-6
    min_lr: float = 1e-5
    warmup_epochs: float = 5.0
    total_epochs: float | None = None

    def __post_init__(self):
        if self.warmup_lr > self.base_lr:
            raise ValueError("warmup_lr must not exceed base_lr")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")


@dataclass(frozen=True)
class TrainingConfig:
    objective: Objective = field(default_factory=Objective.natural)
    epochs: int = 10
    batch_size: int = 64
    optimizer: object = field(default_factory=AdamWConfig)
    schedule: CosineSchedule | None = field(default_factory=CosineSchedule)
    ema_decay: float = 0.999
    warmup_reg_epochs: float = 5.0
    seed: int = 0
    eval_attack: AttackConfig | None = None
    eval_examples: int = 256
    monitor_fgsm: bool | None = None
    collapse_rel_drop: float = 0.5
    collapse_window: int = 3
    collapse_fgsm_floor: float = 0.5

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.warmup_reg_epochs > self.epochs:
            raise ValueError("warmup_reg_epochs must not exceed epochs")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not isinstance(self.optimizer, (AdamWConfig, SGDConfig)):
            raise ValueError("optimizer must be AdamWConfig or SGDConfig")


@dataclass
class TrainLog:
    """Per-epoch training record plus run-level accounting."""

    rows: list = field(default_factory=list)
    pass_counts: dict = field(default_factory=dict)
    wall_time: float = 0.0
    collapse_epoch: int | None = None

    COLUMNS = ("epoch", "clean_acc", "robust_acc", "fgsm_acc",
               "mean_loss", "mean_grad_l1", "lr", "lambda_gn")

    def append(self, **row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must be strictly increasing")
        self.rows.append(row)

    def column(self, name):
        return [row.get(name) for row in self.rows]

    def to_csv(self, path, manifest_ref=None):
        lines = []
        if manifest_ref is not None:
            lines.append(f"# manifest={manifest_ref}")
        lines.append(",".join(self.COLUMNS))
        for row in self.rows:
            cells = []
            for col in self.COLUMNS:
                value = row.get(col)
                if value is None:
                    cells.append("")
                elif col == "epoch":
                    cells.append(str(int(value)))
                else:
                    cells.append(repr(float(value)))
            lines.append(",".join(cells))
        payload = "\n".join(lines) + "\n"
        from .serialize import atomic_write_bytes

        atomic_write_bytes(path, payload.encode())

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
        header = lines[0].split(",")
        for line in lines[1:]:
            cells = line.split(",")
            row = {}
            for col, cell in zip(header, cells):
                if cell == "":
                    row[col] = None
                elif col == "epoch":
                    row[col] = int(cell)
                else:
                    row[col] = float(cell)
            rows.append(row)
        return cls(rows=rows)


# ---------------------------------------------------------------------------
# Schedule, optimizers, EMA
# ---------------------------------------------------------------------------

def cosine_warmup_lr(step, schedule):
    """Learning rate at fractional epoch ``step``.

    Linear from warmup_lr to base_lr over warmup_epochs, then half-cosine
    from base_lr down to min_lr across the remaining epochs.
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    warm = schedule.warmup_epochs
    if step < warm:
        return schedule.warmup_lr + (schedule.base_lr - schedule.warmup_lr) * step / warm
    total = schedule.total_epochs
    if total is None or total <= warm:
        progress = 0.0
    else:
        progress = min(1.0, (step - warm) / (total - warm))
    span = schedule.base_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * progress))


def init_optimizer_state(params, opt):
    if isinstance(opt, AdamWConfig):
        return {
            "t": 0,
            "m": {k: np.zeros_like(p.numpy()) for k, p in params.items()},
            "v": {k: np.zeros_like(p.numpy()) for k, p in params.items()},
        }
    return {"v": {k: np.zeros_like(p.numpy()) for k, p in params.items()}}


def adamw_step(params, grads, state, hyper, lr=None):
    """One AdamW update in place: bias-corrected moments, decoupled decay."""
    lr = hyper.lr if lr is None else lr
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=param.numpy().dtype)
        m = state["m"][name]
        v = state["v"][name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * param.numpy()
        param.data[...] = param.numpy() - lr * update
    return params, state


def sgd_step(params, grads, state, hyper, lr=None):
    """Momentum SGD update in place."""
    lr = hyper.lr if lr is None else lr
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=param.numpy().dtype)
        buf = state["v"][name]
        buf *= hyper.momentum
        buf += g
        param.data[...] = param.numpy() - lr * buf
    return params, state


def ema_update(ema_params, params, decay):
    """ema <- decay * ema + (1 - decay) * params, elementwise in place."""
    for name, value in params.items():
        arr = value.numpy() if isinstance(value, Tensor) else np.asarray(value)
        ema_params[name] *= decay
        ema_params[name] += (1.0 - decay) * arr
    return ema_params


def regularizer_warmup(epoch, warmup_reg_epochs, target):
    """Linear ramp to target over the first warmup_reg_epochs epochs."""
    if warmup_reg_epochs <= 0:
        return target
    return target * min(1.0, epoch / warmup_reg_epochs)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def clone_network(net):
    params = {k: Tensor(p.numpy().copy(), requires_grad=True) for k, p in net.params.items()}
    buffers = {k: np.array(b, copy=True) for k, b in net.buffers.items()}
    return Network(net.config, params, buffers, net.norm_mode)


def clean_accuracy(net, images, labels, batch_size=256):
    labels = np.asarray(labels)
    correct = 0
    for start in range(0, len(labels), batch_size):
        xb = images[start:start + batch_size]
        logits = forward(net, Tensor(np.asarray(xb, dtype=np.float64))).numpy()
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / max(1, len(labels))


def _mean_grad_l1(net, images, labels):
    from .diagnostics import loss_input_gradient

    grads = loss_input_gradient(net, Tensor(images), labels).numpy()
    return float(np.abs(grads.reshape(len(grads), -1)).sum(axis=1).mean())


def detect_collapse(robust_acc, fgsm_acc, rel_drop=0.5, window=3, fgsm_floor=0.5):
    """First epoch where PGD accuracy fell hard while FGSM accuracy stayed high.

    Fires at epoch e when robust accuracy dropped by more than rel_drop
    relative to its peak over the preceding ``window`` epochs and the
    FGSM accuracy at e is at least fgsm_floor. Returns None otherwise.
    """
    robust = list(robust_acc)
    fgsm = list(fgsm_acc)
    for e in range(1, len(robust)):
        if robust[e] is None or fgsm[e] is None:
            continue
        past = [r for r in robust[max(0, e - window):e] if r is not None]
        if not past:
            continue
        peak = max(past)
        if peak > 0 and robust[e] < (1.0 - rel_drop) * peak and fgsm[e] >= fgsm_floor:
            return e
    return None


def _default_eval_attack(objective):
    eps = 0.1
    if objective.kind == "gradnorm":
        eps = objective.config.epsilon
    elif objective.kind == "advtrain":
        eps = objective.config.attack.epsilon
    elif objective.kind == "fgsm-train":
        eps = objective.config.epsilon
    return AttackConfig(epsilon=eps, step_size=eps / 4.0, iterations=10,
                        restarts=1, random_init=True)


# ---------------------------------------------------------------------------
# The epoch loop
# ---------------------------------------------------------------------------

def _split_dataset(dataset):
    if isinstance(dataset, tuple):
        return dataset
    n = len(dataset.labels)
    n_val = max(1, min(512, n // 10))
    idx = np.arange(n)
    return dataset.subset(idx[:-n_val]), dataset.subset(idx[-n_val:])


def _batch_loss(net, xb, yb, objective, eff_weight, warm_frac, rng, attack_seed):
    if objective.kind == "natural":
        return objectives.cross_entropy(forward(net, Tensor(xb)), yb, objective.smoothing)
    if objective.kind == "gradnorm":
        cfg = replace(objective.config, lambda_gn=eff_weight)
        return objectives.gradnorm_loss(net, Tensor(xb), yb, cfg, rng=rng)
    if objective.kind == "edgereg":
        ce = objectives.cross_entropy(forward(net, Tensor(xb)), yb)
        if eff_weight == 0.0:
            return ce
        reg = objectives.edge_reg_loss(net, Tensor(xb), objective.config, rng)
        return ce + reg * eff_weight
    if objective.kind == "advtrain":
        step = objective.config.attack.step_size * warm_frac
        return objectives.adv_train_loss(net, Tensor(xb), yb, objective.config,
                                         seed=attack_seed, step_size=step)
    # fgsm-train: one signed step of size epsilon, warmed up like the others
    attack = objective.config
    step = (attack.step_size if attack.random_init else attack.epsilon) * warm_frac
    adv_cfg = AdvTrainConfig(attack=attack, label_smoothing=objective.smoothing)
    return objectives.adv_train_loss(net, Tensor(xb), yb, adv_cfg,
                                     seed=attack_seed, step_size=step)


def _expected_passes(objective, eff_weight):
    if objective.kind == "natural":
        return 2
    if objective.kind == "gradnorm":
        return 2 if eff_weight == 0.0 else 5
    if objective.kind in ("advtrain", "fgsm-train"):
        attack = objective.config if objective.kind == "fgsm-train" else objective.config.attack
        return 2 * attack.iterations + 2
    return None  # edgereg measured, not predicted


def train(net, dataset, cfg):
    """Run the epoch loop; returns (trained net, EMA net, TrainLog).

    ``dataset`` is either a Dataset (a deterministic tail slice becomes
    the validation split) or an explicit (train, val) pair. The net is
    updated in place and also returned.
    """
    t_start = time.perf_counter()
    train_ds, val_ds = _split_dataset(dataset)
    if len(train_ds.labels) == 0:
        raise ValueError("empty training split")
    eval_cfg = cfg.eval_attack or _default_eval_attack(cfg.objective)
    monitor_fgsm = cfg.monitor_fgsm
    if monitor_fgsm is None:
        monitor_fgsm = cfg.objective.kind == "fgsm-train"

    params = net.params
    opt_state = init_optimizer_state(params, cfg.optimizer)
    ema = {k: p.numpy().copy() for k, p in params.items()}
    schedule = cfg.schedule
    if schedule is not None and schedule.total_epochs is None:
        schedule = replace(schedule, total_epochs=float(cfg.epochs))

    shuffle_rng = np.random.default_rng([cfg.seed, 11])
    train_log = TrainLog()
    batch_counts = []
    n = len(train_ds.labels)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    last_good = {k: p.numpy().copy() for k, p in params.items()}
    last_good_ema = {k: v.copy() for k, v in ema.items()}

    n_eval = min(cfg.eval_examples, len(val_ds.labels))
    val_eval = val_ds.subset(np.arange(n_eval))

    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for bi in range(steps_per_epoch):
            sel = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            if len(sel) == 0:
                continue
            xb = train_ds.images[sel]
            yb = train_ds.labels[sel]
            epoch_frac = epoch + bi / steps_per_epoch
            lr = cosine_warmup_lr(epoch_frac, schedule) if schedule else cfg.optimizer.lr
            warm_frac = regularizer_warmup(epoch_frac, cfg.warmup_reg_epochs, 1.0)
            if cfg.objective.kind == "gradnorm":
                eff_weight = regularizer_warmup(epoch_frac, cfg.warmup_reg_epochs,
                                                cfg.objective.config.lambda_gn)
            else:
                eff_weight = regularizer_warmup(epoch_frac, cfg.warmup_reg_epochs,
                                                cfg.objective.weight)
            batch_rng = np.random.default_rng([cfg.seed, epoch, bi])
            attack_seed = cfg.seed * 1000003 + epoch * 1009 + bi

            with ad.count_passes() as counter:
                with ad.Tape() as tape:
                    loss = _batch_loss(net, xb, yb, cfg.objective, eff_weight,
                                       warm_frac, batch_rng, attack_seed)
                    loss_value = float(loss.numpy())
                    if not np.isfinite(loss_value):
                        for k, p in params.items():
                            p.data[...] = last_good[k]
                        final_log = _finish_log(train_log, batch_counts, t_start, cfg)
                        raise NonFiniteLoss(
                            f"non-finite loss at epoch {epoch} batch {bi}",
                            network=net, ema=_ema_network(net, last_good_ema),
                            train_log=final_log, epoch=epoch)
                    grads = tape.gradient(loss, list(params.values()))
            batch_counts.append(counter.total)
            expected = _expected_passes(cfg.objective, eff_weight)
            if expected is not None and counter.total != expected:
                raise RuntimeError(
                    f"pass accounting drift: measured {counter.total}, expected {expected}")

            grad_map = dict(zip(params.keys(), (g.numpy() for g in grads)))
            if isinstance(cfg.optimizer, AdamWConfig):
                adamw_step(params, grad_map, opt_state, cfg.optimizer, lr=lr)
            else:
                sgd_step(params, grad_map, opt_state, cfg.optimizer, lr=lr)
            ema_update(ema, params, cfg.ema_decay)
            losses.append(loss_value)

        row = _evaluate_epoch(net, val_eval, eval_cfg, cfg, monitor_fgsm)
        end_frac = float(epoch + 1)
        row.update(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            lr=cosine_warmup_lr(end_frac, schedule) if schedule else cfg.optimizer.lr,
            lambda_gn=(regularizer_warmup(end_frac, cfg.warmup_reg_epochs,
                                          cfg.objective.config.lambda_gn)
                       if cfg.objective.kind == "gradnorm" else 0.0),
        )
        train_log.append(**row)
        last_good = {k: p.numpy().copy() for k, p in params.items()}
        last_good_ema = {k: v.copy() for k, v in ema.items()}
        log.info("epoch %d: clean %.4f robust %.4f loss %.4f",
                 epoch, row["clean_acc"], row["robust_acc"], row["mean_loss"])

    final_log = _finish_log(train_log, batch_counts, t_start, cfg)
    return net, _ema_network(net, ema), final_log


def _evaluate_epoch(net, val_eval, eval_cfg, cfg, monitor_fgsm):
    mode = net.norm_mode
    net.norm_mode = "eval"
    try:
        clean = clean_accuracy(net, val_eval.images, val_eval.labels)
        robust, _ = attacks.robust_accuracy(net, val_eval, eval_cfg, seed=cfg.seed)
        fgsm_acc = None
        if monitor_fgsm:
            fgsm_cfg = replace(eval_cfg, iterations=1, random_init=False,
                               restarts=1, step_size=eval_cfg.epsilon)
            fgsm_acc, _ = attacks.robust_accuracy(net, val_eval, fgsm_cfg,
                                                  seed=cfg.seed, attack="fgsm")
        m = min(128, len(val_eval.labels))
        grad_l1 = _mean_grad_l1(net, val_eval.images[:m], val_eval.labels[:m])
    finally:
        net.norm_mode = mode
    return {"clean_acc": clean, "robust_acc": robust,
            "fgsm_acc": fgsm_acc, "mean_grad_l1": grad_l1}


def _ema_network(net, ema):
    ema_net = clone_network(net)
    for name, arr in ema.items():
        ema_net.params[name].data[...] = arr
    return ema_net


def _finish_log(train_log, batch_counts, t_start, cfg):
    train_log.pass_counts = {
        "per_batch": max(batch_counts) if batch_counts else 0,
        "batches": len(batch_counts),
        "total": int(sum(batch_counts)),
    }
    train_log.wall_time = time.perf_counter() - t_start
    robust = train_log.column("robust_acc")
    fgsm = train_log.column("fgsm_acc")
    if any(v is not None for v in fgsm):
        train_log.collapse_epoch = detect_collapse(
            robust, fgsm, rel_drop=cfg.collapse_rel_drop,
            window=cfg.collapse_window, fgsm_floor=cfg.collapse_fgsm_floor)
    return train_log


# ---------------------------------------------------------------------------
# Sweeps and presets
# ---------------------------------------------------------------------------

def lambda_sweep(net_init, dataset, lambdas, cfg):
    """Train per lambda with weights (2 - lambda, lambda); returns curve rows.

    Each run starts from a fresh copy of net_init. Lambda 0 degenerates
    to (scaled) natural training, lambda 2 removes the CE signal.
    """
    base = cfg.objective.config if cfg.objective.kind == "gradnorm" else GradNormConfig()
    rows = []
    for lam in lambdas:
        if not 0.0 <= lam <= 2.0:
            raise ValueError("lambda must lie in [0, 2]")
        gn = replace(base, lambda_ce=2.0 - lam, lambda_gn=lam)
        run_cfg = replace(cfg, objective=Objective.gradnorm(gn))
        model = clone_network(net_init)
        model, _, run_log = train(model, dataset, run_cfg)
        last = run_log.rows[-1] if run_log.rows else {"clean_acc": 0.0, "robust_acc": 0.0}
        rows.append({"lambda": float(lam),
                     "clean_acc": float(last["clean_acc"]),
                     "robust_acc": float(last["robust_acc"])})
    return rows


def preset(name, seed=0):
    """Desk-scale training recipes keyed by name."""
    if name == "mnist-fast":
        return TrainingConfig(
            objective=Objective.natural(),
            epochs=10,
            batch_size=128,
            optimizer=AdamWConfig(lr=2e-3, weight_decay=1e-4),
            schedule=CosineSchedule(base_lr=2e-3, warmup_lr=2e-4, min_lr=1e-5,
                                    warmup_epochs=1.0),
            ema_decay=0.999,
            warmup_reg_epochs=2.0,
            seed=seed,
            eval_attack=AttackConfig(epsilon=0.1, step_size=0.025, iterations=10,
                                     random_init=True),
        )
    if name == "cifar-small":
        return TrainingConfig(
            objective=Objective.natural(),
            epochs=50,
            batch_size=128,
            optimizer=AdamWConfig(lr=6.25e-4, weight_decay=0.02),
            schedule=CosineSchedule(base_lr=6.25e-4, warmup_lr=1e-6, min_lr=1e-5,
                                    warmup_epochs=5.0),
            ema_decay=0.9998,
            warmup_reg_epochs=5.0,
            seed=seed,
            eval_attack=AttackConfig(epsilon=4 / 255, step_size=1 / 255, iterations=10,
                                     random_init=True),
        )
    raise ValueError(f"unknown preset {name!r}")
