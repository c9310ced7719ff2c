"""Experiment front-end: train, attack, diagnose, sweep, report.

Configs are YAML documents with sections {data, model, objective,
attack, schedule, diagnostics, output}. Key names mirror common recipe
vocabulary (epochs, sched, lrb, warmup_lr, opt_eps, model_ema_decay,
attack_eps, ce_weight, gradnorm_weight, ...). Unknown keys are rejected
with a close-match suggestion; keys for large-scale features that are
deliberately excluded (augmentation stacks, mixed precision) are
rejected with an out-of-scope notice instead of being ignored.

Every run writes a manifest (config hash, seed, artifact version,
output paths, pass-count totals, wall time) atomically at the end.
Rerunning a command with the same config and seed reproduces all output
files byte for byte; the manifest's wall_time_seconds entry is the one
value that reflects the run itself rather than its results.

Heavy imports happen inside the command handlers so that --threads can
pin the BLAS pool size before numpy loads.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import sys
import time

log = logging.getLogger(__name__)

__all__ = ["ConfigError", "EmptyDataset", "main"]


class ConfigError(Exception):
    """Bad experiment config; message carries section/key/line context."""


class EmptyDataset(Exception):
    """A command that needs examples received a dataset with none."""


_SECTION_KEYS = {
    "data": {
        "source", "kind", "num_classes", "image_size", "samples",
        "test_samples", "seed", "train_images", "train_labels",
        "test_images", "test_labels", "file", "test_file",
    },
    "model": {"preset", "layers", "activation", "input_norm"},
    "objective": {
        "kind", "ce_weight", "gradnorm_weight", "eps", "sigma", "smoothing",
        "input_noise_std", "channel_weights", "edge_weight", "temperature",
        "edge_filter", "filter_sigma", "clamp_floor", "attack_eps",
        "attack_it", "attack_step", "random_init", "lambda_grid",
    },
    "attack": {
        "attack_eps", "attack_it", "attack_step", "attack_restarts",
        "random_init", "direction", "eps_grid", "iteration_grid", "examples",
    },
    "schedule": {
        "epochs", "batch_size", "sched", "lrb", "warmup_lr", "min_lr",
        "warmup_epochs", "opt", "opt_eps", "weight_decay", "momentum",
        "model_ema_decay", "warmup_reg_epochs", "seed", "eval_examples",
        "monitor_fgsm", "collapse_rel_drop", "collapse_window",
        "collapse_fgsm_floor",
    },
    "diagnostics": {
        "which", "max_examples", "power_iters", "epsilon",
        "samples_per_example", "eps_grid", "bins",
    },
    "output": {"dir"},
}

# Large-scale recipe features we exclude on purpose. Rejecting them
# loudly beats silently training something different.
_OUT_OF_SCOPE = {
    "aa", "autoaugment", "rand_aug", "mixup", "cutmix", "reprob", "remode",
    "recount", "color_jitter", "aug_repeats", "drop_path", "crop_pct",
    "amp", "channels_last", "torchcompile", "bce_loss", "model_ema_force_cpu",
}

_OVERRIDE_ORDER = ("schedule", "objective", "attack", "data", "model",
                   "diagnostics", "output")


def _check_keys(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping of sections")
    for section, body in doc.items():
        if section not in _SECTION_KEYS:
            hint = difflib.get_close_matches(section, _SECTION_KEYS, n=1)
            extra = f"; did you mean '{hint[0]}'?" if hint else ""
            raise ConfigError(f"unknown section '{section}'{extra}")
        if body is None:
            doc[section] = {}
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section '{section}' must be a mapping")
        for key in body:
            if key in _OUT_OF_SCOPE:
                raise ConfigError(
                    f"key '{key}' in section '{section}' is out of scope "
                    "(large-scale augmentation/precision features are excluded); "
                    "remove it rather than expecting it to be ignored")
            if key not in _SECTION_KEYS[section]:
                hint = difflib.get_close_matches(key, _SECTION_KEYS[section], n=1)
                extra = f"; did you mean '{hint[0]}'?" if hint else ""
                raise ConfigError(f"unknown key '{key}' in section '{section}'{extra}")
    return doc


def load_config(path):
    import yaml

    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: invalid YAML{where}: {e}")
    except OSError as e:
        raise ConfigError(f"{path}: {e}")
    return _check_keys(doc or {})


def preset_config(name):
    """Full config documents for the shipped desk-scale recipes."""
    if name == "mnist-fast":
        return {
            "data": {"source": "synthetic", "kind": "edge-shapes",
                     "num_classes": 6, "image_size": 28, "samples": 2000,
                     "seed": 0},
            "model": {"preset": "cnn-small", "activation": "gelu",
                      "input_norm": [0.5, 0.225]},
            "objective": {"kind": "natural"},
            "attack": {"attack_eps": 0.1, "attack_it": 10,
                       "attack_step": 0.025, "random_init": True},
            "schedule": {"epochs": 10, "batch_size": 128, "sched": "cosine",
                         "lrb": 2.0e-3, "warmup_lr": 2.0e-4, "min_lr": 1.0e-5,
                         "warmup_epochs": 1, "opt": "adamw", "opt_eps": 1.0e-8,
                         "weight_decay": 1.0e-4, "model_ema_decay": 0.999,
                         "warmup_reg_epochs": 2, "seed": 0},
            "diagnostics": {"which": ["norms", "edges", "geometry", "linearity"],
                            "max_examples": 32},
            "output": {"dir": "runs/mnist-fast"},
        }
    if name == "cifar-small":
        return {
            "data": {"source": "synthetic", "kind": "gaussian-blobs",
                     "num_classes": 6, "image_size": 32, "samples": 4000,
                     "seed": 0},
            "model": {"preset": "cnn-small", "activation": "gelu",
                      "input_norm": [0.5, 0.225]},
            "objective": {"kind": "natural"},
            "attack": {"attack_eps": 4.0 / 255.0, "attack_it": 10,
                       "attack_step": 1.0 / 255.0, "random_init": True},
            "schedule": {"epochs": 50, "batch_size": 128, "sched": "cosine",
                         "lrb": 6.25e-4, "warmup_lr": 1.0e-6, "min_lr": 1.0e-5,
                         "warmup_epochs": 5, "opt": "adamw", "opt_eps": 1.0e-8,
                         "weight_decay": 0.02, "model_ema_decay": 0.9998,
                         "warmup_reg_epochs": 5, "seed": 0},
            "diagnostics": {"which": ["norms", "edges"], "max_examples": 32},
            "output": {"dir": "runs/cifar-small"},
        }
    raise ConfigError(f"unknown preset '{name}'")


def parse_preset(text):
    """'name key=value ...' -> config document with overrides applied."""
    import yaml

    tokens = text.split()
    if not tokens:
        raise ConfigError("empty preset string")
    doc = preset_config(tokens[0])
    for token in tokens[1:]:
        if "=" not in token:
            raise ConfigError(f"preset override '{token}' is not key=value")
        key, raw = token.split("=", 1)
        value = yaml.safe_load(raw)
        _route_override(doc, key, value)
    return _check_keys(doc)


def _route_override(doc, key, value):
    if key in _SECTION_KEYS:
        # bare section name sets that section's primary field
        primary = {"objective": "kind", "model": "preset", "data": "kind"}.get(key)
        if primary is None:
            raise ConfigError(f"section '{key}' cannot be set directly")
        doc.setdefault(key, {})[primary] = value
        return
    if key in _OUT_OF_SCOPE:
        raise ConfigError(f"key '{key}' is out of scope")
    for section in _OVERRIDE_ORDER:
        if key in doc.get(section, {}):
            doc[section][key] = value
            return
    for section in _OVERRIDE_ORDER:
        if key in _SECTION_KEYS[section]:
            doc.setdefault(section, {})[key] = value
            return
    candidates = sorted(set().union(*_SECTION_KEYS.values()))
    hint = difflib.get_close_matches(key, candidates, n=1)
    extra = f"; did you mean '{hint[0]}'?" if hint else ""
    raise ConfigError(f"unknown key '{key}'{extra}")


def resolve_config(args):
    """Merge --config/--preset plus flag overrides into one document."""
    if getattr(args, "preset", None):
        doc = parse_preset(args.preset)
        if getattr(args, "config", None):
            override = load_config(args.config)
            for section, body in override.items():
                doc.setdefault(section, {}).update(body)
            doc = _check_keys(doc)
    elif getattr(args, "config", None):
        doc = load_config(args.config)
    else:
        raise ConfigError("provide --config FILE or --preset NAME")
    if getattr(args, "seed", None) is not None:
        doc.setdefault("schedule", {})["seed"] = args.seed
    if getattr(args, "out", None):
        doc.setdefault("output", {})["dir"] = args.out
    return doc


def experiment_doc(doc):
    """The config without run plumbing: output location does not define
    the experiment, so hashes and resolved dumps exclude it."""
    return {k: v for k, v in doc.items() if k != "output"}


def config_hash(doc):
    return hashlib.sha256(
        json.dumps(experiment_doc(doc), sort_keys=True,
                   separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Builders from config sections
# ---------------------------------------------------------------------------

def _data_dir():
    return os.environ.get("ROBUSTGRAD_DATA_DIR", ".")


def build_datasets(doc):
    """(train, test) datasets from the data section."""
    from . import data

    sec = doc.get("data", {})
    source = sec.get("source", "synthetic")
    if source == "synthetic":
        spec = data.SyntheticSpec(
            kind=sec.get("kind", "edge-shapes"),
            num_classes=sec.get("num_classes", 6),
            image_size=sec.get("image_size", 28),
            samples=sec.get("samples", 1000),
            seed=sec.get("seed", 0))
        test_samples = sec.get("test_samples", max(1, spec.samples // 4))
        from dataclasses import replace as dc_replace

        train = data.synthesize(spec, "train")
        test = data.synthesize(dc_replace(spec, samples=test_samples), "test")
        return train, test
    root = _data_dir()
    if source == "idx":
        train = data.load_idx(os.path.join(root, sec["train_images"]),
                              os.path.join(root, sec["train_labels"]),
                              name="idx", split="train")
        if "test_images" in sec:
            test = data.load_idx(os.path.join(root, sec["test_images"]),
                                 os.path.join(root, sec["test_labels"]),
                                 name="idx", split="test")
        else:
            n = len(train.labels)
            cut = max(1, n // 10)
            test = train.subset(range(n - cut, n))
            train = train.subset(range(0, n - cut))
        return train, test
    if source == "cifar":
        train = data.load_cifar_binary(os.path.join(root, sec["file"]), split="train")
        if "test_file" in sec:
            test = data.load_cifar_binary(os.path.join(root, sec["test_file"]),
                                          split="test")
        else:
            n = len(train.labels)
            cut = max(1, n // 10)
            test = train.subset(range(n - cut, n))
            train = train.subset(range(0, n - cut))
        return train, test
    raise ConfigError(f"unknown data source '{source}'")


def build_network(doc, train_ds, seed):
    from . import nn

    sec = doc.get("model", {})
    input_shape = tuple(train_ds.images.shape[1:])
    activation = sec.get("activation", "gelu")
    input_norm = sec.get("input_norm")
    if input_norm is not None:
        input_norm = tuple(input_norm)
    if "layers" in sec:
        config = nn.NetworkConfig(layers=tuple(sec["layers"]),
                                  activation=activation,
                                  num_classes=train_ds.num_classes,
                                  input_shape=input_shape,
                                  input_norm=input_norm)
    else:
        config = nn.preset_config(sec.get("preset", "cnn-small"),
                                  num_classes=train_ds.num_classes,
                                  input_shape=input_shape,
                                  activation=activation,
                                  input_norm=input_norm)
    return nn.init_network(config, seed=seed)


def build_attack(doc, section="attack"):
    from .attacks import AttackConfig

    sec = doc.get(section, {})
    eps = float(sec.get("attack_eps", 0.1))
    return AttackConfig(
        epsilon=eps,
        step_size=float(sec.get("attack_step", eps / 4.0 if eps > 0 else 1.0 / 255.0)),
        iterations=int(sec.get("attack_it", 10)),
        restarts=int(sec.get("attack_restarts", 1)),
        random_init=bool(sec.get("random_init", True)),
        direction=sec.get("direction", "sign"))


def build_objective(doc):
    from .attacks import AttackConfig
    from .objectives import AdvTrainConfig, EdgeRegConfig, GradNormConfig
    from .training import Objective

    sec = doc.get("objective", {})
    kind = sec.get("kind", "natural")
    smoothing = float(sec.get("smoothing", 0.0))
    if kind == "natural":
        return Objective.natural(smoothing)
    if kind == "gradnorm":
        noise = None
        if sec.get("input_noise_std"):
            noise = ("gaussian", float(sec["input_noise_std"]))
        weights = sec.get("channel_weights")
        cfg = GradNormConfig(
            lambda_ce=float(sec.get("ce_weight", 0.8)),
            lambda_gn=float(sec.get("gradnorm_weight", 1.2)),
            epsilon=float(sec.get("eps", 4.0 / 255.0)),
            sigma=float(sec.get("sigma", 0.225)),
            channel_weights=tuple(weights) if weights else None,
            input_noise=noise,
            label_smoothing=smoothing)
        return Objective.gradnorm(cfg)
    if kind == "edgereg":
        cfg = EdgeRegConfig(
            temperature=float(sec.get("temperature", 0.5)),
            edge_filter=sec.get("edge_filter", "sobel"),
            filter_sigma=float(sec.get("filter_sigma", 1.0)),
            clamp_floor=float(sec.get("clamp_floor", 1e-3)))
        return Objective.edgereg(cfg, weight=float(sec.get("edge_weight", 1.0)))
    if kind == "advtrain":
        eps = float(sec.get("attack_eps", 0.1))
        attack = AttackConfig(epsilon=eps,
                              step_size=float(sec.get("attack_step", eps / 4.0)),
                              iterations=int(sec.get("attack_it", 3)),
                              random_init=bool(sec.get("random_init", True)))
        return Objective.advtrain(AdvTrainConfig(attack=attack,
                                                 label_smoothing=smoothing))
    if kind == "fgsm-train":
        eps = float(sec.get("attack_eps", 0.1))
        attack = AttackConfig(epsilon=eps,
                              step_size=float(sec.get("attack_step", eps)),
                              iterations=1,
                              random_init=bool(sec.get("random_init", False)))
        return Objective.fgsm_train(attack, smoothing)
    raise ConfigError(f"unknown objective kind '{kind}'")


def build_training_config(doc):
    from . import training as tr

    sec = doc.get("schedule", {})
    objective = build_objective(doc)
    lrb = float(sec.get("lrb", 2.0e-3))
    opt_name = sec.get("opt", "adamw")
    if opt_name == "adamw":
        optimizer = tr.AdamWConfig(lr=lrb,
                                   eps=float(sec.get("opt_eps", 1e-8)),
                                   weight_decay=float(sec.get("weight_decay", 0.0)))
    elif opt_name == "sgd":
        optimizer = tr.SGDConfig(lr=lrb, momentum=float(sec.get("momentum", 0.9)))
    else:
        raise ConfigError(f"unknown optimizer '{opt_name}'")
    sched_name = sec.get("sched", "cosine")
    if sched_name == "cosine":
        schedule = tr.CosineSchedule(base_lr=lrb,
                                     warmup_lr=float(sec.get("warmup_lr", lrb)),
                                     min_lr=float(sec.get("min_lr", 1e-5)),
                                     warmup_epochs=float(sec.get("warmup_epochs", 0)))
    elif sched_name in ("none", "constant"):
        schedule = None
    else:
        raise ConfigError(f"unknown schedule '{sched_name}'")
    kwargs = {}
    for key in ("monitor_fgsm", "collapse_rel_drop", "collapse_window",
                "collapse_fgsm_floor"):
        if key in sec:
            kwargs[key] = sec[key]
    return tr.TrainingConfig(
        objective=objective,
        epochs=int(sec.get("epochs", 10)),
        batch_size=int(sec.get("batch_size", 128)),
        optimizer=optimizer,
        schedule=schedule,
        ema_decay=float(sec.get("model_ema_decay", 0.999)),
        warmup_reg_epochs=float(sec.get("warmup_reg_epochs", 0)),
        seed=int(sec.get("seed", 0)),
        eval_attack=build_attack(doc),
        eval_examples=int(sec.get("eval_examples", 256)),
        **kwargs)


# ---------------------------------------------------------------------------
# Deterministic writers
# ---------------------------------------------------------------------------

def _write_json(path, obj):
    from .serialize import atomic_write_bytes

    payload = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, payload.encode())


def _fmt_cell(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _write_csv(path, header, rows, manifest_ref="manifest.json"):
    from .serialize import atomic_write_bytes

    lines = [f"# manifest={manifest_ref}", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[col] if isinstance(row, dict) else row[i])
                              for i, col in enumerate(header)))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def write_manifest(outdir, command, doc, seed, outputs, pass_counts, wall_time):
    from . import __version__

    manifest = {
        "artifact_version": f"robustgrad-{__version__}",
        "command": command,
        "config_hash": config_hash(doc),
        "seed": int(seed),
        "outputs": {k: outputs[k] for k in sorted(outputs)},
        "pass_counts": pass_counts,
        "wall_time_seconds": wall_time,
    }
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    return manifest


def _outdir(doc, command):
    path = doc.get("output", {}).get("dir", os.path.join("runs", command))
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    from . import autodiff as ad
    from . import nn, training

    doc = resolve_config(args)
    outdir = _outdir(doc, "train")
    seed = doc.get("schedule", {}).get("seed", 0)
    t0 = time.perf_counter()
    train_ds, test_ds = build_datasets(doc)
    if len(train_ds.labels) == 0:
        raise EmptyDataset("training dataset has no examples")
    net = build_network(doc, train_ds, seed)
    cfg = build_training_config(doc)
    _write_json(os.path.join(outdir, "config.resolved.json"), experiment_doc(doc))

    aborted = False
    with ad.count_passes() as run_counter:
        try:
            net, ema_net, train_log = training.train(net, (train_ds, test_ds), cfg)
        except training.NonFiniteLoss as e:
            aborted = True
            net, ema_net, train_log = e.network, e.ema, e.log
            log.error("aborted on non-finite loss at epoch %s; keeping last good state",
                      e.epoch)

    nn.save_network(net, os.path.join(outdir, "model.ckpt"))
    nn.save_network(ema_net, os.path.join(outdir, "model_ema.ckpt"))
    train_log.to_csv(os.path.join(outdir, "trainlog.csv"), manifest_ref="manifest.json")
    outputs = {"checkpoint": "model.ckpt", "ema_checkpoint": "model_ema.ckpt",
               "train_log": "trainlog.csv", "config": "config.resolved.json"}
    passes = dict(train_log.pass_counts)
    passes["run_total"] = run_counter.total
    manifest = write_manifest(outdir, "train", doc, seed, outputs, passes,
                              time.perf_counter() - t0)
    if train_log.rows:
        last = train_log.rows[-1]
        print(f"train: clean {last['clean_acc']:.4f} robust {last['robust_acc']:.4f} "
              f"loss {last['mean_loss']:.4f} ({len(train_log.rows)} epochs)")
    if train_log.collapse_epoch is not None:
        print(f"train: catastrophic overfitting detected at epoch "
              f"{train_log.collapse_epoch}")
    print(f"train: wrote {outdir}/manifest.json (run {manifest['config_hash'][:12]})")
    return 3 if aborted else 0


def cmd_attack(args):
    from . import autodiff as ad
    from . import attacks, nn, training
    from dataclasses import replace as dc_replace

    doc = resolve_config(args)
    outdir = _outdir(doc, "attack")
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    target = nn.load_network(args.checkpoint[0])
    target.norm_mode = "eval"
    _, test_ds = build_datasets(doc)
    cap = int(doc.get("attack", {}).get("examples", 256))
    n = min(cap, len(test_ds.labels))
    if n == 0:
        raise EmptyDataset("attack dataset has no examples")
    subset = test_ds.subset(range(n))
    cfg = build_attack(doc)

    with ad.count_passes() as run_counter:
        clean = training.clean_accuracy(target, subset.images, subset.labels)
        robust, _ = attacks.robust_accuracy(target, subset, cfg, seed=seed)
        report = {"clean_accuracy": clean, "robust_accuracy": robust,
                  "epsilon": cfg.epsilon, "iterations": cfg.iterations,
                  "examples": n}

        eps_grid = doc.get("attack", {}).get("eps_grid")
        if eps_grid is None:
            eps_grid = sorted({0.0, cfg.epsilon / 2.0, cfg.epsilon,
                               2.0 * cfg.epsilon, 4.0 * cfg.epsilon})
        curve = attacks.epsilon_sweep(target, subset, cfg, eps_grid, seed=seed)
        _write_csv(os.path.join(outdir, "eps_sweep.csv"),
                   ("epsilon", "robust_acc"), [list(r) for r in curve])

        it_grid = doc.get("attack", {}).get("iteration_grid")
        if it_grid is None:
            base = max(1, cfg.iterations)
            it_grid = sorted({1, max(1, base // 2), base, 2 * base})
        it_rows = []
        for it in it_grid:
            it_cfg = dc_replace(cfg, iterations=int(it))
            result = attacks.pgd(target, subset.images, subset.labels, it_cfg, seed=seed)
            acc = float(1.0 - result.success.mean())
            it_rows.append([int(it), acc, float(result.loss_trace[-1])])
        _write_csv(os.path.join(outdir, "iteration_sweep.csv"),
                   ("iterations", "robust_acc", "mean_loss"), it_rows)

        result = attacks.pgd(target, subset.images, subset.labels, cfg, seed=seed)
        attacks.write_attack_csv(os.path.join(outdir, "examples.csv"),
                                 target, subset.images, subset.labels, result)

        if len(args.checkpoint) > 1:
            source = nn.load_network(args.checkpoint[1])
            source.norm_mode = "eval"
            transferred = attacks.transfer_attack(source, target, subset.images,
                                                  subset.labels, cfg, seed=seed)
            report["transfer_robust_accuracy"] = float(1.0 - transferred.success.mean())
            report["transfer_source"] = os.path.basename(args.checkpoint[1])

    _write_json(os.path.join(outdir, "report.json"), report)
    outputs = {"report": "report.json", "eps_sweep": "eps_sweep.csv",
               "iteration_sweep": "iteration_sweep.csv", "examples": "examples.csv"}
    write_manifest(outdir, "attack", doc, seed, outputs,
                   {"run_total": run_counter.total}, time.perf_counter() - t0)
    print(f"attack: clean {clean:.4f} robust {robust:.4f} -> {outdir}")
    return 0


_ALL_DIAGNOSTICS = ("norms", "geometry", "edges", "linearity", "channels")


def cmd_diagnose(args):
    import numpy as np

    from . import autodiff as ad
    from . import diagnostics, nn
    from .objectives import EdgeRegConfig

    doc = resolve_config(args)
    outdir = _outdir(doc, "diagnose")
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    net = nn.load_network(args.checkpoint[0])
    net.norm_mode = "eval"
    _, test_ds = build_datasets(doc)
    sec = doc.get("diagnostics", {})
    cap = int(sec.get("max_examples", 64))
    n = min(cap, len(test_ds.labels))
    if n == 0:
        raise EmptyDataset("diagnose dataset has no examples")
    subset = test_ds.subset(range(n))
    which = sec.get("which", list(_ALL_DIAGNOSTICS))
    unknown = set(which) - set(_ALL_DIAGNOSTICS)
    if unknown:
        raise ConfigError(f"unknown diagnostics {sorted(unknown)}; "
                          f"valid: {list(_ALL_DIAGNOSTICS)}")

    summary = {"examples": n}
    outputs = {"summary": "diagnose.json"}
    with ad.count_passes() as run_counter:
        if "norms" in which:
            stats = diagnostics.gradient_norm_stats(net, subset, build_attack(doc),
                                                    seed=seed)
            summary["norms"] = stats.to_dict()
            rows = [[i, float(stats.per_example_l1[i]), int(stats.success_mask[i])]
                    for i in range(n)]
            _write_csv(os.path.join(outdir, "norms_examples.csv"),
                       ("index", "grad_l1", "correct_after_attack"), rows)
            edges_, c_ok, c_bad = diagnostics.correctness_conditioned_norm_distribution(
                net, subset, bins=int(sec.get("bins", 32)))
            hist_rows = [[float(edges_[i]), float(edges_[i + 1]),
                          int(c_ok[i]), int(c_bad[i])] for i in range(len(c_ok))]
            _write_csv(os.path.join(outdir, "norms_hist.csv"),
                       ("bin_lo", "bin_hi", "count_correct", "count_incorrect"),
                       hist_rows)
            outputs["norms_examples"] = "norms_examples.csv"
            outputs["norms_hist"] = "norms_hist.csv"
        if "geometry" in which:
            geo = diagnostics.geometry_stats(net, subset,
                                             power_iters=int(sec.get("power_iters", 20)),
                                             seed=seed)
            summary["geometry"] = geo.to_dict()
            rows = []
            for i, r in enumerate(geo.per_example):
                rows.append([i, float(r.grad_l2), float(r.hess_spec),
                             None if r.curvature is None else float(r.curvature),
                             float(r.eigen_sign), int(r.iterations), int(r.converged)])
            _write_csv(os.path.join(outdir, "geometry.csv"),
                       ("index", "grad_l2", "hess_spec", "curvature",
                        "eigen_sign", "iterations", "converged"), rows)
            outputs["geometry"] = "geometry.csv"
        if "edges" in which:
            corr = diagnostics.edge_correlation(net, subset, EdgeRegConfig())
            summary["edges"] = corr.to_dict()
            rows = [["saliency", i, float(v)]
                    for i, v in enumerate(corr.saliency_values)]
            rows += [["lossgrad", i, float(v)]
                     for i, v in enumerate(corr.lossgrad_values)]
            _write_csv(os.path.join(outdir, "edges.csv"),
                       ("map", "index", "log_log_pearson"), rows)
            outputs["edges"] = "edges.csv"
        if "linearity" in which:
            probe = diagnostics.LinearityProbe(
                samples_per_example=int(sec.get("samples_per_example", 8)),
                epsilon=float(sec.get("epsilon", 4.0 / 255.0)))
            rng = np.random.default_rng([seed, 5])
            errors = diagnostics.local_linearity_error(
                net, subset.images, subset.labels, probe, rng)
            summary["linearity"] = {"mean_error": float(np.mean(errors)),
                                    "epsilon": probe.epsilon,
                                    "samples_per_example": probe.samples_per_example}
            _write_csv(os.path.join(outdir, "linearity.csv"),
                       ("index", "squared_defect"),
                       [[i, float(e)] for i, e in enumerate(errors)])
            outputs["linearity"] = "linearity.csv"
        if "channels" in which:
            edges_, counts, underflow = diagnostics.channel_magnitude_histogram(
                net, subset)
            summary["channels"] = {"underflow": [int(u) for u in underflow]}
            rows = []
            for ch in range(counts.shape[0]):
                for b in range(counts.shape[1]):
                    rows.append([ch, float(edges_[b]), float(edges_[b + 1]),
                                 int(counts[ch, b])])
            _write_csv(os.path.join(outdir, "channels_hist.csv"),
                       ("channel", "log10_lo", "log10_hi", "count"), rows)
            outputs["channels_hist"] = "channels_hist.csv"

    _write_json(os.path.join(outdir, "diagnose.json"), summary)
    write_manifest(outdir, "diagnose", doc, seed, outputs,
                   {"run_total": run_counter.total}, time.perf_counter() - t0)
    print(f"diagnose: wrote {sorted(outputs.values())} -> {outdir}")
    return 0


def cmd_sweep(args):
    import numpy as np

    from . import autodiff as ad
    from . import attacks, diagnostics, nn, training

    doc = resolve_config(args)
    outdir = _outdir(doc, "sweep")
    seed = args.seed if args.seed is not None else doc.get("schedule", {}).get("seed", 0)
    t0 = time.perf_counter()
    kind = args.kind
    outputs = {}
    with ad.count_passes() as run_counter:
        if kind == "lambda":
            grid = doc.get("objective", {}).get("lambda_grid")
            if not grid:
                raise ConfigError("lambda sweep needs objective.lambda_grid")
            train_ds, test_ds = build_datasets(doc)
            net = build_network(doc, train_ds, seed)
            cfg = build_training_config(doc)
            rows = training.lambda_sweep(net, (train_ds, test_ds), grid, cfg)
            _write_csv(os.path.join(outdir, "sweep_lambda.csv"),
                       ("lambda", "clean_acc", "robust_acc"), rows)
            outputs["curve"] = "sweep_lambda.csv"
        elif kind == "epsilon":
            if not args.checkpoint:
                raise ConfigError("epsilon sweep needs a checkpoint argument")
            net = nn.load_network(args.checkpoint[0])
            net.norm_mode = "eval"
            _, test_ds = build_datasets(doc)
            cap = int(doc.get("attack", {}).get("examples", 256))
            n = min(cap, len(test_ds.labels))
            if n == 0:
                raise EmptyDataset("sweep dataset has no examples")
            subset = test_ds.subset(range(n))
            cfg = build_attack(doc)
            grid = doc.get("attack", {}).get("eps_grid")
            if not grid:
                raise ConfigError("epsilon sweep needs attack.eps_grid")
            curve = attacks.epsilon_sweep(net, subset, cfg, grid, seed=seed)
            _write_csv(os.path.join(outdir, "sweep_epsilon.csv"),
                       ("epsilon", "robust_acc"), [list(r) for r in curve])
            outputs["curve"] = "sweep_epsilon.csv"
        elif kind == "interpolation":
            if not args.checkpoint:
                raise ConfigError("interpolation sweep needs a checkpoint argument")
            net = nn.load_network(args.checkpoint[0])
            net.norm_mode = "eval"
            _, test_ds = build_datasets(doc)
            sec = doc.get("diagnostics", {})
            cap = int(sec.get("max_examples", 16))
            n = min(cap, len(test_ds.labels))
            if n == 0:
                raise EmptyDataset("sweep dataset has no examples")
            subset = test_ds.subset(range(n))
            cfg = build_attack(doc)
            grid = sec.get("eps_grid")
            if not grid:
                grid = [round(cfg.epsilon * k / 4.0, 12) for k in range(5)]
            rows = diagnostics.attack_direction_sweep(
                net, subset, cfg, grid, seed=seed,
                power_iters=int(sec.get("power_iters", 10)))
            _write_csv(os.path.join(outdir, "sweep_interpolation.csv"),
                       ("eps", "loss", "grad_l1", "curvature"), rows)
            outputs["curve"] = "sweep_interpolation.csv"
        else:
            raise ConfigError(f"unknown sweep kind '{kind}'")
    write_manifest(outdir, f"sweep-{kind}", doc, seed, outputs,
                   {"run_total": run_counter.total}, time.perf_counter() - t0)
    print(f"sweep: wrote {outputs['curve']} -> {outdir}")
    return 0


def cmd_report(args):
    rundir = args.rundir
    path = os.path.join(rundir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read manifest: {e}")
    print(f"run: {manifest['command']} "
          f"(config {manifest['config_hash'][:12]}, seed {manifest['seed']})")
    print(f"artifact: {manifest['artifact_version']}")
    print(f"passes: {manifest['pass_counts']}")
    print(f"wall time: {manifest['wall_time_seconds']:.2f}s")
    for name, rel in sorted(manifest["outputs"].items()):
        print(f"  {name}: {rel}")
    log_rel = manifest["outputs"].get("train_log")
    if log_rel:
        from .training import TrainLog

        tl = TrainLog.from_csv(os.path.join(rundir, log_rel))
        if tl.rows:
            last = tl.rows[-1]
            print(f"final epoch {last['epoch']}: clean {last['clean_acc']:.4f} "
                  f"robust {last['robust_acc']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="robustgrad",
        description="Train, attack, and diagnose gradient-regularized classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoints=0):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--preset", help="preset name, optionally with key=value overrides")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        if checkpoints:
            p.add_argument("checkpoint", nargs=checkpoints, help="checkpoint path(s)")

    common(sub.add_parser("train", help="run the training loop"))
    common(sub.add_parser("attack", help="robustness report for a checkpoint"),
           checkpoints="+")
    common(sub.add_parser("diagnose", help="gradient diagnostics for a checkpoint"),
           checkpoints=1)
    sweep = sub.add_parser("sweep", help="curve over lambda/epsilon/interpolation")
    sweep.add_argument("kind", choices=("lambda", "epsilon", "interpolation"))
    common(sweep)
    sweep.add_argument("checkpoint", nargs="*", help="checkpoint (epsilon/interpolation)")
    report = sub.add_parser("report", help="summarize a finished run")
    report.add_argument("rundir")
    return parser


_HANDLERS = {"train": cmd_train, "attack": cmd_attack, "diagnose": cmd_diagnose,
             "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, EmptyDataset) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
