"""Small classifier networks on the tape: configs, forward, activations.

A network is a flat stack of layers described by plain dicts in
:class:`NetworkConfig` (conv / pool / norm / dense), one activation kind
applied after every conv and every hidden dense layer, and a final
dense head with no activation. Parameters are named tensors; networks
are cheap value objects, and :func:`swap_activation` returns a sibling
sharing the same parameter tensors.

Inputs are raw pixels in [0, 1]; if the config carries ``input_norm``
the per-channel standardization happens inside ``forward`` as recorded
constants, so input gradients and attack budgets both live in raw pixel
space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import ShapeMismatchError, Tensor

__all__ = [
    "ACTIVATION_KINDS",
    "NetworkConfig",
    "Network",
    "CheckpointMismatch",
    "activation",
    "forward",
    "init_network",
    "swap_activation",
    "preset_config",
    "save_network",
    "load_network",
]

ACTIVATION_KINDS = ("relu", "gelu", "silu", "softplus")

_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


class CheckpointMismatch(Exception):
    """Checkpoint tensors do not match the network config they claim."""


def activation(kind, z):
    """Apply one of the supported nonlinearities elementwise."""
    if kind == "relu":
        return ad.maximum(z, ad.zeros_like(z))
    if kind == "gelu":
        # tanh approximation: 0.5 z (1 + tanh(sqrt(2/pi) (z + 0.044715 z^3)))
        inner = ad.mul(ad.constant(np.asarray(_SQRT_2_OVER_PI, dtype=z.data.dtype)),
                       ad.add(z, 0.044715 * z * z * z))
        return 0.5 * z * (1.0 + ad.tanh(inner))
    if kind == "silu":
        return z * ad.sigmoid(z)
    if kind == "softplus":
        return ad.softplus(z)
    raise ValueError(f"unknown activation kind {kind!r}, expected one of {ACTIVATION_KINDS}")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; JSON-serializable via to_dict/from_dict.

    Layer dicts:
        {"kind": "conv", "out_channels": o, "kernel": k, "padding": p}
        {"kind": "pool", "window": w}
        {"kind": "norm"}
        {"kind": "dense", "width": w}

    The classifier head (dense to num_classes) is implicit and appended
    after the listed layers. ``input_norm`` is an optional (mean, std)
    pair applied per channel inside forward.
    """

    layers: tuple
    activation: str
    num_classes: int
    input_shape: tuple
    input_norm: tuple | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        if self.input_norm is not None and not float(self.input_norm[1]) > 0:
            raise ValueError("input_norm std must be positive")

    def to_dict(self):
        return {
            "layers": [dict(spec) for spec in self.layers],
            "activation": self.activation,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "input_norm": list(self.input_norm) if self.input_norm else None,
        }

    @staticmethod
    def from_dict(d):
        return NetworkConfig(
            layers=tuple(dict(spec) for spec in d["layers"]),
            activation=d["activation"],
            num_classes=int(d["num_classes"]),
            input_shape=tuple(int(v) for v in d["input_shape"]),
            input_norm=tuple(float(v) for v in d["input_norm"]) if d.get("input_norm") else None,
        )


@dataclass
class Network:
    """Parameterized classifier: config + named parameter tensors.

    ``buffers`` holds normalization running statistics (plain arrays,
    not differentiated). ``norm_mode`` selects batch statistics
    ("train") or frozen running statistics ("eval") in norm layers;
    with no norm layers it has no effect.
    """

    config: NetworkConfig
    params: dict
    buffers: dict = field(default_factory=dict)
    norm_mode: str = "train"

    def parameter_items(self):
        return list(self.params.items())

    def parameter_vector(self):
        """All parameters flattened into one f64 vector, in name order."""
        return np.concatenate([t.numpy().reshape(-1) for t in self.params.values()])

    def with_params(self, new_params):
        return Network(self.config, new_params, dict(self.buffers), self.norm_mode)


def _plan_shapes(config):
    """Walk layer specs, yielding (spec, in_shape) and the flat head width."""
    shape = tuple(config.input_shape)
    planned = []
    for spec in config.layers:
        kind = spec["kind"]
        planned.append((spec, shape))
        if kind == "conv":
            c, h, w = shape
            k, p = spec["kernel"], spec.get("padding", 0)
            shape = (spec["out_channels"], h + 2 * p - k + 1, w + 2 * p - k + 1)
            if shape[1] < 1 or shape[2] < 1:
                raise ShapeMismatchError(f"conv output collapses at {spec} from {(c, h, w)}")
        elif kind == "pool":
            c, h, w = shape
            win = spec["window"]
            if h % win or w % win:
                raise ShapeMismatchError(f"pool window {win} does not divide {h}x{w}")
            shape = (c, h // win, w // win)
        elif kind == "norm":
            if len(shape) != 3:
                raise ShapeMismatchError("norm layer requires a C,H,W input")
        elif kind == "dense":
            shape = (spec["width"],)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    flat = int(np.prod(shape))
    return planned, flat


def init_network(config, seed=0):
    """He-style normal initialization, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params = {}
    buffers = {}
    planned, flat = _plan_shapes(config)
    counts = {"conv": 0, "dense": 0, "norm": 0}
    for spec, in_shape in planned:
        kind = spec["kind"]
        if kind == "conv":
            counts["conv"] += 1
            name = f"conv{counts['conv']}"
            c_in = in_shape[0]
            k = spec["kernel"]
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec["out_channels"], c_in, k, k))
            params[f"{name}.w"] = Tensor(w, requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(spec["out_channels"]), requires_grad=True)
        elif kind == "dense":
            counts["dense"] += 1
            name = f"dense{counts['dense']}"
            fan_in = int(np.prod(in_shape))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, spec["width"]))
            params[f"{name}.w"] = Tensor(w, requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(spec["width"]), requires_grad=True)
        elif kind == "norm":
            counts["norm"] += 1
            name = f"norm{counts['norm']}"
            c = in_shape[0]
            params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(c)
            buffers[f"{name}.running_var"] = np.ones(c)
    head_fan = flat
    w = rng.normal(0.0, np.sqrt(1.0 / head_fan), size=(head_fan, config.num_classes))
    params["head.w"] = Tensor(w, requires_grad=True)
    params["head.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return Network(config, params, buffers)


def _flatten_if_needed(h):
    if h.ndim == 4:
        b = h.shape[0]
        return ad.reshape(h, (b, int(np.prod(h.shape[1:]))))
    return h


_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


def _batch_norm(net, name, h):
    gamma = net.params[f"{name}.gamma"]
    beta = net.params[f"{name}.beta"]
    if net.norm_mode == "train":
        mu = ad.mean(h, axis=(0, 2, 3), keepdims=True)
        centered = ad.sub(h, mu)
        var = ad.mean(ad.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        rm = net.buffers[f"{name}.running_mean"]
        rv = net.buffers[f"{name}.running_var"]
        rm += _BN_MOMENTUM * (mu.numpy().reshape(-1) - rm)
        rv += _BN_MOMENTUM * (var.numpy().reshape(-1) - rv)
    else:
        mu = ad.constant(net.buffers[f"{name}.running_mean"].reshape(1, -1, 1, 1))
        var = ad.constant(net.buffers[f"{name}.running_var"].reshape(1, -1, 1, 1))
        centered = ad.sub(h, mu)
    inv = ad.div(1.0, ad.sqrt(ad.add(var, _BN_EPS)))
    normed = ad.mul(centered, inv)
    g4 = ad.reshape(gamma, (1, gamma.size, 1, 1))
    b4 = ad.reshape(beta, (1, beta.size, 1, 1))
    return ad.add(ad.mul(normed, g4), b4)


def forward(net, x):
    """Logits for a batch; differentiable w.r.t. x and parameters."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    expected = tuple(net.config.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(f"input shape {x.shape} != (B, {expected})")
    with ad.forward_pass_scope():
        h = x
        if net.config.input_norm is not None:
            m, s = net.config.input_norm
            h = ad.mul(ad.sub(h, float(m)), 1.0 / float(s))
        counts = {"conv": 0, "dense": 0, "norm": 0}
        act = net.config.activation
        for spec in net.config.layers:
            kind = spec["kind"]
            if kind == "conv":
                counts["conv"] += 1
                name = f"conv{counts['conv']}"
                h = ad.conv2d(h, net.params[f"{name}.w"], padding=spec.get("padding", 0))
                b = net.params[f"{name}.b"]
                h = ad.add(h, ad.reshape(b, (1, b.size, 1, 1)))
                h = activation(act, h)
            elif kind == "pool":
                h = ad.avg_pool2d(h, spec["window"])
            elif kind == "norm":
                counts["norm"] += 1
                h = _batch_norm(net, f"norm{counts['norm']}", h)
            elif kind == "dense":
                counts["dense"] += 1
                name = f"dense{counts['dense']}"
                h = _flatten_if_needed(h)
                h = ad.add(ad.matmul(h, net.params[f"{name}.w"]), net.params[f"{name}.b"])
                h = activation(act, h)
        h = _flatten_if_needed(h)
        return ad.add(ad.matmul(h, net.params["head.w"]), net.params["head.b"])


def swap_activation(net, kind):
    """Same parameters, different nonlinearity."""
    cfg = net.config
    new_cfg = NetworkConfig(cfg.layers, kind, cfg.num_classes, cfg.input_shape, cfg.input_norm)
    return Network(new_cfg, net.params, net.buffers, net.norm_mode)


def preset_config(name, num_classes=10, input_shape=(1, 28, 28), activation="gelu",
                  input_norm=(0.5, 0.225)):
    """Reference architectures: "mlp-2x256" and "cnn-small"."""
    if name == "mlp-2x256":
        layers = ({"kind": "dense", "width": 256}, {"kind": "dense", "width": 256})
    elif name == "cnn-small":
        layers = (
            {"kind": "conv", "out_channels": 16, "kernel": 3, "padding": 1},
            {"kind": "pool", "window": 2},
            {"kind": "conv", "out_channels": 32, "kernel": 3, "padding": 1},
            {"kind": "pool", "window": 2},
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    return NetworkConfig(layers, activation, num_classes, tuple(input_shape),
                         tuple(input_norm) if input_norm else None)


def save_network(net, path, extra_config=None):
    """Checkpoint: config as the JSON document, parameters + buffers as tensors."""
    config = {"network": net.config.to_dict(), "norm_mode": net.norm_mode}
    if extra_config:
        config["extra"] = extra_config
    tensors = {f"param.{k}": v.numpy() for k, v in net.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in net.buffers.items()})
    serialize.save_tensors(path, config, tensors)


def load_network(path):
    """Rebuild a Network from a checkpoint written by save_network."""
    config, tensors = serialize.load_tensors(path)
    try:
        net_cfg = NetworkConfig.from_dict(config["network"])
    except (KeyError, TypeError) as e:
        raise CheckpointMismatch(f"{path}: config block unusable ({e})")
    reference = init_network(net_cfg, seed=0)
    params = {}
    for name, ref in reference.params.items():
        key = f"param.{name}"
        if key not in tensors:
            raise CheckpointMismatch(f"{path}: missing tensor {key}")
        arr = tensors[key]
        if arr.shape != ref.shape:
            raise CheckpointMismatch(
                f"{path}: tensor {key} shape {arr.shape} != expected {ref.shape}"
            )
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
    buffers = {}
    for name in reference.buffers:
        key = f"buffer.{name}"
        if key not in tensors:
            raise CheckpointMismatch(f"{path}: missing tensor {key}")
        buffers[name] = tensors[key].astype(np.float64)
    extra = set(tensors) - {f"param.{n}" for n in reference.params} - {
        f"buffer.{n}" for n in reference.buffers
    }
    if extra:
        raise CheckpointMismatch(f"{path}: unexpected tensors {sorted(extra)}")
    return Network(net_cfg, params, buffers, config.get("norm_mode", "train"))


def config_json(config):
    """Canonical JSON text for a NetworkConfig (sorted keys)."""
    return json.dumps(config.to_dict(), sort_keys=True)
