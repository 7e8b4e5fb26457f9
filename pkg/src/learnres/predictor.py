"""Feed-forward scale predictor mapping scene features to a clamped scale factor.

Two forward paths share one set of numpy parameters: :func:`predict_scale`
builds the network on a tape (used for gradient verification), while
:func:`forward` / :func:`backward` are the vectorized equivalents used by the
training loop.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .scale import ScaleConfig, clamp_scale_factor

ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_MAGIC = b"LRESCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32, 16)
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, 1]


@dataclass
class PredictorParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    @classmethod
    def from_flat(cls, cfg: PredictorConfig, flat) -> "PredictorParams":
        flat = np.asarray(flat, dtype=float)
        dims = cfg.layer_dims
        weights, biases, at = [], [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(flat[at:at + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            at += fan_in * fan_out
            biases.append(flat[at:at + fan_out].copy())
            at += fan_out
        if at != flat.size:
            raise ValueError(f"expected {at} parameters, got {flat.size}")
        return cls(weights, biases)

    def copy(self) -> "PredictorParams":
        return PredictorParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_params(cfg: PredictorConfig, zero_head: bool = True) -> PredictorParams:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) hidden weights, zero biases.

    With ``zero_head`` the output layer starts at zero, so an untrained
    predictor returns the same scale factor for every scene.
    """
    rng = np.random.default_rng(cfg.init_seed)
    dims = cfg.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if zero_head:
        weights[-1][:] = 0.0
    return PredictorParams(weights, biases)


def zero_params(cfg: PredictorConfig) -> PredictorParams:
    dims = cfg.layer_dims
    return PredictorParams([np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])],
                           [np.zeros(o) for o in dims[1:]])


def _act(name, x):
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


def _act_value(name, v):
    if name == "tanh":
        return 2.0 * ad.logistic(2.0 * v) - 1.0
    return ad.max_const(v, 0.0)


# --- vectorized path --------------------------------------------------------


def forward(params: PredictorParams, features: np.ndarray, activation: str = "tanh"):
    """Raw outputs for a (batch, input_dim) feature matrix plus a backward cache."""
    h = np.atleast_2d(np.asarray(features, dtype=float))
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else _act(activation, z)
        cache.append(h)
    return h[:, 0], cache


def backward(params: PredictorParams, cache, grad_out: np.ndarray, activation: str = "tanh"):
    """Parameter gradients given d(loss)/d(raw output) per batch row."""
    g = np.asarray(grad_out, dtype=float).reshape(-1, 1)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        h_in, h_out = cache[i], cache[i + 1]
        if i != n_layers - 1:
            g = g * (1.0 - h_out**2) if activation == "tanh" else g * (h_out > 0)
        gw[i] = h_in.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return PredictorParams(gw, gb)


def predict_phi(params: PredictorParams, features: np.ndarray, cfg: ScaleConfig,
                activation: str = "tanh") -> np.ndarray:
    """Inference-only clamped scale factors for a feature matrix."""
    raw, _ = forward(params, features, activation)
    s = 0.5 * (1.0 + np.tanh(0.5 * raw))
    return np.maximum(s * cfg.tau_max, cfg.tau_min)


# --- tape path --------------------------------------------------------------


def params_on_tape(params: PredictorParams, tape: ad.Tape):
    """Leaf Values for every weight and bias, in :meth:`PredictorParams.flat` order."""
    return [tape.var(x) for x in params.flat()]


def _unflatten_values(cfg: PredictorConfig, leaves):
    dims = cfg.layer_dims
    layers, at = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = [leaves[at + r * fan_out: at + (r + 1) * fan_out] for r in range(fan_in)]
        at += fan_in * fan_out
        b = leaves[at:at + fan_out]
        at += fan_out
        layers.append((w, b))
    return layers


def raw_on_tape(features, leaves, cfg: PredictorConfig):
    """Forward pass on the tape given flat parameter leaves; returns phi_raw."""
    features = [float(f) for f in features]
    if len(features) != cfg.input_dim:
        raise ValueError(f"expected {cfg.input_dim} features, got {len(features)}")
    layers = _unflatten_values(cfg, leaves)
    h = features
    for i, (w, b) in enumerate(layers):
        fan_out = len(b)
        z = [ad.vsum([b[j]] + [w[r][j] * h[r] for r in range(len(h))]) for j in range(fan_out)]
        h = z if i == len(layers) - 1 else [_act_value(cfg.activation, v) for v in z]
    return h[0]


def predict_scale(features, params: PredictorParams | list, cfg: ScaleConfig,
                  pcfg: PredictorConfig, tape: ad.Tape | None = None):
    """Return (phi, phi_raw) with phi_raw a Value on ``tape``.

    ``params`` may already be a list of leaf Values (see :func:`params_on_tape`).
    """
    if isinstance(params, PredictorParams):
        tape = tape or ad.Tape()
        leaves = params_on_tape(params, tape)
    else:
        leaves = params
    feats = np.asarray(features, dtype=float)
    if feats.shape != (pcfg.input_dim,):
        raise ValueError(f"expected feature vector of length {pcfg.input_dim}, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    phi_raw = raw_on_tape(feats, leaves, pcfg)
    return clamp_scale_factor(phi_raw, cfg), phi_raw


# --- checkpoint -------------------------------------------------------------


def save_checkpoint(path, cfg: PredictorConfig, params: PredictorParams, extra: dict | None = None,
                    tail: np.ndarray | None = None) -> None:
    """Write ``magic | u32 version | u32 header_len | JSON header | <f8 array``.

    The array holds the flattened parameters followed by ``tail`` (if any);
    the header records both lengths.
    """
    tail = np.zeros(0) if tail is None else np.asarray(tail, dtype=float)
    header = {
        "predictor": {**asdict(cfg), "hidden_dims": list(cfg.hidden_dims)},
        "n_params": params.size,
        "n_tail": int(tail.size),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.concatenate([params.flat(), tail]).astype("<f8").tobytes()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(body)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return (PredictorConfig, PredictorParams, tail array, extra dict)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arr = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(float)
    n = header["n_params"]
    if arr.size != n + header["n_tail"]:
        raise ValueError("checkpoint body length does not match header")
    cfg = PredictorConfig(**header["predictor"])
    return cfg, PredictorParams.from_flat(cfg, arr[:n]), arr[n:], header["extra"]
