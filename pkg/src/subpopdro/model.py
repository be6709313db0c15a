"""Feedforward ReLU classifiers with hand-written backpropagation and Adam.

Logistic regression is the network with no hidden layers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from subpopdro.errors import ConfigError, NumericError

PROB_CLIP = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    hidden_sizes: tuple[int, ...] = ()
    dropout_p: float = 0.0
    weight_decay: float = 0.0
    init_seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.activation != "relu":
            raise ConfigError("only the relu activation is supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden_sizes": tuple(d.get("hidden_sizes", ()))})


@dataclass
class ModelParams:
    """Layer weights/biases plus Adam moment buffers.

    `arrays` alternates weight matrix and bias vector per layer:
    [W0, b0, W1, b1, ...]; `m` and `v` mirror it.
    """

    spec: ModelSpec
    arrays: list[np.ndarray]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(a) for a in self.arrays]
        if not self.v:
            self.v = [np.zeros_like(a) for a in self.arrays]

    @property
    def n_layers(self) -> int:
        return len(self.arrays) // 2

    @property
    def n_features(self) -> int:
        return self.arrays[0].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            [a.copy() for a in self.arrays],
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
            self.step,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def to_dict(self) -> dict:
        def pack(arrs):
            return [a.ravel().tolist() for a in arrs]

        return {
            "version": PARAMS_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "shapes": [list(a.shape) for a in self.arrays],
            "arrays": pack(self.arrays),
            "m": pack(self.m),
            "v": pack(self.v),
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if d.get("version") != PARAMS_FORMAT_VERSION:
            raise ConfigError(f"unsupported params format version {d.get('version')!r}")
        shapes = [tuple(s) for s in d["shapes"]]

        def unpack(key):
            return [np.array(vals, dtype=np.float64).reshape(s) for vals, s in zip(d[key], shapes)]

        return cls(ModelSpec.from_dict(d["spec"]), unpack("arrays"), unpack("m"), unpack("v"), int(d["step"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


def init(spec: ModelSpec, n_features: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, zero moments."""
    rng = np.random.default_rng(spec.init_seed)
    sizes = [n_features, *spec.hidden_sizes, 1]
    arrays = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return ModelParams(spec, arrays)


def sample_masks(params: ModelParams, n_rows: int, rng) -> list[np.ndarray] | None:
    """Inverted-dropout masks for each hidden activation (already scaled)."""
    p = params.spec.dropout_p
    if p == 0.0 or params.n_layers == 1:
        return None
    keep = 1.0 - p
    return [
        (rng.random((n_rows, params.arrays[2 * i].shape[1])) < keep) / keep
        for i in range(params.n_layers - 1)
    ]


def forward_cache(params: ModelParams, X: np.ndarray, masks):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ConfigError(f"expected {params.n_features} feature columns, got shape {X.shape}")
    acts = [X]
    h = X
    last = params.n_layers - 1
    for i in range(params.n_layers):
        z = h @ params.arrays[2 * i] + params.arrays[2 * i + 1]
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {i}")
        if i == last:
            return z[:, 0], acts
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    raise AssertionError("unreachable")


def logits(params: ModelParams, X, mode: str = "eval", rng=None) -> np.ndarray:
    masks = sample_masks(params, len(X), rng) if mode == "train" else None
    z, _ = forward_cache(params, X, masks)
    return z


def forward(params: ModelParams, X, mode: str = "eval", rng=None) -> np.ndarray:
    """Predicted probabilities; `mode="train"` applies dropout drawn from `rng`."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return expit(logits(params, X, mode, rng))


def cross_entropy(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return -(y * np.log(pc) + (1 - y) * np.log1p(-pc))


def weighted_loss_grad(params: ModelParams, X, y, weights, rng=None, mode: str = "train"):
    """Loss sum_i w_i * ce_i + weight_decay * 0.5 * sum ||W||^2 and its gradient.

    Biases are not decayed. In train mode the dropout mask is drawn from `rng`
    and the gradient is exact for that mask.
    """
    masks = sample_masks(params, len(X), rng) if mode == "train" else None
    z, acts = forward_cache(params, X, masks)
    return backward(params, z, acts, masks, y, weights)


def backward(params: ModelParams, z, acts, masks, y, weights):
    """Weighted loss and gradient from a cached `forward_cache` pass."""
    w = np.asarray(weights, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if w.shape != y.shape or w.shape != z.shape:
        raise ConfigError("weights must have one entry per batch row")
    if not np.any(w != 0):
        raise ConfigError("per-example weights are all zero")
    p = expit(z)
    loss = float(np.dot(w, cross_entropy(p, y)))
    # d ce / d z = p - y, except where the clip is active
    inside = (p >= PROB_CLIP) & (p <= 1.0 - PROB_CLIP)
    delta = (w * np.where(inside, p - y, 0.0))[:, None]

    wd = params.spec.weight_decay
    grads = [None] * len(params.arrays)
    for i in range(params.n_layers - 1, -1, -1):
        W = params.arrays[2 * i]
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if wd:
            grads[2 * i] = grads[2 * i] + wd * W
        if i > 0:
            delta = delta @ W.T
            delta = delta * (acts[i] > 0)
            if masks is not None:
                delta = delta * masks[i - 1]
    if wd:
        loss += 0.5 * wd * sum(float(np.sum(params.arrays[2 * i] ** 2)) for i in range(params.n_layers))
    return loss, grads


def optimizer_step(params: ModelParams, grads, learning_rate: float) -> ModelParams:
    """One Adam update, in place; returns `params`."""
    if len(grads) != len(params.arrays):
        raise ConfigError("gradient structure does not match params")
    for g, a in zip(grads, params.arrays):
        if g.shape != a.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    params.step += 1
    t = params.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for a, m, v, g in zip(params.arrays, params.m, params.v, grads):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        a -= learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params
