"""Entropy-based exit assessment and the exit-layer predictor.

The predictor is a small ReLU MLP that regresses the entropy-based exit layer
from the entropy observed after the first layer. For deployment it is
distilled into a uniform lookup table over ``[0, ln K]`` so that a prediction
costs one index computation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


def entropy_naive(logits) -> float:
    """ln(sum e^x) - sum(x e^x) / sum(e^x), with no overflow protection."""
    x = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(x)
        s = e.sum()
        return float(np.log(s) - (x * e).sum() / s)


def entropy_stable(logits) -> float:
    """Max-shifted entropy, exact for any finite logit magnitude.

    With z = x - max(x) and S = sum(e^z): H = ln S - sum(z e^z) / S. The result
    is clamped to [0, ln K] to absorb last-ulp rounding.
    """
    return float(entropy_stable_rows(np.asarray(logits, dtype=np.float64)[None, :])[0])


def entropy_stable_rows(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1)
    h = np.log(s) - (z * e).sum(axis=-1) / s
    return np.clip(h, 0.0, math.log(x.shape[-1]))


def assess_exit(h: float, threshold: float) -> bool:
    return h < threshold


def exit_layers(traces, threshold: float) -> np.ndarray:
    """First 1-based layer with entropy below ``threshold``, else the last layer."""
    t = np.atleast_2d(np.asarray(traces, dtype=np.float64))
    below = t < threshold
    first = np.argmax(below, axis=1) + 1
    return np.where(below.any(axis=1), first, t.shape[1]).astype(np.int64)


@dataclass(frozen=True)
class TrainParams:
    hidden: tuple[int, ...] = (64, 64, 64)
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 3e-3
    seed: int = 0

    @classmethod
    def weight_layer_reading(cls, **kw) -> "TrainParams":
        """Four hidden layers, counting five weight layers rather than five neuron layers."""
        return cls(hidden=(64, 64, 64, 64), **kw)


@dataclass(frozen=True)
class ExitPredictor:
    weights: tuple  # ((W, b), ...) applied to H1 / ln K
    num_layers: int
    num_classes: int
    entropy_threshold: float
    lut_edges: np.ndarray | None = None  # upper bin edges
    lut_layers: np.ndarray | None = None
    loss_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def max_entropy(self) -> float:
        return math.log(self.num_classes)

    def mlp(self, h1) -> np.ndarray:
        x = np.asarray(h1, dtype=np.float64).reshape(-1, 1) / self.max_entropy
        for i, (w, b) in enumerate(self.weights):
            x = x @ w + b
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
        return x[:, 0]

    def round_layer(self, y) -> np.ndarray:
        return np.clip(np.floor(np.asarray(y) + 0.5), 1, self.num_layers).astype(np.int64)


def _constant_net(value: float) -> tuple:
    return ((np.zeros((1, 1)), np.array([float(value)])),)


def _init_net(sizes, rng) -> list:
    net = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        net.append([w, np.zeros(fan_out)])
    return net


def _forward(net, x):
    acts = [x]
    for i, (w, b) in enumerate(net):
        x = x @ w + b
        if i < len(net) - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


def train_predictor(traces, threshold: float, params: TrainParams | None = None, *, num_classes: int) -> ExitPredictor:
    """Fit the MLP on (H1, true exit layer) pairs with MSE and Adam."""
    params = params or TrainParams()
    t = np.atleast_2d(np.asarray(traces, dtype=np.float64))
    if t.size == 0:
        raise ValueError("empty trace set")
    num_layers = t.shape[1]
    labels = exit_layers(t, threshold).astype(np.float64)
    kwargs = dict(num_layers=num_layers, num_classes=num_classes, entropy_threshold=float(threshold))
    if np.all(labels == labels[0]):
        return ExitPredictor(_constant_net(labels[0]), **kwargs)

    rng = np.random.default_rng(params.seed)
    x = (t[:, 0] / math.log(num_classes)).reshape(-1, 1)
    y = labels.reshape(-1, 1)
    net = _init_net((1, *params.hidden, 1), rng)
    net[-1][1][:] = y.mean()
    m = [[np.zeros_like(p) for p in layer] for layer in net]
    v = [[np.zeros_like(p) for p in layer] for layer in net]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    n = x.shape[0]
    for _ in range(params.epochs):
        order = rng.permutation(n)
        for start in range(0, n, params.batch_size):
            idx = order[start : start + params.batch_size]
            acts = _forward(net, x[idx])
            grad = 2.0 * (acts[-1] - y[idx]) / idx.size
            step += 1
            for li in range(len(net) - 1, -1, -1):
                w, b = net[li]
                gw = acts[li].T @ grad
                gb = grad.sum(axis=0)
                if li > 0:
                    grad = (grad @ w.T) * (acts[li] > 0)
                for pi, g in enumerate((gw, gb)):
                    m[li][pi] = beta1 * m[li][pi] + (1 - beta1) * g
                    v[li][pi] = beta2 * v[li][pi] + (1 - beta2) * g * g
                    mhat = m[li][pi] / (1 - beta1**step)
                    vhat = v[li][pi] / (1 - beta2**step)
                    net[li][pi] = net[li][pi] - params.learning_rate * mhat / (np.sqrt(vhat) + eps)
        history.append(float(np.mean((_forward(net, x)[-1] - y) ** 2)))
    weights = tuple((w.copy(), b.copy()) for w, b in net)
    return ExitPredictor(weights, loss_history=tuple(history), **kwargs)


def distill_lut(p: ExitPredictor, num_bins: int = 256) -> ExitPredictor:
    """Uniform bins over [0, ln K]; each bin holds the rounded MLP output at its center."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    width = p.max_entropy / num_bins
    edges = width * np.arange(1, num_bins + 1)
    edges[-1] = p.max_entropy
    centers = width * (np.arange(num_bins) + 0.5)
    return replace(p, lut_edges=edges, lut_layers=p.round_layer(p.mlp(centers)))


def lut_bin(p: ExitPredictor, h1) -> np.ndarray:
    idx = np.searchsorted(p.lut_edges, np.asarray(h1, dtype=np.float64), side="right")
    return np.minimum(idx, len(p.lut_edges) - 1)


def predict_exit_layer(p: ExitPredictor, h1: float) -> int:
    """Predicted exit layer; entropies past the last edge use the last bin."""
    if p.lut_layers is None:
        return int(p.round_layer(p.mlp([h1]))[0])
    return int(p.lut_layers[lut_bin(p, h1)])


def lut_to_json(p: ExitPredictor) -> str:
    if p.lut_layers is None:
        raise ValueError("predictor has no LUT; call distill_lut first")
    rows = [[float(e), int(l)] for e, l in zip(p.lut_edges, p.lut_layers)]
    return json.dumps(rows)


def lut_from_json(text: str, *, num_layers: int, num_classes: int, threshold: float) -> ExitPredictor:
    rows = json.loads(text)
    if not rows:
        raise ValueError("empty LUT")
    edges = np.array([r[0] for r in rows], dtype=np.float64)
    layers = np.array([r[1] for r in rows], dtype=np.int64)
    if np.any(np.diff(edges) <= 0) or layers.min() < 1 or layers.max() > num_layers:
        raise ValueError("malformed LUT")
    return ExitPredictor(
        _constant_net(float(layers[0])), num_layers, num_classes, float(threshold), edges, layers
    )


def synthetic_traces(count: int, num_layers: int, num_classes: int, seed: int = 0, decay: float = 0.7) -> np.ndarray:
    """Traces H_l = H1 * decay^(l-1): strictly decreasing and fixed by H1."""
    rng = np.random.default_rng(seed)
    h1 = rng.uniform(0.0, math.log(num_classes), size=count)
    return h1[:, None] * decay ** np.arange(num_layers)[None, :]
