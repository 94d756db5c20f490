"""Minimal fully-connected network with per-unit masking.

Hidden layers compute ``Dense -> BatchNorm -> ReLU`` and the result is
multiplied by a per-unit gate (the mask).  The output layer is a plain dense
map producing logits.  Forward and backward passes are written out by hand;
everything runs in float64.

A mask is a list with one vector per hidden layer.  Entries are normally 0/1
but any real value is accepted, which is what makes the straight-through
unit gradients checkable against finite differences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

PARAM_NAMES = ("weights", "bias", "bn_gamma", "bn_beta")
STAT_NAMES = ("bn_running_mean", "bn_running_var")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    @property
    def has_norm(self) -> bool:
        return self.bn_gamma is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def arrays(self) -> dict[str, np.ndarray]:
        """Every stored array (parameters and running statistics) by name."""
        names = PARAM_NAMES + STAT_NAMES if self.has_norm else PARAM_NAMES[:2]
        return {name: getattr(self, name) for name in names}


@dataclass
class Network:
    layers: list[DenseLayer]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].shape[0]] + [layer.shape[1] for layer in self.layers]

    @property
    def hidden_sizes(self) -> list[int]:
        return self.layer_sizes[1:-1]

    @property
    def num_samplable(self) -> int:
        return sum(self.hidden_sizes)

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise InvalidInputError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} do not align"
            )
        if len(self.labels) == 0:
            raise InvalidInputError("batch is empty")

    def __len__(self):
        return len(self.labels)


@dataclass
class LayerCache:
    inputs: np.ndarray
    z: np.ndarray
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    y: np.ndarray | None = None
    act: np.ndarray | None = None  # post-ReLU, before the gate
    out: np.ndarray | None = None  # gated output fed to the next layer
    gate: np.ndarray | None = None
    train: bool = False


@dataclass
class ActivationCache:
    layers: list[LayerCache] = field(default_factory=list)

    @property
    def hidden_outputs(self) -> list[np.ndarray]:
        """Gated activations ``a^l`` of every hidden layer."""
        return [c.out for c in self.layers[:-1]]


def init_network(layer_sizes, rng: np.random.Generator) -> Network:
    """He-uniform weights, zero biases, unit BN scale."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidInputError(f"bad layer sizes {sizes}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layer = DenseLayer(weights=w, bias=np.zeros(fan_out))
        if i < len(sizes) - 2:
            layer.bn_gamma = np.ones(fan_out)
            layer.bn_beta = np.zeros(fan_out)
            layer.bn_running_mean = np.zeros(fan_out)
            layer.bn_running_var = np.ones(fan_out)
        layers.append(layer)
    return Network(layers)


def full_mask(net: Network) -> list[np.ndarray]:
    return [np.ones(c) for c in net.hidden_sizes]


def check_mask(net: Network, mask, binary: bool = False) -> list[np.ndarray]:
    sizes = net.hidden_sizes
    if len(mask) != len(sizes):
        raise InvalidInputError(f"mask has {len(mask)} layers, network has {len(sizes)} hidden")
    out = []
    for k, (m, c) in enumerate(zip(mask, sizes)):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (c,):
            raise InvalidInputError(f"mask layer {k} has shape {m.shape}, expected ({c},)")
        if binary:
            if not np.all((m == 0) | (m == 1)):
                raise InvalidInputError(f"mask layer {k} is not binary")
            if not m.any():
                raise InvalidInputError(f"mask layer {k} has no active unit")
        out.append(m)
    return out


def flatten_mask(mask) -> np.ndarray:
    """Index map: concatenation of the per-layer masks."""
    return np.concatenate([np.asarray(m) for m in mask]).astype(np.uint8)


def unflatten_mask(index_map, hidden_sizes) -> list[np.ndarray]:
    index_map = np.asarray(index_map)
    if index_map.shape != (sum(hidden_sizes),):
        raise InvalidInputError(
            f"index map length {index_map.size} != samplable units {sum(hidden_sizes)}"
        )
    bounds = np.cumsum([0] + list(hidden_sizes))
    return [index_map[a:b].astype(np.float64) for a, b in zip(bounds[:-1], bounds[1:])]


def forward(net: Network, mask, batch, mode: str = "eval", update_stats: bool = True):
    """Run the masked network.

    ``mode="train"`` normalises with batch statistics and, when
    ``update_stats`` is set, folds them into the running statistics of the
    active units (units with a zero gate keep theirs).  ``mode="eval"`` uses
    the running statistics.  ``batch`` may be a :class:`Batch` or a bare
    input matrix.  Returns ``(logits, cache)``.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    mask = check_mask(net, mask)
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise InvalidInputError(f"inputs {x.shape} do not match width {net.layer_sizes[0]}")
    train = mode == "train"
    cache = ActivationCache()
    h = x
    for layer, gate in zip(net.layers[:-1], mask):
        z = h @ layer.weights + layer.bias
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                active = gate != 0
                n = z.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                rm, rv = layer.bn_running_mean, layer.bn_running_var
                rm[active] = BN_MOMENTUM * rm[active] + (1 - BN_MOMENTUM) * mu[active]
                rv[active] = BN_MOMENTUM * rv[active] + (1 - BN_MOMENTUM) * unbiased[active]
        else:
            mu, var = layer.bn_running_mean, layer.bn_running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        y = layer.bn_gamma * xhat + layer.bn_beta
        act = np.maximum(y, 0.0)
        out = act * gate
        cache.layers.append(LayerCache(h, z, xhat, inv_std, y, act, out, gate, train))
        h = out
    last = net.layers[-1]
    logits = h @ last.weights + last.bias
    cache.layers.append(LayerCache(h, logits))
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(labels)), labels]))


def _check_labels(net: Network, batch: Batch):
    d_out = net.layer_sizes[-1]
    if batch.labels.min() < 0 or batch.labels.max() >= d_out:
        raise InvalidInputError(f"labels outside [0, {d_out})")


def loss_and_grads(net: Network, mask, batch: Batch, mode: str = "train", update_stats: bool = True):
    """Mean softmax cross-entropy and its gradients.

    Returns ``(loss, weight_grads, unit_grads)``: ``weight_grads`` holds one
    dict per layer keyed like the layer's parameters, ``unit_grads`` one
    vector per hidden layer with dL/d(gate) -- the straight-through gradient
    of each sampled mask entry.
    """
    _check_labels(net, batch)
    logits, cache = forward(net, mask, batch, mode=mode, update_stats=update_stats)
    n = len(batch)
    loss = cross_entropy(logits, batch.labels)

    d = softmax(logits)
    d[np.arange(n), batch.labels] -= 1.0
    d /= n

    grads: list[dict] = [None] * len(net.layers)
    unit_grads: list[np.ndarray] = [None] * (len(net.layers) - 1)

    last = net.layers[-1]
    lc = cache.layers[-1]
    grads[-1] = {"weights": lc.inputs.T @ d, "bias": d.sum(axis=0)}
    dh = d @ last.weights.T

    for k in range(len(net.layers) - 2, -1, -1):
        layer, c = net.layers[k], cache.layers[k]
        unit_grads[k] = (dh * c.act).sum(axis=0)
        dy = dh * c.gate * (c.y > 0)
        g_gamma = (dy * c.xhat).sum(axis=0)
        g_beta = dy.sum(axis=0)
        dxhat = dy * layer.bn_gamma
        if c.train:
            m = dxhat.shape[0]
            dz = c.inv_std / m * (
                m * dxhat - dxhat.sum(axis=0) - c.xhat * (dxhat * c.xhat).sum(axis=0)
            )
        else:
            dz = dxhat * c.inv_std
        grads[k] = {
            "weights": c.inputs.T @ dz,
            "bias": dz.sum(axis=0),
            "bn_gamma": g_gamma,
            "bn_beta": g_beta,
        }
        dh = dz @ layer.weights.T

    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, grads, unit_grads


def sgd_step(net: Network, grads, lr: float) -> None:
    for layer, g in zip(net.layers, grads):
        for name, value in g.items():
            getattr(layer, name)[...] -= lr * value


def predict(net: Network, mask, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Eval-mode logits, chunked so large test sets stay cheap."""
    parts = [
        forward(net, mask, inputs[start : start + chunk], mode="eval")[0]
        for start in range(0, len(inputs), chunk)
    ]
    return np.concatenate(parts, axis=0)


def evaluate(net: Network, mask, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Eval-mode ``(loss, accuracy)``."""
    logits = predict(net, mask, inputs)
    labels = np.asarray(labels)
    return cross_entropy(logits, labels), float(np.mean(logits.argmax(axis=1) == labels))


def masked_counts(net: Network, mask) -> tuple[int, int]:
    """Parameters and FLOPs of the subnet selected by ``mask``.

    A weight counts when both endpoints are active; bias plus the four
    normalisation scalars count per active unit.  FLOPs are
    ``2*in*out`` per dense layer plus ``2*out`` per normalisation.
    """
    mask = check_mask(net, mask)
    active = [net.layer_sizes[0]] + [int(np.count_nonzero(m)) for m in mask] + [net.layer_sizes[-1]]
    params = flops = 0
    for i, layer in enumerate(net.layers):
        a_in, a_out = active[i], active[i + 1]
        params += a_in * a_out + a_out
        flops += 2 * a_in * a_out
        if layer.has_norm:
            params += 4 * a_out
            flops += 2 * a_out
    return params, flops


def extract_subnet(net: Network, mask) -> list[dict[str, np.ndarray]]:
    """Copy out the parameters whose endpoints are all active."""
    mask = check_mask(net, mask, binary=True)
    idx = [np.arange(net.layer_sizes[0])] + [np.flatnonzero(m) for m in mask]
    idx.append(np.arange(net.layer_sizes[-1]))
    theta = []
    for i, layer in enumerate(net.layers):
        rows, cols = idx[i], idx[i + 1]
        block = {"weights": layer.weights[np.ix_(rows, cols)].copy()}
        for name, arr in layer.arrays().items():
            if name != "weights":
                block[name] = arr[cols].copy()
        theta.append(block)
    return theta


def shrink(net: Network, mask) -> Network:
    """Physically delete masked units, returning a smaller dense network."""
    theta = extract_subnet(net, mask)
    layers = []
    for block in theta:
        layers.append(DenseLayer(**{k: v.copy() for k, v in block.items()}))
    return Network(layers)
