"""Per-unit importance scores for hidden units.

Three criteria are available:

* ``slim``: ``|gamma|`` of the unit's batch-normalisation scale;
* ``fc_activation``: mean absolute post-activation over a batch;
* ``lrp``: mean z+ relevance, seeded at the output with the softmax
  probability of the true class.

All return one nonnegative vector per hidden layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


def slim_importance(net: nn.Network) -> list[np.ndarray]:
    return [np.abs(layer.bn_gamma) for layer in net.layers[:-1]]


def fc_activation_importance(net: nn.Network, mask, batch, mode: str = "train") -> list[np.ndarray]:
    _, cache = nn.forward(net, mask, batch, mode=mode, update_stats=False)
    return [np.abs(a).mean(axis=0) for a in cache.hidden_outputs]


@dataclass
class Relevance:
    """Per-sample relevance at every layer, input first, output last."""

    layers: list[np.ndarray]
    dropped_columns: int = 0
    # lost[l]: per-sample mass dropped between layers l+1 and l
    lost: list[np.ndarray] = field(default_factory=list)

    @property
    def dropped_mass(self) -> np.ndarray:
        return np.sum(self.lost, axis=0)


def zplus_step(a: np.ndarray, w: np.ndarray, r_upper: np.ndarray):
    """Redistribute ``r_upper`` (n, out) onto the inputs ``a`` (n, in).

    ``R_i = sum_j (a_i w_ij)^+ / sum_i' (a_i' w_i'j)^+ * R_j``.  Columns
    whose positive contributions sum to zero cannot pass relevance down;
    their relevance is dropped and counted.
    """
    z = np.maximum(a[:, :, None] * w[None, :, :], 0.0)  # (n, in, out)
    denom = z.sum(axis=1)  # (n, out)
    dead = denom <= 0
    ratio = np.divide(r_upper, denom, out=np.zeros_like(r_upper), where=~dead)
    r_lower = np.einsum("nio,no->ni", z, ratio)
    lost = np.where(dead, r_upper, 0.0).sum(axis=1)
    return r_lower, int(np.count_nonzero(dead & (r_upper != 0))), lost


def lrp_relevance(net: nn.Network, mask, batch: nn.Batch, mode: str = "train") -> Relevance:
    logits, cache = nn.forward(net, mask, batch, mode=mode, update_stats=False)
    prob = nn.softmax(logits)
    r = np.zeros_like(logits)
    rows = np.arange(len(batch))
    r[rows, batch.labels] = prob[rows, batch.labels]
    layers, lost = [r], []
    dropped = 0
    for layer, c in zip(reversed(net.layers), reversed(cache.layers)):
        r, d, l = zplus_step(c.inputs, layer.weights, r)
        dropped += d
        lost.append(l)
        layers.append(r)
    return Relevance(layers[::-1], dropped, lost[::-1])


def lrp_importance(net: nn.Network, mask, batch: nn.Batch, mode: str = "train") -> list[np.ndarray]:
    rel = lrp_relevance(net, mask, batch, mode=mode)
    return [np.maximum(r.mean(axis=0), 0.0) for r in rel.layers[1:-1]]


def compute_importance(kind: str, net: nn.Network, batch: nn.Batch | None = None) -> list[np.ndarray]:
    """Dispatch by criterion name; data-driven criteria score every unit."""
    if kind == "slim":
        return slim_importance(net)
    if batch is None:
        raise ValueError(f"importance {kind!r} needs a batch")
    full = nn.full_mask(net)
    if kind == "lrp":
        return lrp_importance(net, full, batch)
    if kind == "fc_activation":
        return fc_activation_importance(net, full, batch)
    raise ValueError(f"unknown importance {kind!r}")


def normalize(scores: list[np.ndarray]) -> list[np.ndarray]:
    """Scale each layer to unit standard deviation.

    Keep probabilities depend on ``b`` only through ``(b - beta) / eps`` and the
    shift absorbs any offset, so the spread is what sets the effective
    temperature.  Layers with no spread (e.g. a fresh network) become all ones.
    """
    out = []
    for s in scores:
        sd = float(s.std())
        out.append(s / sd if sd > 1e-12 * max(float(s.max()), 1.0) else np.ones_like(s))
    return out
