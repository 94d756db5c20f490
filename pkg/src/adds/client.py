"""One participant's local round.

Per local epoch the client refreshes unit importance, solves the per-layer
shift, draws one Bernoulli subnet, takes one descent step on every keep
ratio using a validation minibatch through that subnet, and then makes a
full pass of SGD over its training split on the same subnet.  At the end the architecture is
hardened to the top ``ceil(alpha*C)`` units per layer and the surviving
parameters are uploaded together with the index map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import importance, nn, sampler
from .data import Dataset, uniform_jsd
from .errors import ClientDivergedError, InvalidInputError, NumericError

log = logging.getLogger(__name__)

# independent generator streams per (seed, client, round)
STREAM_SPLIT, STREAM_SHUFFLE, STREAM_SAMPLE = 1, 2, 3


def stream_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class ClientConfig:
    local_epochs: int = 3
    batch_size: int = 32
    lr_weights: float = 0.05
    lr_alpha: float = 0.01
    val_fraction: float = 0.1
    alpha_min: float = 0.05
    freeze_alpha: bool = False
    importance: str = "slim"
    root_tolerance: float = 1e-8
    val_bn_mode: str = "eval"
    seed: int = 0


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    test: Dataset
    label_histogram: np.ndarray
    lam: float
    sparseness: sampler.SparsenessVector
    jsd: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")


@dataclass
class ClientUpdate:
    client_id: int
    theta: list[dict[str, np.ndarray]]
    index_map: np.ndarray
    n_k: int
    alpha: np.ndarray
    beta: np.ndarray
    metrics: dict = field(default_factory=dict)


def lambda_from_jsd(label_histogram, num_classes=None) -> float:
    """``0.5 + JSD_2(hist || uniform)``; base-2 JSD already lies in [0, 1]."""
    hist = np.asarray(label_histogram, dtype=np.float64)
    if num_classes is not None and hist.size != num_classes:
        raise InvalidInputError("histogram length != num_classes")
    return uniform_jsd(hist) + 0.5


def split_local_data(n: int, rng: np.random.Generator, val_fraction: float = 0.1):
    """Random train/validation index split of a local pool of ``n`` samples."""
    if n < 10:
        raise InvalidInputError(f"{n} samples is too few for a validation split")
    n_val = max(1, int(round(n * val_fraction)))
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _keep_probabilities(scores, alpha, epsilon, tol):
    """Per layer ``(p, beta)``; ``p`` is None for layers kept whole (alpha = 1)."""
    out = []
    for b, a in zip(scores, alpha):
        if a >= 1.0:
            out.append((None, -np.inf))
            continue
        beta = sampler.solve_shift(b, a, epsilon, tol)
        out.append((sampler.sampling_prob(b, beta, epsilon), beta))
    return out


def _draw(probs, scores, rng):
    return [
        np.ones(len(b)) if p is None else sampler.sample_mask(p, rng, importance=b)
        for (p, _), b in zip(probs, scores)
    ]


def hardened_mask(scores, alpha) -> list[np.ndarray]:
    return [np.ones(len(b)) if a >= 1.0 else sampler.harden(b, a) for b, a in zip(scores, alpha)]


def _importance(cfg: ClientConfig, net: nn.Network, batch: nn.Batch):
    return importance.normalize(importance.compute_importance(cfg.importance, net, batch))


def local_round(
    supernet: nn.Network,
    state: ClientState,
    round_index: int,
    epsilon: float,
    cfg: ClientConfig,
    fixed_mask=None,
) -> ClientUpdate:
    """Run one client's local optimisation on a private copy of ``supernet``.

    With ``fixed_mask`` the architecture is not learned: the client runs
    plain local SGD on that subnet (FedAvg with a full mask, FedDrop with a
    shared random one).  ``cfg.freeze_alpha`` likewise keeps the keep
    ratios at their current values.
    """
    net = supernet.copy()
    cid = state.client_id
    rng_shuffle = stream_rng(cfg.seed, cid, round_index, STREAM_SHUFFLE)
    rng_sample = stream_rng(cfg.seed, cid, round_index, STREAM_SAMPLE)
    X, y = state.train.features, state.train.labels
    learn_arch = fixed_mask is None and not cfg.freeze_alpha
    if learn_arch:
        rng_split = stream_rng(cfg.seed, cid, round_index, STREAM_SPLIT)
        train_idx, val_idx = split_local_data(len(y), rng_split, cfg.val_fraction)
        val = nn.Batch(X[val_idx], y[val_idx])
    else:
        train_idx, val = np.arange(len(y)), None
    if fixed_mask is not None:
        fixed_mask = nn.check_mask(net, fixed_mask, binary=True)
        alpha = np.array([m.mean() for m in fixed_mask])
    else:
        alpha = state.sparseness.alpha.copy()
    score_batch = val if val is not None else nn.Batch(X[train_idx], y[train_idx])

    lam = state.lam
    betas = np.full(len(alpha), -np.inf)
    losses = []
    try:
        for _ in range(cfg.local_epochs):
            if fixed_mask is None:
                scores = _importance(cfg, net, score_batch)
                probs = _keep_probabilities(scores, alpha, epsilon, cfg.root_tolerance)
                omega = _draw(probs, scores, rng_sample)
            else:
                omega = fixed_mask
            if learn_arch:
                if len(val) > cfg.batch_size:
                    pick = rng_sample.choice(len(val), cfg.batch_size, replace=False)
                    vb = nn.Batch(val.inputs[pick], val.labels[pick])
                else:
                    vb = val
                _, _, unit_grads = nn.loss_and_grads(net, omega, vb, mode=cfg.val_bn_mode, update_stats=False)
                _, reg_grad = sampler.regularizer(alpha, lam)
                for k, (p, _) in enumerate(probs):
                    g = 0.0 if p is None else sampler.sparseness_grad(unit_grads[k], p).value
                    alpha[k] = sampler.update_alpha(alpha[k], g + reg_grad[k], cfg.lr_alpha, cfg.alpha_min)
                probs = _keep_probabilities(scores, alpha, epsilon, cfg.root_tolerance)
            if fixed_mask is None:
                betas = np.array([beta for _, beta in probs])

            epoch_losses = []
            order = rng_shuffle.permutation(train_idx)
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, grads, _ = nn.loss_and_grads(net, omega, nn.Batch(X[idx], y[idx]), mode="train")
                nn.sgd_step(net, grads, cfg.lr_weights)
                epoch_losses.append(loss)
            losses = epoch_losses
    except NumericError as exc:
        raise ClientDivergedError(f"client {cid} diverged in round {round_index}: {exc}") from exc

    if fixed_mask is not None:
        final = fixed_mask
    else:
        final = hardened_mask(_importance(cfg, net, score_batch), alpha)
    test_loss, test_acc = nn.evaluate(net, final, state.test.features, state.test.labels)
    params, flops = nn.masked_counts(net, final)
    full_params, full_flops = nn.masked_counts(net, nn.full_mask(net))
    metrics = {
        "train_loss": float(np.mean(losses)) if losses else float("nan"),
        "local_loss": test_loss,
        "local_acc": test_acc,
        "params": params,
        "flops": flops,
        "params_ratio": params / full_params,
        "flops_ratio": flops / full_flops,
    }
    return ClientUpdate(
        client_id=cid,
        theta=nn.extract_subnet(net, final),
        index_map=nn.flatten_mask(final),
        n_k=len(train_idx),
        alpha=alpha,
        beta=betas,
        metrics=metrics,
    )
