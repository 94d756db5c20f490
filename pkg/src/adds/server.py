"""Round orchestration and aggregation of heterogeneous subnets."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import nn, sampler
from .client import ClientConfig, ClientState, ClientUpdate, lambda_from_jsd, local_round, stream_rng
from .data import Dataset, dirichlet_partition, label_histogram, load_csv_dataset, make_blobs, shard_partition, uniform_jsd
from .errors import ClientDivergedError, InvalidInputError

log = logging.getLogger(__name__)

# server-side generator streams, keyed with the experiment seed
STREAM_DATA, STREAM_PARTITION, STREAM_HOLDOUT, STREAM_INIT = 11, 12, 13, 14
STREAM_SELECT, STREAM_FEDDROP, STREAM_CENTRAL, STREAM_LOCAL_SPLIT = 21, 22, 23, 24


@dataclass
class RoundReport:
    round: int
    global_acc: float
    global_loss: float
    mean_local_acc: float
    std_local_acc: float
    mean_params_ratio: float
    mean_flops_ratio: float
    mean_alpha: list[float]
    epsilon: float
    participants: list[int]
    rejected: list[int] = field(default_factory=list)


@dataclass
class Federation:
    """Everything fixed before round 1."""

    supernet: nn.Network
    clients: dict[int, ClientState]
    test: Dataset
    dataset: Dataset


def select_clients(all_ids, fraction: float, rng: np.random.Generator) -> list[int]:
    if not 0 < fraction <= 1:
        raise InvalidInputError("participation fraction must be in (0, 1]")
    ids = sorted(all_ids)
    k = min(len(ids), math.ceil(fraction * len(ids) - 1e-9))
    return sorted(int(i) for i in rng.choice(ids, size=k, replace=False))


def _validate(supernet: nn.Network, update: ClientUpdate) -> list[np.ndarray]:
    mask = nn.unflatten_mask(update.index_map, supernet.hidden_sizes)
    mask = nn.check_mask(supernet, mask, binary=True)
    active = [supernet.layer_sizes[0]] + [int(m.sum()) for m in mask] + [supernet.layer_sizes[-1]]
    if len(update.theta) != len(supernet.layers):
        raise InvalidInputError("theta has the wrong number of layers")
    for i, (layer, block) in enumerate(zip(supernet.layers, update.theta)):
        for name, arr in layer.arrays().items():
            want = (active[i], active[i + 1]) if name == "weights" else (active[i + 1],)
            if name not in block or np.shape(block[name]) != want:
                raise InvalidInputError(f"layer {i} {name}: expected shape {want}")
            if not np.all(np.isfinite(block[name])):
                raise InvalidInputError(f"layer {i} {name}: non-finite values")
    return mask


def _weighted_merge(supernet: nn.Network, updates, weights):
    """Per-entry weighted mean over the updates that contain each entry.

    A weight joins the mean for a client iff both of its endpoint units are
    in that client's index map; per-unit arrays follow the unit's own bit.
    Entries nobody contributed keep their old value.  Accumulation runs in
    ascending client id so the result is independent of arrival order.
    """
    sizes = supernet.layer_sizes
    new = supernet.copy()
    sums = [{n: np.zeros_like(a) for n, a in layer.arrays().items()} for layer in supernet.layers]
    counts = [{n: np.zeros_like(a) for n, a in layer.arrays().items()} for layer in supernet.layers]
    for (update, mask), w in sorted(zip(updates, weights), key=lambda t: t[0][0].client_id):
        idx = [np.arange(sizes[0])] + [np.flatnonzero(m) for m in mask] + [np.arange(sizes[-1])]
        for i, block in enumerate(update.theta):
            rows, cols = idx[i], idx[i + 1]
            for name in sums[i]:
                if name == "weights":
                    sel = np.ix_(rows, cols)
                else:
                    sel = cols
                sums[i][name][sel] += w * block[name]
                counts[i][name][sel] += w
    for layer, s, c in zip(new.layers, sums, counts):
        for name, arr in layer.arrays().items():
            hit = c[name] > 0
            arr[hit] = s[name][hit] / c[name][hit]
    return new


def indexed_aggregate(supernet: nn.Network, updates: list[ClientUpdate]):
    """Equal-weight mean of every parameter over the clients that hold it.

    Returns ``(new_supernet, rejected_client_ids)``; malformed updates are
    skipped and the rest still aggregated.
    """
    accepted, rejected = [], []
    for u in updates:
        try:
            accepted.append((u, _validate(supernet, u)))
        except InvalidInputError as exc:
            log.warning("rejecting update from client %s: %s", u.client_id, exc)
            rejected.append(u.client_id)
    if not accepted:
        return supernet.copy(), rejected
    return _weighted_merge(supernet, accepted, [1.0] * len(accepted)), rejected


def fedavg_aggregate(supernet: nn.Network, updates: list[ClientUpdate]) -> nn.Network:
    """Sample-count weighted average of full-model updates."""
    if not updates:
        return supernet.copy()
    accepted = []
    for u in updates:
        mask = _validate(supernet, u)
        if not all(m.all() for m in mask):
            raise InvalidInputError(f"client {u.client_id} sent a partial index map; use indexed_aggregate")
        accepted.append((u, mask))
    # integer weights reduced by their gcd: same mean, and equal counts give weight 1 exactly
    n = [int(u.n_k) for u in updates]
    g = reduce(math.gcd, n) or 1
    return _weighted_merge(supernet, accepted, [float(k // g) for k in n])


def feddrop_mask(supernet: nn.Network, keep_fraction: float, rng: np.random.Generator) -> list[np.ndarray]:
    """One random subnet keeping ``ceil(keep*C)`` units per hidden layer."""
    if not 0 < keep_fraction <= 1:
        raise InvalidInputError("keep_fraction must be in (0, 1]")
    mask = []
    for c in supernet.hidden_sizes:
        m = np.zeros(c)
        m[rng.choice(c, size=sampler.keep_count(keep_fraction, c), replace=False)] = 1.0
        mask.append(m)
    return mask


def feddrop_round(supernet, states, ids, keep_fraction, rng, round_index, epsilon, cfg: ClientConfig):
    """All selected clients train the same randomly dropped subnet."""
    mask = feddrop_mask(supernet, keep_fraction, rng)
    return [local_round(supernet, states[i], round_index, epsilon, cfg, fixed_mask=mask) for i in ids]


# --------------------------------------------------------------------------
# experiment driver


def load_dataset(cfg) -> Dataset:
    if cfg.data.source == "blobs":
        ds = make_blobs(
            cfg.data.num_classes,
            cfg.data.samples_per_class,
            cfg.data.dim,
            cfg.data.spread,
            stream_rng(cfg.seed, STREAM_DATA),
            center_scale=cfg.data.center_scale,
        )
    else:
        ds = load_csv_dataset(cfg.data.path)
    return ds.standardized()


def build_federation(cfg) -> Federation:
    ds = load_dataset(cfg)
    fcfg = cfg.federation
    rng = stream_rng(cfg.seed, STREAM_PARTITION)
    if cfg.partition.method == "dirichlet":
        part = dirichlet_partition(ds, fcfg.clients, cfg.partition.concentration, cfg.partition.min_samples, rng)
    else:
        part = shard_partition(ds, fcfg.clients, cfg.partition.shards_per_client, rng)

    n_holdout = min(int(round(fcfg.test_client_fraction * fcfg.clients)), fcfg.clients - 1)
    holdout = set(stream_rng(cfg.seed, STREAM_HOLDOUT).choice(fcfg.clients, n_holdout, replace=False).tolist())

    states, local_tests = {}, []
    for cid in range(fcfg.clients):
        if cid in holdout:
            continue
        idx = part.client_indices[cid]
        perm = stream_rng(cfg.seed, STREAM_LOCAL_SPLIT, cid).permutation(idx)
        n_test = max(1, int(round(fcfg.local_test_fraction * len(idx))))
        train, test = ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
        hist = label_histogram(train.labels, ds.num_classes)
        states[cid] = ClientState(
            client_id=cid,
            train=train,
            test=test,
            label_histogram=hist,
            lam=0.0,
            sparseness=sampler.SparsenessVector(np.full(len(cfg.model.hidden), cfg.sampling.alpha_init)),
            jsd=uniform_jsd(hist),
        )
        local_tests.append(test)
    _assign_lambdas(states, cfg)

    if holdout:
        test = ds.subset(np.concatenate([part.client_indices[c] for c in sorted(holdout)]))
    else:
        test = Dataset(
            np.concatenate([t.features for t in local_tests]),
            np.concatenate([t.labels for t in local_tests]),
            ds.num_classes,
            ds.name,
        )
    sizes = [ds.dim] + list(cfg.model.hidden) + [ds.num_classes]
    supernet = nn.init_network(sizes, stream_rng(cfg.seed, STREAM_INIT))
    return Federation(supernet, states, test, ds)


def _assign_lambdas(states: dict[int, ClientState], cfg) -> None:
    mode = cfg.sampling.lambda_mode
    if mode == "fixed":
        for s in states.values():
            s.lam = cfg.sampling.lambda_value
    elif mode == "jsd":
        for s in states.values():
            s.lam = lambda_from_jsd(s.label_histogram)
    elif mode == "jsd_minmax":
        values = np.array([s.jsd for s in states.values()])
        lo, hi = values.min(), values.max()
        for s in states.values():
            s.lam = (s.jsd - lo) / (hi - lo) + 0.5 if hi > lo else 0.5
    else:
        raise InvalidInputError(f"unknown lambda mode {mode!r}")


def client_config(cfg) -> ClientConfig:
    return ClientConfig(
        local_epochs=cfg.training.local_epochs,
        batch_size=cfg.training.batch_size,
        lr_weights=cfg.training.lr_weights,
        lr_alpha=cfg.training.lr_alpha,
        val_fraction=cfg.training.val_fraction,
        alpha_min=cfg.sampling.alpha_min,
        freeze_alpha=cfg.sampling.freeze_alpha,
        importance=cfg.model.importance,
        root_tolerance=cfg.sampling.root_tolerance,
        val_bn_mode=cfg.training.val_bn_mode,
        seed=cfg.seed,
    )


def sampling_config(cfg) -> sampler.SamplingConfig:
    return sampler.SamplingConfig(
        epsilon_init=cfg.sampling.epsilon_init,
        epsilon_decay=cfg.sampling.epsilon_decay,
        alpha_min=cfg.sampling.alpha_min,
        root_tolerance=cfg.sampling.root_tolerance,
        lam=cfg.sampling.lambda_value,
        rng_seed=cfg.seed,
    )


def _run_client(args):
    supernet, state, round_index, epsilon, ccfg, mask = args
    try:
        return local_round(supernet, state, round_index, epsilon, ccfg, fixed_mask=mask)
    except (ClientDivergedError, InvalidInputError) as exc:
        log.warning("client %s skipped: %s", state.client_id, exc)
        return None


def _train_centralized(net: nn.Network, fed: Federation, cfg, round_index: int) -> None:
    X = np.concatenate([s.train.features for s in fed.clients.values()])
    y = np.concatenate([s.train.labels for s in fed.clients.values()])
    rng = stream_rng(cfg.seed, STREAM_CENTRAL, round_index)
    full = nn.full_mask(net)
    for _ in range(cfg.training.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.training.batch_size):
            idx = order[start : start + cfg.training.batch_size]
            _, grads, _ = nn.loss_and_grads(net, full, nn.Batch(X[idx], y[idx]))
            nn.sgd_step(net, grads, cfg.training.lr_weights)


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


class Experiment:
    """Stateful driver; :func:`run_experiment` is the one-call wrapper."""

    def __init__(self, cfg, federation: Federation | None = None):
        self.cfg = cfg
        self.fed = federation or build_federation(cfg)
        self.supernet = self.fed.supernet.copy()
        self.ccfg = client_config(cfg)
        self.scfg = sampling_config(cfg)
        self.last_update: dict[int, dict] = {}

    def _dispatch(self, jobs):
        if self.cfg.experiment.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.cfg.experiment.workers) as pool:
                results = list(pool.map(_run_client, jobs))
        else:
            results = [_run_client(j) for j in jobs]
        return [r for r in results if r is not None]

    def run_round(self, r: int) -> RoundReport:
        cfg, fed = self.cfg, self.fed
        epsilon = sampler.anneal(self.scfg, r - 1)
        hidden = self.supernet.hidden_sizes
        rejected: list[int] = []

        if cfg.algorithm == "centralized":
            _train_centralized(self.supernet, fed, cfg, r)
            ids = sorted(fed.clients)
            accs = [nn.evaluate(self.supernet, nn.full_mask(self.supernet), s.test.features, s.test.labels)[1] for s in fed.clients.values()]
            ratios = flops = [1.0]
            alphas = [[1.0] * len(hidden)]
        else:
            ids = select_clients(list(fed.clients), cfg.federation.participation, stream_rng(cfg.seed, STREAM_SELECT, r))
            snapshot = self.supernet
            if cfg.algorithm == "feddrop":
                mask = feddrop_mask(snapshot, cfg.feddrop.keep_fraction, stream_rng(cfg.seed, STREAM_FEDDROP, r))
            elif cfg.algorithm == "fedavg":
                mask = nn.full_mask(snapshot)
            else:
                mask = None
            updates = self._dispatch([(snapshot, fed.clients[i], r, epsilon, self.ccfg, mask) for i in ids])
            updates.sort(key=lambda u: u.client_id)
            if cfg.algorithm == "fedavg":
                self.supernet = fedavg_aggregate(snapshot, updates)
            else:
                self.supernet, rejected = indexed_aggregate(snapshot, updates)
            for u in updates:
                state = fed.clients[u.client_id]
                if mask is None:
                    state.sparseness.alpha = u.alpha.copy()
                    state.sparseness.beta = u.beta.copy()
                    state.sparseness.epsilon = epsilon
                self.last_update[u.client_id] = dict(u.metrics, alpha=u.alpha.tolist(), round=r)
            ok = [u for u in updates if u.client_id not in rejected]
            ids = [u.client_id for u in ok]
            accs = [u.metrics["local_acc"] for u in ok]
            ratios = [u.metrics["params_ratio"] for u in ok]
            flops = [u.metrics["flops_ratio"] for u in ok]
            alphas = [u.alpha for u in ok]

        g_loss, g_acc = nn.evaluate(self.supernet, nn.full_mask(self.supernet), fed.test.features, fed.test.labels)
        mean_alpha = np.mean(alphas, axis=0).tolist() if len(alphas) else [float("nan")] * len(hidden)
        return RoundReport(
            round=r,
            global_acc=g_acc,
            global_loss=g_loss,
            mean_local_acc=_mean(accs),
            std_local_acc=float(np.std(accs)) if len(accs) else float("nan"),
            mean_params_ratio=_mean(ratios),
            mean_flops_ratio=_mean(flops),
            mean_alpha=mean_alpha,
            epsilon=epsilon,
            participants=ids,
            rejected=rejected,
        )

    def run(self):
        for r in range(1, self.cfg.rounds + 1):
            report = self.run_round(r)
            log.info(
                "round %d acc_g=%.4f acc_l=%.4f params=%.3f",
                r, report.global_acc, report.mean_local_acc, report.mean_params_ratio,
            )
            yield report


def run_experiment(cfg) -> list[RoundReport]:
    return list(Experiment(cfg).run())
