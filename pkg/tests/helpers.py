"""Shared oracles for the test-suite.

Everything here is deliberately naive: explicit loops, central differences,
no reuse of the package's vectorised code paths beyond calling ``forward``
or ``loss_and_grads`` as black boxes.
"""

import math

import numpy as np

from adds import nn


def random_net(sizes, rng, perturb_bn=True):
    """Random network with non-trivial BN parameters and running stats."""
    net = nn.init_network(sizes, rng)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0, 0.3, size=layer.bias.shape)
        if layer.has_norm and perturb_bn:
            c = layer.bias.size
            layer.bn_gamma[:] = rng.uniform(0.5, 1.5, size=c)
            layer.bn_beta[:] = rng.normal(0, 0.3, size=c)
            layer.bn_running_mean[:] = rng.normal(0, 0.5, size=c)
            layer.bn_running_var[:] = rng.uniform(0.5, 2.0, size=c)
    return net


def random_batch(n, d, classes, rng):
    return nn.Batch(rng.normal(size=(n, d)), rng.integers(0, classes, size=n))


def loop_forward_eval(net, mask, x_row):
    """Eval-mode forward for one input row with scalar arithmetic only."""
    h = [float(v) for v in x_row]
    for k, layer in enumerate(net.layers):
        n_in, n_out = layer.weights.shape
        out = []
        for j in range(n_out):
            z = float(layer.bias[j])
            for i in range(n_in):
                z += h[i] * float(layer.weights[i, j])
            if layer.has_norm:
                xhat = (z - layer.bn_running_mean[j]) / math.sqrt(layer.bn_running_var[j] + nn.BN_EPS)
                y = layer.bn_gamma[j] * xhat + layer.bn_beta[j]
                z = max(y, 0.0) * float(mask[k][j])
            out.append(z)
        h = out
    return np.array(h)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_weight_grads(net, mask, batch, step=1e-5, mode="train"):
    """Central differences of the loss for every parameter entry."""
    out = []
    for layer in net.layers:
        block = {}
        for name in ("weights", "bias", "bn_gamma", "bn_beta"):
            arr = getattr(layer, name)
            if arr is None:
                continue
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                lp = nn.loss_and_grads(net, mask, batch, mode=mode, update_stats=False)[0]
                arr[idx] = orig - step
                lm = nn.loss_and_grads(net, mask, batch, mode=mode, update_stats=False)[0]
                arr[idx] = orig
                g[idx] = (lp - lm) / (2 * step)
            block[name] = g
        out.append(block)
    return out


def fd_unit_grads(net, mask, batch, step=1e-4, mode="train"):
    out = []
    for k, m in enumerate(mask):
        g = np.zeros(len(m))
        for c in range(len(m)):
            mp = [v.copy() for v in mask]
            mm = [v.copy() for v in mask]
            mp[k][c] += step
            mm[k][c] -= step
            lp = nn.loss_and_grads(net, mp, batch, mode=mode, update_stats=False)[0]
            lm = nn.loss_and_grads(net, mm, batch, mode=mode, update_stats=False)[0]
            g[c] = (lp - lm) / (2 * step)
        out.append(g)
    return out


def random_binary_mask(net, rng, keep=0.6):
    mask = []
    for c in net.hidden_sizes:
        m = (rng.random(c) < keep).astype(float)
        if not m.any():
            m[rng.integers(c)] = 1.0
        mask.append(m)
    return mask


def grid_scan_root(b, alpha, eps, levels=6, points=2001):
    """Root of sum_c logistic((b_c - beta)/eps) - alpha*C by nested grid scans."""
    b = np.asarray(b, dtype=float)
    target = alpha * b.size

    def h(beta):
        x = (b[None, :] - beta[:, None]) / eps
        return (1.0 / (1.0 + np.exp(-x))).sum(axis=1) - target

    lo, hi = b.min() - 50 * eps, b.max() + 50 * eps
    for _ in range(levels):
        grid = np.linspace(lo, hi, points)
        vals = h(grid)
        i = int(np.flatnonzero(vals <= 0)[0])
        lo, hi = grid[max(i - 1, 0)], grid[i]
    return 0.5 * (lo + hi)


def brentq_shift(b, alpha, eps):
    from scipy.optimize import brentq
    from scipy.special import expit

    b = np.asarray(b, dtype=float)
    f = lambda beta: expit((b - beta) / eps).sum() - alpha * b.size
    return brentq(f, b.min() - 60 * eps, b.max() + 60 * eps, xtol=1e-15, rtol=1e-15, maxiter=500)


def soft_masked_loss(net, batch, importances, alphas, eps, mode="train"):
    """Loss with every mask entry replaced by its keep probability."""
    from scipy.special import expit

    mask = []
    for b, a in zip(importances, alphas):
        beta = brentq_shift(b, a, eps)
        mask.append(expit((np.asarray(b) - beta) / eps))
    return nn.loss_and_grads(net, mask, batch, mode=mode, update_stats=False)[0]


def fd_alpha_grad(net, batch, importances, alphas, eps, layer, step=1e-4, mode="train"):
    up = list(alphas)
    dn = list(alphas)
    up[layer] += step
    dn[layer] -= step
    lp = soft_masked_loss(net, batch, importances, up, eps, mode)
    lm = soft_masked_loss(net, batch, importances, dn, eps, mode)
    return (lp - lm) / (2 * step)


def brute_force_lrp(net, mask, batch):
    """z+ relevance computed message by message with scalar loops."""
    logits, cache = nn.forward(net, mask, batch, mode="train", update_stats=False)
    prob = nn.softmax(logits)
    per_sample = []
    for s in range(len(batch)):
        r_up = [0.0] * logits.shape[1]
        r_up[batch.labels[s]] = prob[s, batch.labels[s]]
        layers = [r_up]
        for k in range(len(net.layers) - 1, -1, -1):
            a = cache.layers[k].inputs[s]
            w = net.layers[k].weights
            n_in, n_out = w.shape
            r_low = [0.0] * n_in
            for j in range(n_out):
                denom = sum(max(a[i] * w[i, j], 0.0) for i in range(n_in))
                if denom <= 0:
                    continue
                for i in range(n_in):
                    message = max(a[i] * w[i, j], 0.0) / denom * r_up[j]
                    r_low[i] += message
            r_up = r_low
            layers.append(r_low)
        per_sample.append(layers[::-1])
    return per_sample


def relu_pattern(net, mask, batch, mode="train"):
    _, cache = nn.forward(net.copy(), mask, batch, mode=mode, update_stats=False)
    return [c.y > 0 for c in cache.layers[:-1]]


def unit_stencil_kinks(net, mask, batch, step=1e-4, mode="train"):
    """Per layer, True where the +-step gate stencil flips some ReLU."""
    out = []
    for k, m in enumerate(mask):
        flags = np.zeros(len(m), dtype=bool)
        for c in range(len(m)):
            mp = [v.copy() for v in mask]
            mm = [v.copy() for v in mask]
            mp[k][c] += step
            mm[k][c] -= step
            a, b = relu_pattern(net, mp, batch, mode), relu_pattern(net, mm, batch, mode)
            flags[c] = any(not np.array_equal(x, y) for x, y in zip(a, b))
        out.append(flags)
    return out
