"""Differentiable importance-weighted sampling of hidden units.

Each unit ``c`` of a layer is kept with probability
``p_c = logistic((b_c - beta) / eps)``.  The shift ``beta`` is the root of
``h(beta) = sum_c p_c - alpha * C`` so that the expected number of kept
units equals ``alpha * C``; ``eps`` is a temperature annealed towards zero,
at which point sampling degenerates into keeping the top ``ceil(alpha*C)``
units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

P_CLAMP = 1e-12
EPSILON_FLOOR = 1e-4
BRACKET_WIDTH = 40.0
MAX_BISECTIONS = 400


@dataclass
class SamplingConfig:
    epsilon_init: float = 1.0
    epsilon_decay: float = 0.98
    alpha_min: float = 0.05
    root_tolerance: float = 1e-8
    lam: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon_decay <= 1:
            raise InvalidInputError("epsilon_decay must be in (0, 1]")
        if not 0 < self.alpha_min < 1:
            raise InvalidInputError("alpha_min must be in (0, 1)")
        if self.lam < 0:
            raise InvalidInputError("lambda must be >= 0")
        if self.epsilon_init <= 0:
            raise InvalidInputError("epsilon_init must be > 0")


@dataclass
class SparsenessVector:
    """Per-layer keep ratios, their cached shifts, and the shared temperature."""

    alpha: np.ndarray
    beta: np.ndarray = field(default=None)
    epsilon: float = 1.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.beta is None:
            self.beta = np.zeros_like(self.alpha)
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be > 0")

    def copy(self) -> "SparsenessVector":
        return SparsenessVector(self.alpha.copy(), self.beta.copy(), self.epsilon)


def sampling_prob(b, beta, epsilon):
    """Logistic keep probability, clamped away from exactly 0 and 1."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be > 0")
    x = (np.asarray(b, dtype=np.float64) - beta) / epsilon
    # tanh form is overflow-free for any x
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return float(p) if p.ndim == 0 else p


def expected_kept(b, beta, epsilon) -> float:
    return float(np.sum(sampling_prob(b, beta, epsilon)))


def solve_shift(b, alpha: float, epsilon: float, tol: float = 1e-8) -> float:
    """Bisection for the shift ``beta`` with ``|sum_c p_c - alpha*C| <= tol``.

    ``h`` is strictly decreasing in ``beta`` and the bracket
    ``[min(b) - 40 eps, max(b) + 40 eps]`` saturates every probability, so a
    sign change is guaranteed.  The search stops early once ``|h| <= tol``;
    if floating-point resolution is exhausted first, the best midpoint is
    returned.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise InvalidInputError("importance vector must be non-empty 1-D")
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha={alpha} outside (0, 1); skip sampling for alpha=1")
    if tol <= 0:
        raise InvalidInputError("tol must be > 0")
    target = alpha * b.size
    lo = float(b.min()) - BRACKET_WIDTH * epsilon
    hi = float(b.max()) + BRACKET_WIDTH * epsilon
    best, best_h = lo, math.inf
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        h = expected_kept(b, mid, epsilon) - target
        if abs(h) < best_h:
            best, best_h = mid, abs(h)
        if best_h <= tol or mid in (lo, hi):
            break
        if h > 0:
            lo = mid
        else:
            hi = mid
    return best


def shift_derivative(p, epsilon: float) -> float:
    """d(beta)/d(alpha) by implicit differentiation of ``h(beta(alpha)) = 0``.

    ``dp_c/dbeta = -p_c(1-p_c)/eps``, hence
    ``dbeta/dalpha = -C * eps / sum_c p_c(1-p_c)`` (negative: keeping more
    units means shifting the threshold down).
    """
    p = np.asarray(p, dtype=np.float64)
    return -p.size * epsilon / float(np.sum(p * (1 - p)))


def sample_mask(p, rng: np.random.Generator, importance=None, ensure_nonempty: bool = True):
    """Independent Bernoulli draws ``omega_c ~ Bernoulli(p_c)``.

    An all-zero draw would kill the layer, so by default the most important
    unit (by ``importance``, else by ``p``) is switched on in that case.
    """
    p = np.asarray(p, dtype=np.float64)
    omega = (rng.random(p.shape) < p).astype(np.float64)
    if ensure_nonempty and not omega.any():
        score = p if importance is None else np.asarray(importance)
        omega[int(np.argmax(score))] = 1.0
    return omega


@dataclass
class SparsenessGrad:
    value: float
    saturated: bool
    weights: np.ndarray


def sparseness_grad(unit_grads, p, C: int | None = None) -> SparsenessGrad:
    """dL/dalpha from straight-through unit gradients.

    ``C * sum_c g_c * w_c`` with ``w_c = p_c(1-p_c) / sum p(1-p)``; the
    ``unit_grads`` stand in for dL/dp_c.  When every probability is
    saturated the gradient is reported as 0 and flagged.
    """
    g = np.asarray(unit_grads, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    C = p.size if C is None else C
    var = p * (1 - p)
    total = float(var.sum())
    if total <= 1e-12:
        return SparsenessGrad(0.0, True, np.zeros_like(p))
    w = var / total
    return SparsenessGrad(float(C * np.dot(g, w)), False, w)


def regularizer(alpha, lam: float) -> tuple[float, np.ndarray]:
    """``lam * sum_k alpha_k**2`` and its gradient."""
    if lam < 0:
        raise InvalidInputError("lambda must be >= 0")
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(lam * np.sum(alpha**2)), 2.0 * lam * alpha


def keep_count(alpha: float, C: int) -> int:
    # tolerance so that alpha = n/C rounds to n despite representation error
    return int(min(C, max(1, math.ceil(alpha * C - 1e-9))))


def harden(b, alpha: float) -> np.ndarray:
    """Keep the ``ceil(alpha*C)`` most important units; ties go to the lower index."""
    b = np.asarray(b, dtype=np.float64)
    if not 0 < alpha <= 1:
        raise InvalidInputError(f"alpha={alpha} outside (0, 1]")
    n = keep_count(alpha, b.size)
    order = np.argsort(-b, kind="stable")
    mask = np.zeros(b.size)
    mask[order[:n]] = 1.0
    return mask


def anneal(cfg: SamplingConfig, round_index: int) -> float:
    if round_index < 0:
        raise InvalidInputError("round must be >= 0")
    return max(cfg.epsilon_init * cfg.epsilon_decay**round_index, EPSILON_FLOOR)


def update_alpha(alpha: float, grad: float, lr: float, alpha_min: float) -> float:
    """One projected gradient step on a keep ratio."""
    return float(min(1.0, max(alpha_min, alpha - lr * grad)))
