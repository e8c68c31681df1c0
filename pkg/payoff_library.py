"""
Payoff Library
==============

Reward functions g(t, x) of Bermudan-style contracts with a direct vectorized
evaluator and an exact ReLU network per exercise index. All built-in payoffs
are discounted as g(t, x) = exp(-r * t * step) * g(0, x).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, InputError
from relu_calculus import AffineLayer, NeuralNetwork, compose, max_k, min_k

logger = logging.getLogger(__name__)

PAYOFF_KINDS = ("max_call", "basket_call", "basket_put", "put_on_min", "put_on_max", "call_on_min", "custom")


def _discount(r: float, t: int, step: float) -> float:
    return math.exp(-r * t * step)


def _hinge(K: float, scale: float, call: bool) -> NeuralNetwork:
    """z -> scale * (z - K)^+ for calls, scale * (K - z)^+ for puts"""
    sign = 1.0 if call else -1.0
    return NeuralNetwork((
        AffineLayer(np.array([[sign]]), np.array([-sign * K])),
        AffineLayer(np.array([[scale]]), np.zeros(1)),
    ))


def _check_common(d: int, K: float, r: float) -> None:
    if d < 1:
        raise InputError(f"payoff dimension must be positive, got {d}")
    if not (K > 0 and math.isfinite(K)):
        raise InputError(f"strike must be a positive real, got {K}")
    if not (r >= 0 and math.isfinite(r)):
        raise InputError(f"rate must be a nonnegative real, got {r}")


def _check_weights(d: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != d:
        raise InputError(f"basket needs {d} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("basket weights must be nonnegative reals")
    if abs(w.sum() - 1.0) > 1e-12:
        raise InputError(f"basket weights must sum to 1, got {w.sum()!r}")
    return w


def max_call_network(d: int, K: float, r: float, t: int, step: float = 1.0) -> NeuralNetwork:
    """Exact network of exp(-r t step) * (max_i x_i - K)^+"""
    _check_common(d, K, r)
    hinge = _hinge(K, _discount(r, t, step), call=True)
    return hinge if d == 1 else compose(hinge, max_k(d))


def basket_call_network(d: int, K: float, r: float, t: int, weights, step: float = 1.0) -> NeuralNetwork:
    _check_common(d, K, r)
    w = _check_weights(d, weights)
    return NeuralNetwork((
        AffineLayer(w[None, :], np.array([-K])),
        AffineLayer(np.array([[_discount(r, t, step)]]), np.zeros(1)),
    ))


def basket_put_network(d: int, K: float, r: float, t: int, weights, step: float = 1.0) -> NeuralNetwork:
    """
    Exact network of exp(-r t step) * (K - sum_i w_i x_i)^+ with one hidden unit.

    Args:
        d: Number of assets
        K: Strike
        r: Interest rate per unit of calendar time
        t: Exercise index
        weights: Nonnegative basket weights summing to 1
        step: Calendar length of one exercise index

    Returns:
        Depth-2 network of size at most d + 2
    """
    _check_common(d, K, r)
    w = _check_weights(d, weights)
    return NeuralNetwork((
        AffineLayer(-w[None, :], np.array([K])),
        AffineLayer(np.array([[_discount(r, t, step)]]), np.zeros(1)),
    ))


def extreme_option_network(kind: str, d: int, K: float, r: float, t: int, step: float = 1.0) -> NeuralNetwork:
    """Exact network of the put on min, put on max or call on min payoff"""
    _check_common(d, K, r)
    if kind not in ("put_on_min", "put_on_max", "call_on_min"):
        raise InputError(f"unknown extreme option kind {kind!r}")
    hinge = _hinge(K, _discount(r, t, step), call=(kind == "call_on_min"))
    if d == 1:
        return hinge
    tree = max_k(d) if kind == "put_on_max" else min_k(d)
    return compose(hinge, tree)


@dataclass(frozen=True)
class Payoff:
    """
    Reward g(t, x) on R^d for exercise indices t = 0..T.

    Built-in kinds carry their parameters; the "custom" kind carries a user
    evaluator, a network builder and declared growth constants.
    """

    kind: str
    d: int
    T: int
    K: float = 1.0
    r: float = 0.0
    step: float = 1.0
    weights: Optional[Tuple[float, ...]] = None
    evaluator: Optional[Callable[[int, np.ndarray], np.ndarray]] = field(default=None, compare=False)
    builder: Optional[Callable[[int], NeuralNetwork]] = field(default=None, compare=False)
    declared_growth: Optional[Tuple[float, float]] = None
    declared_lipschitz: Optional[float] = None

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise InputError(f"unknown payoff kind {self.kind!r}; expected one of {PAYOFF_KINDS}")
        if self.T < 0:
            raise InputError(f"horizon must be nonnegative, got {self.T}")
        if not self.step > 0:
            raise InputError(f"time step must be positive, got {self.step}")
        if self.kind == "custom":
            if self.evaluator is None or self.builder is None:
                raise InputError("custom payoffs need an evaluator and a network builder")
            return
        _check_common(self.d, self.K, self.r)
        if self.kind.startswith("basket"):
            weights = self.weights if self.weights is not None else [1.0 / self.d] * self.d
            object.__setattr__(self, "weights", tuple(float(w) for w in _check_weights(self.d, weights)))

    def discount(self, t: int) -> float:
        return _discount(self.r, t, self.step)

    def value(self, t: int, X) -> np.ndarray:
        """Direct evaluation on points of shape (n, d); returns shape (n,)"""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise InputError(f"payoff expects dimension {self.d}, got {X.shape[1]}")
        if self.kind == "custom":
            return np.asarray(self.evaluator(t, X), dtype=np.float64).reshape(-1)
        disc = self.discount(t)
        if self.kind == "max_call":
            return disc * np.maximum(X.max(axis=1) - self.K, 0.0)
        if self.kind == "basket_call":
            return disc * np.maximum(X @ np.asarray(self.weights) - self.K, 0.0)
        if self.kind == "basket_put":
            return disc * np.maximum(self.K - X @ np.asarray(self.weights), 0.0)
        if self.kind == "put_on_min":
            return disc * np.maximum(self.K - X.min(axis=1), 0.0)
        if self.kind == "put_on_max":
            return disc * np.maximum(self.K - X.max(axis=1), 0.0)
        return disc * np.maximum(X.min(axis=1) - self.K, 0.0)

    def network(self, t: int) -> NeuralNetwork:
        """Exact network realization of g(t, .)"""
        if not 0 <= t <= self.T:
            raise InputError(f"exercise index {t} outside 0..{self.T}")
        if self.kind == "custom":
            net = self.builder(t)
            if net.input_dim != self.d or net.output_dim != 1:
                raise InputError(f"custom payoff network must map R^{self.d} to R")
            return net
        if self.kind == "max_call":
            return max_call_network(self.d, self.K, self.r, t, self.step)
        if self.kind == "basket_call":
            return basket_call_network(self.d, self.K, self.r, t, self.weights, self.step)
        if self.kind == "basket_put":
            return basket_put_network(self.d, self.K, self.r, t, self.weights, self.step)
        return extreme_option_network(self.kind, self.d, self.K, self.r, t, self.step)

    def growth_constants(self) -> Tuple[float, float]:
        """(c, q) with |g(t, x)| <= c * d^q * (1 + ||x||)"""
        if self.kind == "custom":
            return self.declared_growth if self.declared_growth is not None else (1.0, 0.0)
        if self.kind in ("max_call", "basket_call", "call_on_min"):
            return 1.0, 0.0
        return max(self.K, 1.0), 0.0

    def lipschitz(self, t: int) -> float:
        """Euclidean Lipschitz constant of g(t, .)"""
        if self.kind == "custom":
            if self.declared_lipschitz is None:
                raise InputError("custom payoff declares no Lipschitz constant")
            return self.declared_lipschitz
        factor = float(np.linalg.norm(self.weights)) if self.kind.startswith("basket") else 1.0
        return self.discount(t) * factor

    def size_bound(self) -> int:
        if self.kind == "max_call":
            return 6 * self.d ** 3
        if self.kind.startswith("basket"):
            return 3 * (self.d + 2)
        if self.kind == "custom":
            return max(self.network(t).size for t in range(self.T + 1))
        return 12 * self.d ** 3 + 6 * self.d


def custom_payoff(d: int, T: int, evaluator: Callable[[int, np.ndarray], np.ndarray],
                  network_builder: Callable[[int], NeuralNetwork], c: float = 1.0, q: float = 0.0,
                  lipschitz: Optional[float] = None) -> Payoff:
    """Wrap a user payoff; its growth and Lipschitz constants are trusted, only spot-checked"""
    return Payoff(kind="custom", d=d, T=T, evaluator=evaluator, builder=network_builder,
                  declared_growth=(float(c), float(q)), declared_lipschitz=lipschitz)


def build_payoff(block: dict, d: int, T: int, step: float = 1.0) -> Payoff:
    """
    Build a payoff from the `payoff:` block of an experiment config.

    Args:
        block: Mapping with kind, K, r and optional weights
        d: State dimension of the model
        T: Horizon of the model
        step: Calendar length of one exercise index

    Returns:
        Payoff instance
    """
    kind = block.get("kind")
    if kind not in PAYOFF_KINDS or kind == "custom":
        raise ConfigError("payoff.kind", f"expected one of {PAYOFF_KINDS[:-1]}, got {kind!r}")
    weights: Optional[Sequence[float]] = block.get("weights")
    try:
        payoff = Payoff(kind=kind, d=d, T=T, K=float(block.get("K", 1.0)), r=float(block.get("r", 0.0)),
                        step=step, weights=tuple(weights) if weights is not None else None)
    except InputError as e:
        raise ConfigError("payoff", str(e)) from e
    logger.info(f"Payoff {kind} on R^{d}: K={payoff.K}, r={payoff.r}, horizon {T}")
    return payoff
