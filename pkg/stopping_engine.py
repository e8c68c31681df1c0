"""
Stopping Engine
===============

Optimal stopping for discrete-time Markov models:

- an exact dynamic-programming oracle for finite-noise models,
- the constructive builder of value networks v_t = max(phi_t - delta, gamma_t),
  where gamma_t averages v_{t+1}(eta(x, Y^i)) over sampled noise,
- network and oracle stopping policies with Monte Carlo rollouts,
- a Cox-Ross-Rubinstein lattice for Black-Scholes Bermudan references,
- persistence of value stacks and pricing reports.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import stats

from errors import InputError, ResourceError
from markov_models import (
    STREAM_BUILD,
    STREAM_MOMENTS,
    STREAM_ROLLOUT,
    STREAM_VALIDATION,
    MarkovModel,
    draw_noise,
    noise_stream,
    simulate_paths,
)
from payoff_library import Payoff
from relu_calculus import (
    NeuralNetwork,
    absorb_affine,
    compose,
    depth_sync,
    fix_inputs,
    load_network,
    max2,
    parallelize_shared,
    save_network,
    shift_output,
    sum_equal_depth,
)

logger = logging.getLogger(__name__)

# Largest number of leaves k^(T - t) the exact oracle will expand
DP_GUARD = 10 ** 7

# Largest projected size of v_0 the stack builder will assemble
STACK_GUARD = 10 ** 7

# Draws used to estimate E||Y|| for the noise-norm acceptance test
NORM_SAMPLES = 10_000

STREAM_BOOTSTRAP = 5


# ---------------------------------------------------------------------------
# Exact dynamic programming
# ---------------------------------------------------------------------------

def _check_pair(model: MarkovModel, payoff: Payoff) -> None:
    if payoff.d != model.d:
        raise InputError(f"payoff dimension {payoff.d} does not match model dimension {model.d}")
    if payoff.T != model.T:
        raise InputError(f"payoff horizon {payoff.T} does not match model horizon {model.T}")


def _leaves(model: MarkovModel, t: int) -> int:
    if not model.support.finite:
        raise InputError("the exact oracle needs a finite noise support")
    if not 0 <= t <= model.T:
        raise InputError(f"time index {t} outside 0..{model.T}")
    leaves = model.support.k ** (model.T - t)
    if leaves > DP_GUARD:
        raise ResourceError(f"exact oracle would expand {model.support.k}^{model.T - t} = {leaves} leaves "
                            f"(limit {DP_GUARD})")
    return leaves


def _dp(model: MarkovModel, payoff: Payoff, t: int, X: np.ndarray) -> np.ndarray:
    reward = payoff.value(t, X)
    if t == model.T:
        return reward
    return np.maximum(reward, _continuation(model, payoff, t, X))


def _continuation(model: MarkovModel, payoff: Payoff, t: int, X: np.ndarray) -> np.ndarray:
    atoms, probs = model.support.atoms, model.support.probabilities
    n, k = X.shape[0], atoms.shape[0]
    moved = model.update(t, np.repeat(X, k, axis=0), np.tile(atoms, (n, 1)))
    return _dp(model, payoff, t + 1, moved).reshape(n, k) @ probs


def _chunked(model: MarkovModel, t: int, X, fn) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.d:
        raise InputError(f"expected states of dimension {model.d}, got shape {X.shape}")
    chunk = max(1, DP_GUARD // _leaves(model, t))
    return np.concatenate([fn(X[start:start + chunk]) for start in range(0, X.shape[0], chunk)])


def exact_dp_values(model: MarkovModel, payoff: Payoff, t: int, X) -> np.ndarray:
    """
    Oracle values V(t, x) on a batch of states by full expansion of the noise tree.

    Args:
        model: Model with finite noise support
        payoff: Reward on the model's state space
        t: Time index
        X: States of shape (n, d)

    Returns:
        Array of shape (n,)
    """
    _check_pair(model, payoff)
    return _chunked(model, t, X, lambda part: _dp(model, payoff, t, part))


def exact_dp_value(model: MarkovModel, payoff: Payoff, t: int, x) -> float:
    return float(exact_dp_values(model, payoff, t, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def exact_continuation(model: MarkovModel, payoff: Payoff, t: int, X) -> np.ndarray:
    """E[V(t+1, X_{t+1}) | X_t = x] on a batch of states, t < T"""
    _check_pair(model, payoff)
    if not 0 <= t < model.T:
        raise InputError(f"continuation needs 0 <= t < {model.T}, got {t}")
    return _chunked(model, t, X, lambda part: _continuation(model, payoff, t, part))


def exact_dp_policy_value(model: MarkovModel, payoff: Payoff, x0=None) -> float:
    """
    Expected reward of tau* = min{t : g(t, X_t) >= continuation} by enumeration of all noise sequences.
    """
    _check_pair(model, payoff)
    _leaves(model, 0)
    atoms, probs = model.support.atoms, model.support.probabilities
    states = (model.x0 if x0 is None else np.asarray(x0, dtype=np.float64)).reshape(1, -1)
    weights = np.ones(1)
    total = 0.0
    for t in range(model.T + 1):
        reward = payoff.value(t, states)
        if t == model.T:
            total += float(weights @ reward)
            break
        stop = reward >= exact_continuation(model, payoff, t, states)
        total += float(weights[stop] @ reward[stop])
        states, weights = states[~stop], weights[~stop]
        if states.shape[0] == 0:
            break
        n, k = states.shape[0], atoms.shape[0]
        states = model.update(t, np.repeat(states, k, axis=0), np.tile(atoms, (n, 1)))
        weights = (weights[:, None] * probs[None, :]).reshape(-1)
    return total


# ---------------------------------------------------------------------------
# Value stacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMeasure:
    """Validation measure Normal(center, scale^2 I)"""

    center: np.ndarray
    scale: float = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        return center + self.scale * rng.standard_normal((n, center.shape[0]))


def default_measure(model: MarkovModel) -> GaussianMeasure:
    return GaussianMeasure(center=model.x0.copy(), scale=0.1 * max(1.0, float(np.abs(model.x0).max())))


@dataclass(frozen=True, eq=False)
class ValueStack:
    """
    Value networks v_0..v_T, continuation networks gamma_0..gamma_{T-1} and the
    exercise networks phi_0..phi_T they were assembled from, with build records.
    """

    values: Tuple[NeuralNetwork, ...]
    continuations: Tuple[NeuralNetwork, ...]
    exercise: Tuple[NeuralNetwork, ...]
    eps_bar: float
    N: int
    delta: float
    seed: int
    exact_update: bool = False
    retries: Tuple[int, ...] = ()
    validation_errors: Tuple[float, ...] = ()
    selection_ok: Tuple[bool, ...] = ()
    draws: Tuple[np.ndarray, ...] = ()
    draw_weights: Tuple[np.ndarray, ...] = ()

    @property
    def T(self) -> int:
        return len(self.values) - 1

    @property
    def d(self) -> int:
        return self.values[0].input_dim

    @property
    def size_by_t(self) -> List[int]:
        return [net.size for net in self.values]

    @property
    def continuation_size_by_t(self) -> List[int]:
        return [net.size for net in self.continuations]

    @property
    def total_size(self) -> int:
        return int(sum(self.size_by_t))

    def value(self, t: int, X, threads: int = 1) -> np.ndarray:
        return self.values[t](np.atleast_2d(X), threads=threads)[:, 0]

    def manifest(self) -> dict:
        return {
            "T": self.T,
            "d": self.d,
            "eps_bar": float(self.eps_bar),
            "N": int(self.N),
            "delta": float(self.delta),
            "seed": int(self.seed),
            "exact_update": bool(self.exact_update),
            "retries": [int(r) for r in self.retries],
            "validation_errors": [float(e) for e in self.validation_errors],
            "selection_ok": [bool(ok) for ok in self.selection_ok],
            "size_by_t": self.size_by_t,
            "continuation_size_by_t": self.continuation_size_by_t,
            "total_size": self.total_size,
        }


def continuation_network(stack: ValueStack, t: int) -> NeuralNetwork:
    """gamma_t of a stack, the network used inside v_t"""
    if not 0 <= t < stack.T:
        raise InputError(f"continuation index must lie in 0..{stack.T - 1}, got {t}")
    return stack.continuations[t]


def _exercise_value(phi: NeuralNetwork, gamma: NeuralNetwork, delta: float) -> NeuralNetwork:
    """x -> max(phi(x) - delta, gamma(x))"""
    return compose(max2(), parallelize_shared(depth_sync([shift_output(phi, delta), gamma])))


def _nested_reference(model: MarkovModel, next_value: NeuralNetwork, t: int, points: np.ndarray,
                      inner: int, seed: int, threads: int) -> np.ndarray:
    """Nested Monte Carlo estimate of E[v_{t+1}(f_t(x, Y))] with an independent inner batch per point"""
    n = points.shape[0]
    noise = draw_noise(model, seed, (STREAM_VALIDATION, t, 1), t, n * inner, threads)
    moved = model.update(t, np.repeat(points, inner, axis=0), noise)
    return next_value(moved, threads=threads)[:, 0].reshape(n, inner).mean(axis=1)


def _draw_pieces(model: MarkovModel, next_value: NeuralNetwork, t: int, noise: np.ndarray, eta,
                 exact_update: bool) -> Tuple[NeuralNetwork, np.ndarray, np.ndarray]:
    d = model.d
    if model.support.finite:
        draws, counts = np.unique(noise, axis=0, return_counts=True)
    else:
        draws, counts = noise, np.ones(noise.shape[0], dtype=np.int64)
    pieces = []
    for y in draws:
        if exact_update:
            inner = model.update_network(t, y)
            pieces.append(absorb_affine(next_value, inner) if inner.depth == 1 else compose(next_value, inner))
        else:
            pieces.append(compose(next_value, fix_inputs(eta.network, range(d, 2 * d), y)))
        if len(pieces) == 1:
            _check_piece_budget(t, draws.shape[0], pieces[0].size)
    weights = counts / noise.shape[0]
    return sum_equal_depth(depth_sync(pieces), weights), draws, weights


def _summands(model: MarkovModel, N: int) -> int:
    return min(N, model.support.k) if model.support.finite else N


def projected_stack_size(model: MarkovModel, payoff: Payoff, N: int) -> List[int]:
    """
    Lower estimate of size(v_t) for t = 0..T.

    Every distinct draw contributes one copy of v_{t+1} to gamma_t, so
    size(v_t) >= summands * size(v_{t+1}) + size(phi_t).
    """
    _check_pair(model, payoff)
    sizes = [0] * (model.T + 1)
    sizes[model.T] = payoff.network(model.T).size
    for t in range(model.T - 1, -1, -1):
        sizes[t] = _summands(model, N) * sizes[t + 1] + payoff.network(t).size
    return sizes


def _check_piece_budget(t: int, summands: int, piece_size: int) -> None:
    if summands * piece_size > STACK_GUARD:
        raise ResourceError(f"t={t}: gamma would hold {summands} pieces of size {piece_size} "
                            f"(limit {STACK_GUARD})")


def build_value_stack(model: MarkovModel, payoff: Payoff, eps_bar: float, N: Optional[int] = None,
                      delta: Optional[float] = None, n_val: int = 256, max_retries: int = 3,
                      measure: Optional[GaussianMeasure] = None, seed: int = 0, exact_update: bool = False,
                      inner: int = 256, threads: int = 1) -> ValueStack:
    """
    Backward construction of the value networks.

    For t = T-1..0 the continuation network gamma_t = (1/N) sum_i v_{t+1}(eta(., Y^i))
    is assembled from N sampled noise vectors (identical draws of a finite
    support share one weighted summand), then v_t = max(phi_t - delta, gamma_t).
    A draw is accepted when max_i ||Y^i|| <= 3 N E||Y|| and its validation error
    is at most three times the median of the errors measured so far; otherwise
    it is redrawn up to max_retries times and the best draw is kept.

    Args:
        model: Markov model
        payoff: Reward with the model's dimension and horizon
        eps_bar: Base accuracy in (0, 1), also the accuracy of eta
        N: Noise draws per step, defaults to ceil(eps_bar^-2)
        delta: Exercise margin, defaults to eps_bar^(1/2)
        n_val: Validation points drawn from the measure (>= 100)
        max_retries: Redraws allowed per step
        measure: Validation measure, defaults to a Gaussian around x0
        seed: Root seed
        exact_update: Use the model's exact update network instead of eta
        inner: Inner batch of the nested Monte Carlo reference
        threads: Worker threads for sampling and evaluation

    Returns:
        ValueStack

    Raises:
        ResourceError: when the projected size of v_0, or of one gamma_t, exceeds STACK_GUARD
    """
    _check_pair(model, payoff)
    if not 0.0 < eps_bar < 1.0:
        raise InputError(f"eps_bar must lie in (0, 1), got {eps_bar}")
    N = int(math.ceil(eps_bar ** -2)) if N is None else int(N)
    delta = math.sqrt(eps_bar) if delta is None else float(delta)
    if N < 1:
        raise InputError(f"N must be positive, got {N}")
    if delta < 0 or not math.isfinite(delta):
        raise InputError(f"delta must be a nonnegative real, got {delta}")
    if n_val < 100:
        raise InputError(f"n_val must be at least 100, got {n_val}")
    if max_retries < 0 or inner < 1:
        raise InputError("max_retries must be nonnegative and inner positive")
    measure = default_measure(model) if measure is None else measure
    projected = projected_stack_size(model, payoff, N)[0]
    if projected > STACK_GUARD:
        raise ResourceError(f"value stack would reach size {projected} or more at t=0 (limit {STACK_GUARD}); "
                            f"lower N or T, or build on a finite-noise surrogate")

    T = model.T
    exercise = [payoff.network(t) for t in range(T + 1)]
    values: List[Optional[NeuralNetwork]] = [None] * (T + 1)
    continuations: List[Optional[NeuralNetwork]] = [None] * T
    retries, errors, accepted = [0] * T, [0.0] * T, [True] * T
    draws_by_t: List[np.ndarray] = [np.zeros((0, model.d))] * T
    weights_by_t: List[np.ndarray] = [np.zeros(0)] * T
    values[T] = exercise[T]

    logger.info(f"Building value stack: T={T}, d={model.d}, eps_bar={eps_bar}, N={N}, delta={delta:.4g}, "
                f"{'exact update' if exact_update else 'eta networks'}")
    for t in range(T - 1, -1, -1):
        started = time.perf_counter()
        eta = None if exact_update else model.eta(eps_bar, t)
        next_value = values[t + 1]

        norm_bound = 3.0 * N * float(np.mean(np.linalg.norm(
            model.sample_noise(noise_stream(seed, STREAM_MOMENTS, t), t, NORM_SAMPLES), axis=1)))
        points = measure.sample(noise_stream(seed, STREAM_VALIDATION, t, 0), n_val)
        reference = _nested_reference(model, next_value, t, points, inner, seed, threads)

        measured: List[float] = []
        best = None
        for attempt in range(max_retries + 1):
            noise = draw_noise(model, seed, (STREAM_BUILD, t, attempt), t, N, threads)
            gamma, draws, weights = _draw_pieces(model, next_value, t, noise, eta, exact_update)
            error = float(np.mean((gamma(points, threads=threads)[:, 0] - reference) ** 2))
            measured.append(error)
            norm_ok = float(np.linalg.norm(noise, axis=1).max()) <= norm_bound
            ok = norm_ok and error <= 3.0 * float(np.median(measured))
            candidate = (not ok, error, attempt, gamma, draws, weights)
            if best is None or candidate[:3] < best[:3]:
                best = candidate
            if ok:
                break
            logger.info(f"t={t}: draw {attempt} rejected (error {error:.3e}, noise norm ok: {norm_ok})")

        failed, error, attempt, gamma, draws, weights = best
        if failed:
            logger.warning(f"t={t}: realization selection exhausted {max_retries} retries; keeping the best draw")
        continuations[t] = gamma
        values[t] = _exercise_value(exercise[t], gamma, delta)
        retries[t], errors[t], accepted[t] = len(measured) - 1, error, not failed
        draws_by_t[t], weights_by_t[t] = draws, weights
        logger.info(f"t={t}: {draws.shape[0]} summands, size(gamma)={gamma.size}, size(v)={values[t].size}, "
                    f"validation error {error:.3e} ({(time.perf_counter() - started) * 1000:.0f} ms)")

    return ValueStack(
        values=tuple(values),
        continuations=tuple(continuations),
        exercise=tuple(exercise),
        eps_bar=eps_bar,
        N=N,
        delta=delta,
        seed=seed,
        exact_update=exact_update,
        retries=tuple(retries),
        validation_errors=tuple(errors),
        selection_ok=tuple(accepted),
        draws=tuple(draws_by_t),
        draw_weights=tuple(weights_by_t),
    )


def save_stack(stack: ValueStack, directory: Union[str, Path]) -> Path:
    """Write a stack as serialized networks plus manifest.yml"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, net in enumerate(stack.values):
        save_network(net, directory / f"value_{t}.net")
        save_network(stack.exercise[t], directory / f"exercise_{t}.net")
    for t, net in enumerate(stack.continuations):
        save_network(net, directory / f"continuation_{t}.net")
        np.save(directory / f"draws_{t}.npy", stack.draws[t])
        np.save(directory / f"draw_weights_{t}.npy", stack.draw_weights[t])
    with open(directory / "manifest.yml", "w") as f:
        yaml.safe_dump(stack.manifest(), f, sort_keys=False)
    logger.info(f"Saved value stack (T={stack.T}, total size {stack.total_size}) to {directory}")
    return directory


def load_stack(directory: Union[str, Path]) -> ValueStack:
    directory = Path(directory)
    manifest_path = directory / "manifest.yml"
    if not manifest_path.exists():
        raise InputError(f"no stack manifest in {directory}")
    with open(manifest_path) as f:
        manifest = yaml.safe_load(f)
    T = int(manifest["T"])
    return ValueStack(
        values=tuple(load_network(directory / f"value_{t}.net")[0] for t in range(T + 1)),
        continuations=tuple(load_network(directory / f"continuation_{t}.net")[0] for t in range(T)),
        exercise=tuple(load_network(directory / f"exercise_{t}.net")[0] for t in range(T + 1)),
        eps_bar=float(manifest["eps_bar"]),
        N=int(manifest["N"]),
        delta=float(manifest["delta"]),
        seed=int(manifest["seed"]),
        exact_update=bool(manifest["exact_update"]),
        retries=tuple(manifest["retries"]),
        validation_errors=tuple(manifest["validation_errors"]),
        selection_ok=tuple(manifest["selection_ok"]),
        draws=tuple(np.load(directory / f"draws_{t}.npy") for t in range(T)),
        draw_weights=tuple(np.load(directory / f"draw_weights_{t}.npy") for t in range(T)),
    )


# ---------------------------------------------------------------------------
# Policies and rollouts
# ---------------------------------------------------------------------------

class NetworkPolicy:
    """Stop at t when phi_t(x) - delta >= gamma_t(x); always stop at T"""

    def __init__(self, stack: ValueStack, threads: int = 1):
        self.stack = stack
        self.threads = threads

    def stop(self, t: int, X: np.ndarray) -> np.ndarray:
        if t >= self.stack.T:
            return np.ones(X.shape[0], dtype=bool)
        exercise = self.stack.exercise[t](X, threads=self.threads)[:, 0] - self.stack.delta
        return exercise >= self.stack.continuations[t](X, threads=self.threads)[:, 0]


class OraclePolicy:
    """Stop at t when g(t, x) >= E[V(t+1, X_{t+1}) | X_t = x] under a finite-noise model"""

    def __init__(self, model: MarkovModel, payoff: Payoff):
        _check_pair(model, payoff)
        self.model = model
        self.payoff = payoff

    def stop(self, t: int, X: np.ndarray) -> np.ndarray:
        if t >= self.model.T:
            return np.ones(X.shape[0], dtype=bool)
        return self.payoff.value(t, X) >= exact_continuation(self.model, self.payoff, t, X)


def rollout_price(policy, model: MarkovModel, payoff: Payoff, x0=None, n_paths: int = 10_000, seed: int = 0,
                  threads: int = 1) -> Tuple[float, float]:
    """
    Monte Carlo value of a stopping policy.

    Args:
        policy: Object with stop(t, X) -> boolean mask
        model: Model the paths are simulated under
        payoff: Reward, already discounted by its own encoding
        x0: Initial state, defaults to the model's
        n_paths: Number of paths (>= 100)
        seed: Root seed of the rollout streams
        threads: Worker threads

    Returns:
        Tuple (estimate, standard error)
    """
    _check_pair(model, payoff)
    if n_paths < 100:
        raise InputError(f"a rollout needs at least 100 paths, got {n_paths}")
    paths, _ = simulate_paths(model, x0, n_paths, seed, threads, purpose=STREAM_ROLLOUT)
    rewards = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    for t in range(model.T + 1):
        index = np.flatnonzero(alive)
        if index.size == 0:
            break
        states = paths[index, t, :]
        if t == 0:
            # every path starts at the same state
            stop = np.repeat(policy.stop(0, states[:1]), index.size)
        else:
            stop = policy.stop(t, states)
        stopped = index[stop]
        rewards[stopped] = payoff.value(t, paths[stopped, t, :])
        alive[stopped] = False
    estimate = float(rewards.mean())
    error = 0.0 if np.ptp(rewards) == 0 else float(rewards.std(ddof=1) / math.sqrt(n_paths))
    logger.info(f"Rollout over {n_paths} paths: {estimate:.6f} +/- {error:.6f}")
    return estimate, error


@dataclass(frozen=True)
class L2Estimate:
    value: float
    n: int
    ci_low: float
    ci_high: float


def l2_error(stack: ValueStack, t: int, oracle_values: Optional[np.ndarray] = None,
             points: Optional[np.ndarray] = None, model: Optional[MarkovModel] = None,
             payoff: Optional[Payoff] = None, measure: Optional[GaussianMeasure] = None, n: int = 1000,
             seed: int = 0, n_boot: int = 200, threads: int = 1) -> L2Estimate:
    """
    Root mean squared gap between V(t, .) and v_t over points drawn from the measure.

    Oracle values are taken from `oracle_values` when given (with `points`), else
    computed by the exact oracle of a finite-noise `model`. The interval is a 95%
    percentile bootstrap.
    """
    if not 0 <= t <= stack.T:
        raise InputError(f"time index must lie in 0..{stack.T}, got {t}")
    if points is None:
        if model is None:
            raise InputError("l2_error needs points or a model to draw them from")
        measure = default_measure(model) if measure is None else measure
        points = measure.sample(noise_stream(seed, STREAM_VALIDATION, t, 2), n)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if oracle_values is None:
        if model is None or payoff is None or not model.support.finite:
            raise InputError("no oracle available: pass oracle_values or a finite-noise model and payoff")
        oracle_values = exact_dp_values(model, payoff, t, points)
    gaps = (np.asarray(oracle_values, dtype=np.float64).reshape(-1) - stack.value(t, points, threads)) ** 2
    rng = noise_stream(seed, STREAM_BOOTSTRAP, t)
    resampled = gaps[rng.integers(0, gaps.shape[0], size=(n_boot, gaps.shape[0]))].mean(axis=1)
    low, high = np.sqrt(np.percentile(resampled, [2.5, 97.5]))
    return L2Estimate(value=float(np.sqrt(gaps.mean())), n=int(gaps.shape[0]), ci_low=float(low), ci_high=float(high))


# ---------------------------------------------------------------------------
# Black-Scholes references
# ---------------------------------------------------------------------------

def black_scholes_price(S0: float, K: float, r: float, sigma: float, maturity: float, kind: str = "put") -> float:
    """Closed-form European price"""
    if kind not in ("call", "put"):
        raise InputError(f"kind must be 'call' or 'put', got {kind!r}")
    if sigma <= 0 or maturity <= 0:
        forward = S0 * math.exp(r * maturity)
        intrinsic = forward - K if kind == "call" else K - forward
        return math.exp(-r * maturity) * max(intrinsic, 0.0)
    root = sigma * math.sqrt(maturity)
    d1 = (math.log(S0 / K) + (r + 0.5 * sigma ** 2) * maturity) / root
    d2 = d1 - root
    if kind == "call":
        return S0 * stats.norm.cdf(d1) - K * math.exp(-r * maturity) * stats.norm.cdf(d2)
    return K * math.exp(-r * maturity) * stats.norm.cdf(-d2) - S0 * stats.norm.cdf(-d1)


def binomial_american(S0: float, K: float, r: float, sigma: float, maturity: float, n_steps: int,
                      exercise_dates: Sequence[float], kind: str = "put") -> float:
    """
    Cox-Ross-Rubinstein lattice value with exercise allowed only on the listed dates.

    Args:
        S0: Spot price
        K: Strike
        r: Interest rate
        sigma: Volatility
        maturity: Final time in years
        n_steps: Lattice steps
        exercise_dates: Times in [0, maturity] lying on the lattice grid
        kind: "put" or "call"

    Returns:
        Lattice value at time 0
    """
    if n_steps < 1 or maturity <= 0 or S0 <= 0 or K <= 0 or sigma < 0:
        raise InputError("binomial lattice needs n_steps >= 1 and positive maturity, spot and strike")
    if kind not in ("call", "put"):
        raise InputError(f"kind must be 'call' or 'put', got {kind!r}")
    positions = np.asarray(exercise_dates, dtype=np.float64) * n_steps / maturity
    steps = np.rint(positions).astype(np.int64)
    if np.any(np.abs(positions - steps) > 1e-8 * max(1, n_steps)) or np.any(steps < 0) or np.any(steps > n_steps):
        raise InputError("exercise dates must lie on the lattice grid within [0, maturity]")
    exercisable = set(int(s) for s in steps)
    sign = 1.0 if kind == "call" else -1.0
    dt = maturity / n_steps
    discount = math.exp(-r * dt)

    if sigma == 0:
        candidates = [math.exp(-r * s * dt) * max(sign * (S0 * math.exp(r * s * dt) - K), 0.0) for s in exercisable]
        return max(candidates, default=0.0)

    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(r * dt) - down) / (up - down)
    if not 0.0 <= p <= 1.0:
        raise InputError(f"lattice probability {p:.4f} outside [0, 1]; increase n_steps")

    def spots(level: int) -> np.ndarray:
        j = np.arange(level, -1, -1)
        return S0 * up ** j * down ** (level - j)

    values = np.maximum(sign * (spots(n_steps) - K), 0.0) if n_steps in exercisable else np.zeros(n_steps + 1)
    for level in range(n_steps - 1, -1, -1):
        values = discount * (p * values[:-1] + (1.0 - p) * values[1:])
        if level in exercisable:
            values = np.maximum(values, sign * (spots(level) - K))
    return float(values[0])


# ---------------------------------------------------------------------------
# Pricing reports
# ---------------------------------------------------------------------------

@dataclass
class PricingReport:
    """Result of one `price` run; field names are part of the report format"""

    value_oracle: Optional[float]
    value_network: float
    value_rollout: float
    se_rollout: float
    n_paths: int
    l2_by_t: Dict[int, float]
    size_by_t: List[int]
    seed: int
    selection_ok: List[bool]
    retries: List[int]
    wall_ms: Optional[float] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "value_oracle": None if self.value_oracle is None else float(self.value_oracle),
            "value_network": float(self.value_network),
            "value_rollout": float(self.value_rollout),
            "se_rollout": float(self.se_rollout),
            "n_paths": int(self.n_paths),
            "l2_by_t": {int(t): float(v) for t, v in self.l2_by_t.items()},
            "size_by_t": [int(s) for s in self.size_by_t],
            "wall_ms": None if self.wall_ms is None else float(self.wall_ms),
            "seed": int(self.seed),
            "selection_ok": [bool(ok) for ok in self.selection_ok],
            "retries": [int(r) for r in self.retries],
            "config": self.config,
        }


def price(model: MarkovModel, payoff: Payoff, eps_bar: float, N: Optional[int] = None,
          delta: Optional[float] = None, n_paths: int = 10_000, seed: int = 0, n_val: int = 256,
          max_retries: int = 3, measure: Optional[GaussianMeasure] = None, exact_update: bool = False,
          build_model: Optional[MarkovModel] = None, oracle_value: Optional[float] = None, l2_points: int = 0,
          inner: int = 256, threads: int = 1, record_timing: bool = False) -> Tuple[PricingReport, ValueStack]:
    """
    Build a value stack, roll its policy out and collect the report.

    The stack is built on `build_model` (a lattice surrogate, for instance) when
    given, and the policy is always rolled out under `model`. When the build
    model has finite noise and no oracle value is supplied, the exact oracle
    provides value_oracle and, with l2_points > 0, the per-t L2 errors.
    """
    started = time.perf_counter()
    builder = model if build_model is None else build_model
    stack = build_value_stack(builder, payoff, eps_bar, N=N, delta=delta, n_val=n_val, max_retries=max_retries,
                              measure=measure, seed=seed, exact_update=exact_update, inner=inner, threads=threads)
    value_network = float(stack.value(0, model.x0[None, :])[0])
    estimate, error = rollout_price(NetworkPolicy(stack, threads), model, payoff, n_paths=n_paths, seed=seed,
                                    threads=threads)

    l2_by_t: Dict[int, float] = {}
    if builder.support.finite and build_model is None:
        try:
            if oracle_value is None:
                oracle_value = exact_dp_value(builder, payoff, 0, model.x0)
            if l2_points > 0:
                for t in range(stack.T + 1):
                    l2_by_t[t] = l2_error(stack, t, model=builder, payoff=payoff, measure=measure, n=l2_points,
                                          seed=seed, threads=threads).value
        except ResourceError as e:
            logger.warning(f"Exact oracle skipped: {e}")

    wall_ms = (time.perf_counter() - started) * 1000.0
    logger.info(f"Priced in {wall_ms:.0f} ms: network {value_network:.6f}, rollout {estimate:.6f} +/- {error:.6f}"
                + (f", oracle {oracle_value:.6f}" if oracle_value is not None else ""))
    report = PricingReport(
        value_oracle=oracle_value,
        value_network=value_network,
        value_rollout=estimate,
        se_rollout=error,
        n_paths=n_paths,
        l2_by_t=l2_by_t,
        size_by_t=stack.size_by_t,
        seed=seed,
        selection_ok=list(stack.selection_ok),
        retries=list(stack.retries),
        wall_ms=wall_ms if record_timing else None,
    )
    return report, stack
