"""
Markov Models
=============

Discrete-time Markov drivers X_{t+1} = f_t(X_t, Y_t): exponential Levy
(Black-Scholes and Merton jumps), Euler-type discrete diffusions, finite-atom
noise models and running-extreme augmentation. Every model carries its exact
update, a seeded noise sampler, a noise support descriptor, the exact-update
network hook x -> f_t(x, y) and a builder for the certified joint network
eta(x, y) ~ f_t(x, y).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy import stats

from approx_blocks import PRODUCT_LIPSCHITZ_CONSTANT, product_network
from errors import DomainError, InputError
from relu_calculus import (
    AffineLayer,
    NeuralNetwork,
    affine_network,
    compose,
    depth_sync,
    identity_network,
    lipschitz_upper_bound,
    max_k,
    min_k,
    parallelize_separate,
    parallelize_shared,
    select_inputs,
)

logger = logging.getLogger(__name__)

# Paths per random block; path i always comes from the same block and offset
PATH_BLOCK = 1024

# Stream purposes, the first spawn-key component
STREAM_PATHS = 0
STREAM_BUILD = 1
STREAM_VALIDATION = 2
STREAM_MOMENTS = 3
STREAM_ROLLOUT = 4


def noise_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based stream for (seed, key); equal keys give equal streams"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


@dataclass(frozen=True)
class NoiseSupport:
    """Continuous noise (atoms is None) or a finite list of atoms with probabilities"""

    atoms: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None

    @property
    def finite(self) -> bool:
        return self.atoms is not None

    @property
    def k(self) -> int:
        return 0 if self.atoms is None else self.atoms.shape[0]


@dataclass(frozen=True)
class DeclaredConstants:
    """Growth, moment and clip-region exponents declared for a model"""

    p: float = 1.0
    c: float = 1.0
    q: float = 0.0
    beta: float = 1.0
    zeta: float = 1.0
    theta: float = 1.0
    m: int = 1


@dataclass(frozen=True)
class EtaNetwork:
    """
    Joint network eta(x, y) ~ f_t(x, y) on R^{2d} with its certificate.

    The error bound holds on the box |x_i|, |y_i| <= region.
    """

    network: NeuralNetwork
    eps: float
    region: float
    M: float
    error_bound: float
    lipschitz_bound: float

    @property
    def size(self) -> int:
        return self.network.size


@dataclass(frozen=True, eq=False)
class MarkovModel:
    """
    Immutable model descriptor.

    update(t, X, Y) and sample_noise(rng, t, n) are vectorized over rows;
    eta_builder(eps, t) and update_network_builder(t, y) realize the update as
    ReLU networks; step_moment(t) is a factor a_t with
    E[1 + ||X_{t+1}|| | X_t = x] <= a_t (1 + ||x||).
    """

    family: str
    d: int
    T: int
    x0: np.ndarray
    times: np.ndarray
    update_fn: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    noise_fn: Callable[[np.random.Generator, int, int], np.ndarray]
    support: NoiseSupport
    eta_builder: Optional[Callable[[float, int], EtaNetwork]] = None
    update_network_builder: Optional[Callable[[int, np.ndarray], NeuralNetwork]] = None
    envelope_fn: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    step_moment: Optional[Callable[[int], float]] = None
    constants: DeclaredConstants = field(default_factory=DeclaredConstants)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=np.float64).reshape(-1)
        if x0.shape[0] != self.d or not np.all(np.isfinite(x0)):
            raise InputError(f"initial state must be a finite vector of length {self.d}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.T < 1:
            raise InputError(f"horizon must be a positive integer, got {self.T}")

    def dt(self, t: int) -> float:
        return float(self.times[t + 1] - self.times[t])

    def update(self, t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return self.update_fn(t, np.atleast_2d(X), np.atleast_2d(Y))

    def sample_noise(self, rng: np.random.Generator, t: int, n: int) -> np.ndarray:
        return self.noise_fn(rng, t, n)

    def update_network(self, t: int, y) -> NeuralNetwork:
        """Exact network of x -> f_t(x, y) for one fixed noise vector"""
        if self.update_network_builder is None:
            raise InputError(f"{self.family} model has no exact update network")
        return self.update_network_builder(t, np.asarray(y, dtype=np.float64).reshape(-1))

    def eta(self, eps: float, t: int = 0) -> EtaNetwork:
        if not 0.0 < eps <= 1.0:
            raise InputError(f"eta accuracy must lie in (0, 1], got {eps}")
        if self.eta_builder is None:
            raise InputError(f"{self.family} model has no eta construction")
        return self.eta_builder(eps, t)

    def envelope(self, t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Declared upper bound of ||f_t(x, y)|| per row"""
        if self.envelope_fn is None:
            raise InputError(f"{self.family} model declares no growth envelope")
        return self.envelope_fn(t, X, Y)


# ---------------------------------------------------------------------------
# Path sampling
# ---------------------------------------------------------------------------

def _noise_block(model: MarkovModel, seed: int, key: Tuple[int, ...], t: int, block: int, count: int) -> np.ndarray:
    rng = noise_stream(seed, *key, block)
    return model.sample_noise(rng, t, PATH_BLOCK)[:count]


def draw_noise(model: MarkovModel, seed: int, key: Tuple[int, ...], t: int, n: int, threads: int = 1) -> np.ndarray:
    """
    Draw n noise vectors for step t from blocked streams keyed by (seed, *key, block).

    Row i depends only on the key and i, never on n.
    """
    counts = [min(PATH_BLOCK, n - start) for start in range(0, n, PATH_BLOCK)]
    if not counts:
        return np.zeros((0, model.d))
    if threads > 1 and len(counts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda item: _noise_block(model, seed, key, t, *item), enumerate(counts)))
    else:
        blocks = [_noise_block(model, seed, key, t, b, c) for b, c in enumerate(counts)]
    return np.vstack(blocks)


def simulate_paths(model: MarkovModel, x0=None, n_paths: int = 1, seed: int = 0, threads: int = 1,
                   purpose: int = STREAM_PATHS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simulate paths of the model.

    Args:
        model: Markov model
        x0: Initial state (defaults to the model's)
        n_paths: Number of paths
        seed: Root seed
        threads: Worker threads for noise generation
        purpose: Stream purpose, keeps unrelated simulations independent

    Returns:
        Tuple (paths of shape (n, T+1, d), noise of shape (n, T, d))
    """
    start = model.x0 if x0 is None else np.asarray(x0, dtype=np.float64).reshape(-1)
    if start.shape[0] != model.d or not np.all(np.isfinite(start)):
        raise InputError(f"initial state must be a finite vector of length {model.d}")
    paths = np.empty((n_paths, model.T + 1, model.d))
    noise = np.empty((n_paths, model.T, model.d))
    paths[:, 0, :] = start
    for t in range(model.T):
        noise[:, t, :] = draw_noise(model, seed, (purpose, t), t, n_paths, threads)
        paths[:, t + 1, :] = model.update(t, paths[:, t, :], noise[:, t, :])
    return paths, noise


def sample_path(model: MarkovModel, x0=None, seed: int = 0) -> list:
    """One path X_0..X_T as a list of state vectors"""
    paths, _ = simulate_paths(model, x0, 1, seed)
    return [paths[0, t].copy() for t in range(model.T + 1)]


# ---------------------------------------------------------------------------
# Network helpers
# ---------------------------------------------------------------------------

def _fold_readout(net: NeuralNetwork, readout, offset=None) -> NeuralNetwork:
    """Append a linear map to the output by folding it into the last layer"""
    readout = sp.csr_matrix(readout)
    last = net.layers[-1]
    bias = readout @ last.bias
    if offset is not None:
        bias = bias + np.asarray(offset, dtype=np.float64)
    return NeuralNetwork(net.layers[:-1] + (AffineLayer(readout @ last.weights, bias),))


def _multiplicative_update_network(y: np.ndarray) -> NeuralNetwork:
    return affine_network(sp.diags(y, format="csr"))


def _product_eta(d: int, eps: float, beta: float) -> EtaNetwork:
    """d-fold product network with input pairs (x_i, y_i) taken from z = (x, y)"""
    M = eps ** (-beta)
    block = product_network(eps, M)
    sources = [index for i in range(d) for index in (i, d + i)]
    net = select_inputs(parallelize_separate([block] * d), sources, 2 * d)
    return EtaNetwork(
        network=net,
        eps=eps,
        region=M,
        M=M,
        error_bound=eps * math.sqrt(d),
        lipschitz_bound=math.sqrt(2.0) * PRODUCT_LIPSCHITZ_CONSTANT * M,
    )


# ---------------------------------------------------------------------------
# Exponential Levy models
# ---------------------------------------------------------------------------

def _as_vector(value, d: int, name: str) -> np.ndarray:
    vector = np.broadcast_to(np.asarray(value, dtype=np.float64), (d,)).copy()
    if not np.all(np.isfinite(vector)):
        raise InputError(f"{name} must be finite")
    return vector


def _covariance_factor(sigma: np.ndarray, correlation) -> np.ndarray:
    d = sigma.shape[0]
    corr = np.asarray(correlation, dtype=np.float64)
    if corr.ndim == 0:
        if float(corr) == 0.0:
            return np.diag(sigma)
        corr = np.full((d, d), float(corr))
        np.fill_diagonal(corr, 1.0)
    if corr.shape != (d, d) or not np.allclose(corr, corr.T):
        raise InputError("correlation must be a scalar or a symmetric d x d matrix")
    cov = sigma[:, None] * corr * sigma[None, :]
    values, vectors = np.linalg.eigh(cov)
    if values.min() < -1e-10 * max(1.0, float(np.abs(values).max())):
        raise InputError(f"covariance is not positive semidefinite (eigenvalue {values.min():.3e})")
    return vectors * np.sqrt(np.clip(values, 0.0, None))[None, :]


def levy_exponential_moment(p_bar: float, sigma: float, gamma: float = 0.0, jump_intensity: float = 0.0,
                            jump_mean: float = 0.0, jump_std: float = 0.0, dt: float = 1.0) -> float:
    """
    E[exp(p_bar * L_dt)] for a Levy increment with Gaussian part (gamma, sigma^2) and
    Normal(jump_mean, jump_std^2) jumps at the given intensity.

    Returns:
        exp(dt * (p^2 sigma^2 / 2 + p gamma + lambda (E[e^{pJ}] - 1)))
    """
    if sigma < 0 or jump_intensity < 0 or jump_std < 0 or dt < 0:
        raise InputError("volatility, intensity, jump std and dt must be nonnegative")
    jump_term = 0.0
    if jump_intensity > 0:
        jump_term = jump_intensity * math.expm1(p_bar * jump_mean + 0.5 * p_bar ** 2 * jump_std ** 2)
    exponent = dt * (0.5 * p_bar ** 2 * sigma ** 2 + p_bar * gamma + jump_term)
    if not math.isfinite(exponent) or exponent > 700.0:
        raise DomainError(f"exponential moment of order {p_bar} diverges")
    return math.exp(exponent)


def exp_levy_model(d: int, T: int, mu=0.0, sigma=0.2, dt: float = 1.0, correlation=0.0,
                   jump_intensity: float = 0.0, jump_mean: float = 0.0, jump_std: float = 0.0,
                   beta: Optional[float] = None, x0=None) -> MarkovModel:
    """
    Exponential Levy model X_{t+1,i} = X_{t,i} * Y_{t,i} with Y = exp(L increment).

    The log increment is Normal((mu - sigma^2/2 - lambda kappa) dt, Sigma dt) plus a
    compound Poisson sum of Normal(jump_mean, jump_std^2) marks, kappa = E[e^J] - 1,
    so that E[Y_i] = exp(mu_i dt).

    Args:
        d: Number of assets
        T: Number of steps
        mu: Drift per unit time (scalar or per asset)
        sigma: Volatility per unit time (scalar or per asset)
        dt: Calendar length of one step
        correlation: Constant correlation or a correlation matrix
        jump_intensity: Jumps per unit time per asset
        jump_mean: Mean of the log jump size
        jump_std: Standard deviation of the log jump size
        beta: Clip-region exponent of eta, defaults to 1/T
        x0: Initial prices (defaults to ones)

    Returns:
        MarkovModel of family "exp_levy"
    """
    if d < 1 or T < 1:
        raise InputError(f"need d >= 1 and T >= 1, got d={d}, T={T}")
    if not dt > 0:
        raise InputError(f"time step must be positive, got {dt}")
    mu = _as_vector(mu, d, "mu")
    sigma = _as_vector(sigma, d, "sigma")
    if np.any(sigma < 0):
        raise InputError("volatilities must be nonnegative")
    for name, value in (("jump_intensity", jump_intensity), ("jump_std", jump_std)):
        if not (value >= 0 and math.isfinite(value)):
            raise InputError(f"{name} must be a nonnegative real, got {value}")
    if not math.isfinite(jump_mean):
        raise InputError("jump_mean must be finite")
    factor = _covariance_factor(sigma, correlation)
    kappa = math.expm1(jump_mean + 0.5 * jump_std ** 2) if jump_intensity > 0 else 0.0
    gamma = mu - 0.5 * sigma ** 2 - jump_intensity * kappa
    drift = gamma * dt
    root_dt = math.sqrt(dt)
    beta = 1.0 / T if beta is None else float(beta)

    def noise_fn(rng: np.random.Generator, t: int, n: int) -> np.ndarray:
        log_increment = drift + root_dt * (rng.standard_normal((n, d)) @ factor.T)
        if jump_intensity > 0:
            counts = rng.poisson(jump_intensity * dt, size=(n, d))
            log_increment += jump_mean * counts + jump_std * np.sqrt(counts) * rng.standard_normal((n, d))
        return np.exp(log_increment)

    def update_fn(t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return X * Y

    def envelope_fn(t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.linalg.norm(X, axis=1) * np.linalg.norm(Y, axis=1)

    second = np.array([levy_exponential_moment(2.0, float(np.linalg.norm(factor[i])), float(gamma[i]),
                                               jump_intensity, jump_mean, jump_std, dt) for i in range(d)])

    family = "merton" if jump_intensity > 0 else "black_scholes"
    logger.info(f"Exponential Levy model ({family}) d={d}, T={T}, dt={dt}, beta={beta:.4f}")
    return MarkovModel(
        family="exp_levy",
        d=d,
        T=T,
        x0=np.ones(d) if x0 is None else x0,
        times=dt * np.arange(T + 1),
        update_fn=update_fn,
        noise_fn=noise_fn,
        support=NoiseSupport(),
        eta_builder=lambda eps, t: _product_eta(d, eps, beta),
        update_network_builder=lambda t, y: _multiplicative_update_network(y),
        envelope_fn=envelope_fn,
        step_moment=lambda t: max(1.0, float(np.sqrt(second.max()))),
        constants=DeclaredConstants(p=2.0, c=1.0, q=0.0, beta=beta, zeta=beta, theta=beta),
        params={
            "kind": family, "mu": mu, "sigma": sigma, "dt": dt, "correlation": correlation,
            "jump_intensity": jump_intensity, "jump_mean": jump_mean, "jump_std": jump_std,
            "gamma": gamma, "volatility": np.linalg.norm(factor, axis=1),
        },
    )


def black_scholes_model(d: int, T: int, mu=0.0, sigma=0.2, dt: float = 1.0, correlation=0.0,
                        beta: Optional[float] = None, x0=None) -> MarkovModel:
    return exp_levy_model(d, T, mu=mu, sigma=sigma, dt=dt, correlation=correlation, beta=beta, x0=x0)


def merton_model(d: int, T: int, mu=0.0, sigma=0.2, jump_intensity: float = 0.1, jump_mean: float = -0.1,
                 jump_std: float = 0.15, dt: float = 1.0, correlation=0.0, beta: Optional[float] = None,
                 x0=None) -> MarkovModel:
    return exp_levy_model(d, T, mu=mu, sigma=sigma, dt=dt, correlation=correlation,
                          jump_intensity=jump_intensity, jump_mean=jump_mean, jump_std=jump_std,
                          beta=beta, x0=x0)


def exp_levy_eta(model: MarkovModel, eps: float, t: int = 0) -> EtaNetwork:
    """Paired product networks approximating (x_i * y_i)_i for an exponential Levy model"""
    if model.family != "exp_levy":
        raise InputError(f"expected an exponential Levy model, got {model.family}")
    return model.eta(eps, t)


def model_exponential_moment(model: MarkovModel, p_bar: float) -> np.ndarray:
    """Per-coordinate E[Y_i^p_bar] in closed form for exponential Levy and finite multiplicative models"""
    if model.family == "exp_levy":
        params = model.params
        return np.array([
            levy_exponential_moment(p_bar, float(params["volatility"][i]), float(params["gamma"][i]),
                                    params["jump_intensity"], params["jump_mean"], params["jump_std"], params["dt"])
            for i in range(model.d)
        ])
    if model.family in ("finite", "lattice") and model.params.get("update") == "multiplicative":
        atoms, probs = model.support.atoms, model.support.probabilities
        if p_bar != int(p_bar) and np.any(atoms <= 0):
            raise DomainError("fractional moments need positive atoms")
        return probs @ (atoms ** p_bar)
    raise InputError(f"no closed-form exponential moment for the {model.family} family")


# ---------------------------------------------------------------------------
# Discrete diffusion models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AffineCoefficient:
    """
    Coefficient x -> const + linear . x with output shape const.shape.

    linear has shape const.shape + (d,). Exactly realizable by a depth-1 network.
    """

    const: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        const = np.array(self.const, dtype=np.float64)
        linear = np.array(self.linear, dtype=np.float64)
        if linear.shape[:-1] != const.shape or linear.ndim < 1:
            raise InputError(f"linear part shape {linear.shape} does not extend const shape {const.shape}")
        if not (np.all(np.isfinite(const)) and np.all(np.isfinite(linear))):
            raise InputError("coefficient entries must be finite")
        object.__setattr__(self, "const", const)
        object.__setattr__(self, "linear", linear)

    @classmethod
    def diagonal(cls, d: int, const: float, scale: float, matrix: bool) -> "AffineCoefficient":
        """const + scale * x_i per coordinate (vector) or on the diagonal (matrix)"""
        if matrix:
            linear = np.zeros((d, d, d))
            for i in range(d):
                linear[i, i, i] = scale
            return cls(const * np.eye(d), linear)
        return cls(np.full(d, float(const)), scale * np.eye(d))

    @property
    def d(self) -> int:
        return self.linear.shape[-1]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.const.shape

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        return self.const + np.tensordot(X, self.linear, axes=([1], [self.linear.ndim - 1]))

    def network(self) -> NeuralNetwork:
        return affine_network(self.linear.reshape(-1, self.d), self.const.reshape(-1))

    def zero_components(self) -> np.ndarray:
        flat = self.linear.reshape(-1, self.d)
        return (self.const.reshape(-1) == 0.0) & np.all(flat == 0.0, axis=1)

    def growth(self) -> Tuple[float, float]:
        """(C, q) with ||coef(x)|| <= C d^q (1 + ||x||), Frobenius norm for matrices"""
        flat = self.linear.reshape(-1, self.d)
        return max(float(np.linalg.norm(self.const)), float(np.linalg.norm(flat, 2))), 0.0

    def component_growth(self) -> Tuple[float, float]:
        flat = self.linear.reshape(-1, self.d)
        return float(np.max(np.maximum(np.abs(self.const.reshape(-1)), np.linalg.norm(flat, axis=1)))), 0.0

    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.linear.reshape(-1, self.d), 2))

    def component_lipschitz(self) -> float:
        return float(np.max(np.linalg.norm(self.linear.reshape(-1, self.d), axis=1)))


@dataclass(frozen=True, eq=False)
class NetworkCoefficient:
    """User-supplied coefficient network R^d -> R^{prod(shape)} with declared growth (c, q)"""

    net: NeuralNetwork
    shape: Tuple[int, ...]
    c: float = 1.0
    q: float = 0.0
    declared_lipschitz: Optional[float] = None

    def __post_init__(self):
        if int(np.prod(self.shape)) != self.net.output_dim:
            raise InputError(f"network output {self.net.output_dim} does not match shape {self.shape}")

    @property
    def d(self) -> int:
        return self.net.input_dim

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        return self.net(X).reshape((X.shape[0],) + tuple(self.shape))

    def network(self) -> NeuralNetwork:
        return self.net

    def zero_components(self) -> np.ndarray:
        return np.zeros(self.net.output_dim, dtype=bool)

    def growth(self) -> Tuple[float, float]:
        # componentwise bound lifted to the Euclidean/Frobenius norm
        return self.c * math.sqrt(self.net.output_dim), self.q

    def component_growth(self) -> Tuple[float, float]:
        return self.c, self.q

    def lipschitz(self) -> float:
        return self.declared_lipschitz if self.declared_lipschitz is not None else lipschitz_upper_bound(self.net)

    def component_lipschitz(self) -> float:
        return self.lipschitz()


Coefficient = Union[AffineCoefficient, NetworkCoefficient]


def _diffusion_update_network(mu: Coefficient, sigma: Coefficient, d: int, dt: float, y: np.ndarray) -> NeuralNetwork:
    if isinstance(mu, AffineCoefficient) and isinstance(sigma, AffineCoefficient):
        weights = np.eye(d) + dt * mu.linear + np.einsum("ijk,j->ik", sigma.linear, y)
        return affine_network(weights, dt * mu.const + sigma.const @ y)
    # x + dt mu(x) + sigma(x) y as a readout over [x, mu(x), vec(sigma(x))]
    parts = depth_sync([identity_network(d, 1), mu.network(), sigma.network()])
    joint = parallelize_shared(parts)
    readout = np.hstack([np.eye(d), dt * np.eye(d), np.kron(np.eye(d), y[None, :])])
    return _fold_readout(joint, readout)


def _diffusion_eta(mu: Coefficient, sigma: Coefficient, d: int, dt: float, eps: float,
                   beta: float) -> EtaNetwork:
    region = eps ** (-beta)
    C, q = sigma.component_growth()
    M = 4.0 * max(C, 1.0) * d ** (q + 0.5) * region
    engaged = np.flatnonzero(~sigma.zero_components())

    x_part = select_inputs(identity_network(d, 1), list(range(d)), 2 * d)
    drift = select_inputs(mu.network(), list(range(d)), 2 * d)
    linear_parts = depth_sync([x_part, drift])
    linear = _fold_readout(parallelize_shared(linear_parts), np.hstack([np.eye(d), dt * np.eye(d)]))

    rows = engaged // d
    per_row = np.bincount(rows, minlength=d)
    if engaged.size == 0:
        net = linear
        error_bound = 0.0
        lipschitz = math.sqrt(d) * (1.0 + dt * mu.lipschitz())
    else:
        # pairs (sigma_ij(x), y_j) for each engaged component ij = i * d + j
        coefficients = select_inputs(sigma.network(), list(range(d)), 2 * d)
        copier = np.zeros((d, 2 * d))
        copier[:, d:] = np.eye(d)
        noise_copy = affine_network(copier)
        coefficients, noise_copy = depth_sync([coefficients, noise_copy])
        stacked = parallelize_shared([coefficients, noise_copy])
        pairing = np.zeros((2 * engaged.size, d * d + d))
        for slot, component in enumerate(engaged):
            pairing[2 * slot, component] = 1.0
            pairing[2 * slot + 1, d * d + component % d] = 1.0
        pairs = _fold_readout(stacked, pairing)
        block = product_network(eps, M)
        products = compose(parallelize_separate([block] * engaged.size), pairs)

        products, linear = depth_sync([products, linear])
        summed = parallelize_shared([products, linear])
        readout = np.zeros((d, engaged.size + d))
        readout[rows, np.arange(engaged.size)] = 1.0
        readout[:, engaged.size:] = np.eye(d)
        net = _fold_readout(summed, readout)
        error_bound = eps * float(np.sqrt(np.sum(per_row.astype(np.float64) ** 2)))
        lipschitz = math.sqrt(d) * (1.0 + dt * mu.lipschitz()
                                    + PRODUCT_LIPSCHITZ_CONSTANT * M * per_row.max() * (sigma.component_lipschitz() + 1.0))
    return EtaNetwork(network=net, eps=eps, region=region, M=M, error_bound=error_bound, lipschitz_bound=lipschitz)


def discrete_diffusion_model(d: int, T: int, grid: Sequence[float], mu: Coefficient, sigma: Coefficient,
                             x0=None, beta: Optional[float] = None) -> MarkovModel:
    """
    Euler-type diffusion X_{t+1} = X_t + mu(X_t) dt_t + sigma(X_t) Y_t, Y_t ~ Normal(0, dt_t I).

    Args:
        d: State dimension
        T: Number of steps
        grid: Strictly increasing times t_0 < ... < t_T with t_0 >= 0
        mu: Drift coefficient with output shape (d,)
        sigma: Diffusion coefficient with output shape (d, d)
        x0: Initial state (defaults to zeros)
        beta: Clip-region exponent of eta, defaults to 1/T

    Returns:
        MarkovModel of family "diffusion"
    """
    times = np.asarray(grid, dtype=np.float64).reshape(-1)
    if times.shape[0] != T + 1:
        raise InputError(f"time grid needs {T + 1} points, got {times.shape[0]}")
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise InputError("time grid must be nonnegative and strictly increasing")
    if mu.d != d or sigma.d != d:
        raise InputError(f"coefficients must act on R^{d}")
    if tuple(mu.shape) != (d,):
        raise InputError(f"drift must have output shape ({d},)")
    if tuple(sigma.shape) != (d, d):
        raise InputError(f"diffusion coefficient must have output shape ({d}, {d})")
    steps = np.diff(times)
    beta = 1.0 / T if beta is None else float(beta)

    def noise_fn(rng: np.random.Generator, t: int, n: int) -> np.ndarray:
        return math.sqrt(steps[t]) * rng.standard_normal((n, d))

    def update_fn(t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return X + steps[t] * mu.evaluate(X) + np.einsum("nij,nj->ni", sigma.evaluate(X), Y)

    mu_growth, _ = mu.growth()
    sigma_growth, _ = sigma.growth()

    def envelope_fn(t: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        radius = 1.0 + np.linalg.norm(X, axis=1)
        return np.linalg.norm(X, axis=1) + steps[t] * mu_growth * radius + sigma_growth * radius * np.linalg.norm(Y, axis=1)

    logger.info(f"Discrete diffusion model d={d}, T={T}, grid [{times[0]}, {times[-1]}]")
    return MarkovModel(
        family="diffusion",
        d=d,
        T=T,
        x0=np.zeros(d) if x0 is None else x0,
        times=times,
        update_fn=update_fn,
        noise_fn=noise_fn,
        support=NoiseSupport(),
        eta_builder=lambda eps, t: _diffusion_eta(mu, sigma, d, float(steps[t]), eps, beta),
        update_network_builder=lambda t, y: _diffusion_update_network(mu, sigma, d, float(steps[t]), y),
        envelope_fn=envelope_fn,
        step_moment=lambda t: 1.0 + steps[t] * mu_growth + sigma_growth * math.sqrt(d * steps[t]),
        constants=DeclaredConstants(p=1.0, c=max(mu_growth, sigma_growth, 1.0), q=0.0, beta=beta, zeta=beta,
                                    theta=beta),
        params={"mu": mu, "sigma": sigma},
    )


def discrete_diffusion_eta(model: MarkovModel, eps: float, t: int = 0) -> EtaNetwork:
    """
    Network of x + mu(x) dt_t + sigma(x) y with the sigma(x) y products replaced
    by product networks on the region |x_i|, |y_i| <= eps^(-beta).
    """
    if model.family != "diffusion":
        raise InputError(f"expected a diffusion model, got {model.family}")
    return model.eta(eps, t)


# ---------------------------------------------------------------------------
# Finite-noise models
# ---------------------------------------------------------------------------

def _check_atoms(d: int, atoms, probabilities) -> Tuple[np.ndarray, np.ndarray]:
    atoms = np.array(atoms, dtype=np.float64)
    if atoms.ndim == 1:
        atoms = atoms[:, None] if d == 1 else atoms[None, :]
    probs = np.array(probabilities, dtype=np.float64).reshape(-1)
    if atoms.ndim != 2 or atoms.shape[1] != d or atoms.shape[0] < 1:
        raise InputError(f"atoms must be a non-empty list of vectors in R^{d}")
    if probs.shape[0] != atoms.shape[0]:
        raise InputError(f"{atoms.shape[0]} atoms but {probs.shape[0]} probabilities")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise InputError(f"atom probabilities must be nonnegative and sum to 1, got sum {probs.sum()!r}")
    if not np.all(np.isfinite(atoms)):
        raise InputError("atoms must be finite")
    atoms.setflags(write=False)
    probs.setflags(write=False)
    return atoms, probs


def finite_noise_model(d: int, T: int, atoms, probabilities, update: str = "multiplicative", x0=None,
                       dt: float = 1.0, beta: Optional[float] = None, family: str = "finite") -> MarkovModel:
    """
    Model whose noise takes finitely many values.

    Args:
        d: State dimension
        T: Number of steps
        atoms: k noise vectors, shape (k, d)
        probabilities: k probabilities summing to 1 within 1e-12
        update: "multiplicative" (f = x * y) or "additive" (f = x + y)
        x0: Initial state (defaults to ones)
        dt: Calendar length of one step
        beta: Clip-region exponent of eta, defaults to 1/T

    Returns:
        MarkovModel with a finite support descriptor
    """
    if update not in ("multiplicative", "additive"):
        raise InputError(f"update must be 'multiplicative' or 'additive', got {update!r}")
    atoms, probs = _check_atoms(d, atoms, probabilities)
    beta = 1.0 / T if beta is None else float(beta)

    def noise_fn(rng: np.random.Generator, t: int, n: int) -> np.ndarray:
        return atoms[rng.choice(atoms.shape[0], size=n, p=probs)]

    if update == "multiplicative":
        def update_fn(t, X, Y):
            return X * Y

        def update_net(t, y):
            return _multiplicative_update_network(y)

        def envelope_fn(t, X, Y):
            return np.linalg.norm(X, axis=1) * np.linalg.norm(Y, axis=1)

        second = probs @ atoms ** 2
        moment = max(1.0, float(np.sqrt(second.max())))
        eta_builder = lambda eps, t: _product_eta(d, eps, beta)
    else:
        def update_fn(t, X, Y):
            return X + Y

        def update_net(t, y):
            return affine_network(np.eye(d), y)

        def envelope_fn(t, X, Y):
            return np.linalg.norm(X, axis=1) + np.linalg.norm(Y, axis=1)

        moment = 1.0 + float(probs @ np.linalg.norm(atoms, axis=1))

        def eta_builder(eps, t):
            net = affine_network(np.hstack([np.eye(d), np.eye(d)]))
            return EtaNetwork(network=net, eps=eps, region=eps ** (-beta), M=eps ** (-beta),
                              error_bound=0.0, lipschitz_bound=math.sqrt(2.0))

    logger.info(f"Finite-noise model d={d}, T={T}, {atoms.shape[0]} atoms, {update} update")
    return MarkovModel(
        family=family,
        d=d,
        T=T,
        x0=np.ones(d) if x0 is None else x0,
        times=dt * np.arange(T + 1),
        update_fn=update_fn,
        noise_fn=noise_fn,
        support=NoiseSupport(atoms, probs),
        eta_builder=eta_builder,
        update_network_builder=update_net,
        envelope_fn=envelope_fn,
        step_moment=lambda t: moment,
        constants=DeclaredConstants(beta=beta, zeta=beta, theta=beta),
        params={"update": update, "dt": dt},
    )


def load_atoms(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a whitespace-separated atom table: one atom per row, last column the probability.

    Lines starting with '#' are ignored.
    """
    try:
        table = np.loadtxt(path, ndmin=2, comments="#")
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read atom table {path}: {e}") from e
    if table.shape[1] < 2:
        raise InputError(f"atom table {path} needs at least one coordinate and a probability column")
    return table[:, :-1], table[:, -1]


def lattice_surrogate(model: MarkovModel, substeps: int = 1) -> MarkovModel:
    """
    Cox-Ross-Rubinstein quantization of an uncorrelated Black-Scholes model.

    Each coordinate takes `substeps` moves of u = exp(sigma sqrt(h)) or 1/u per step,
    h = dt / substeps, with the up probability matching E[Y_i] = exp(mu_i dt); the
    recombined moves give substeps + 1 atoms per coordinate and the joint atoms
    are their product grid.
    """
    if model.family != "exp_levy" or model.params["jump_intensity"] > 0:
        raise InputError("lattice surrogates exist for Black-Scholes models only")
    if substeps < 1:
        raise InputError(f"substeps must be positive, got {substeps}")
    correlation = np.asarray(model.params["correlation"], dtype=np.float64)
    uncorrelated = float(correlation) == 0.0 if correlation.ndim == 0 else np.allclose(correlation, np.eye(model.d))
    if not uncorrelated:
        raise InputError("lattice surrogates need uncorrelated coordinates")
    dt = model.params["dt"]
    h = dt / substeps
    ups = np.arange(substeps, -1, -1)
    per_coordinate = []
    for mu_i, sigma_i in zip(model.params["mu"], model.params["sigma"]):
        if sigma_i == 0:
            per_coordinate.append((np.array([math.exp(mu_i * dt)]), np.array([1.0])))
            continue
        up = math.exp(sigma_i * math.sqrt(h))
        down = 1.0 / up
        p = (math.exp(mu_i * h) - down) / (up - down)
        if not 0.0 <= p <= 1.0:
            raise InputError(f"lattice probability {p:.4f} outside [0, 1]; refine the time step")
        values = up ** ups * down ** (substeps - ups)
        per_coordinate.append((values, stats.binom.pmf(ups, substeps, p)))

    grids = np.meshgrid(*[values for values, _ in per_coordinate], indexing="ij")
    weights = np.meshgrid(*[probs for _, probs in per_coordinate], indexing="ij")
    atoms = np.column_stack([grid.ravel() for grid in grids])
    probs = np.prod(np.column_stack([w.ravel() for w in weights]), axis=1)
    probs = probs / probs.sum()
    logger.info(f"Lattice surrogate with {atoms.shape[0]} atoms ({substeps} substeps per date)")
    return finite_noise_model(model.d, model.T, atoms, probs, update="multiplicative", x0=model.x0, dt=dt,
                              beta=model.constants.beta, family="lattice")


# ---------------------------------------------------------------------------
# Running-extreme augmentation
# ---------------------------------------------------------------------------

def _extreme_head(d: int, mode: str) -> NeuralNetwork:
    """(u, m) in R^{d+1} -> (u, extreme(u_1..u_d, m))"""
    tree = min_k(d + 1) if mode == "min" else max_k(d + 1)
    carry = select_inputs(identity_network(d, tree.depth), list(range(d)), d + 1)
    return parallelize_shared([carry, tree])


def augment_running_extreme(base: MarkovModel, mode: str = "min") -> MarkovModel:
    """
    Augment a model on R^{d-1} with its running minimum or maximum as coordinate d.

    The new update is (f(x, y), extreme(extreme_j f_j(x, y), x_d)) and the noise
    gains an inert last coordinate.
    """
    if mode not in ("min", "max"):
        raise InputError(f"mode must be 'min' or 'max', got {mode!r}")
    d = base.d + 1
    reduce = np.minimum if mode == "min" else np.maximum
    head = _extreme_head(base.d, mode)

    def noise_fn(rng, t, n):
        return np.hstack([base.sample_noise(rng, t, n), np.zeros((n, 1))])

    def update_fn(t, X, Y):
        moved = base.update(t, X[:, :-1], Y[:, :-1])
        extreme = moved.min(axis=1) if mode == "min" else moved.max(axis=1)
        return np.hstack([moved, reduce(extreme, X[:, -1])[:, None]])

    def update_net(t, y):
        inner = base.update_network(t, y[:-1])
        lifted = parallelize_separate([inner, identity_network(1, inner.depth)])
        return compose(head, lifted)

    def eta_builder(eps, t):
        base_eta = base.eta(eps, t)
        k = base.d
        sources = list(range(k)) + list(range(k + 1, 2 * k + 1))
        moved = select_inputs(base_eta.network, sources, 2 * d)
        carried = select_inputs(identity_network(1, moved.depth), [k], 2 * d)
        joint = parallelize_shared([moved, carried])
        return EtaNetwork(
            network=compose(head, joint),
            eps=eps,
            region=base_eta.region,
            M=base_eta.M,
            error_bound=math.sqrt(2.0) * base_eta.error_bound,
            lipschitz_bound=math.sqrt(2.0) * max(base_eta.lipschitz_bound, 1.0),
        )

    def envelope_fn(t, X, Y):
        moved = base.envelope(t, X[:, :-1], Y[:, :-1])
        return moved + np.maximum(moved, np.abs(X[:, -1]))

    base_moment = base.step_moment
    support = base.support
    if support.finite:
        support = NoiseSupport(np.hstack([support.atoms, np.zeros((support.k, 1))]), support.probabilities)
    start = base.x0.min() if mode == "min" else base.x0.max()
    logger.info(f"Augmented {base.family} model with its running {mode} (d={d})")
    return MarkovModel(
        family=f"{base.family}+running_{mode}",
        d=d,
        T=base.T,
        x0=np.append(base.x0, start),
        times=base.times,
        update_fn=update_fn,
        noise_fn=noise_fn,
        support=support,
        eta_builder=eta_builder if base.eta_builder is not None else None,
        update_network_builder=update_net if base.update_network_builder is not None else None,
        envelope_fn=envelope_fn if base.envelope_fn is not None else None,
        step_moment=(lambda t: 2.0 * base_moment(t) + 1.0) if base_moment is not None else None,
        constants=base.constants,
        params={**base.params, "base_family": base.family, "extreme": mode},
    )
