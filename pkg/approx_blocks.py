"""
Approximation Blocks
====================

Certified approximation networks built on the ReLU calculus: the sawtooth
squaring network on [0, 1] and the capped product network n_{eps,M}, which
approximates (x, y) -> x*y on [-M, M]^2 with size logarithmic in 1/eps and M.
"""

import logging
import math
from dataclasses import dataclass, asdict
from typing import List

import numpy as np
import scipy.sparse as sp

from errors import InputError
from relu_calculus import AffineLayer, NeuralNetwork, SizeCertificate, certify

logger = logging.getLogger(__name__)

# Slope bound of the sawtooth interpolant of z^2 on [0, 1]; abs and clipping are 1-Lipschitz
PRODUCT_LIPSCHITZ_CONSTANT = 2.0


@dataclass(frozen=True)
class ProductNetSpec:
    """Parameters of one product network"""

    epsilon: float
    M: float
    sawtooth_depth: int
    base_epsilon: float


@dataclass(frozen=True)
class ProductCertificate:
    """Measured properties of a product network, as emitted by the product-cert command"""

    epsilon: float
    M: float
    sawtooth_depth: int
    size: int
    size_constant: float
    lipschitz_constant: float
    lipschitz_bound: float
    measured_sup_error: float
    sampled_lipschitz: float
    grid_points: int
    sampled_pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def sawtooth_depth(eps: float) -> int:
    """Smallest m >= 1 with 2^(-2m-2) <= eps"""
    m = max(1, math.ceil((math.log2(1.0 / eps) - 2.0) / 2.0))
    while 2.0 ** (-2 * m - 2) > eps:
        m += 1
    while m > 1 and 2.0 ** (-2 * (m - 1) - 2) <= eps:
        m -= 1
    return m


def _squaring_layers(m: int) -> List[AffineLayer]:
    # Hidden state per stage: relu(g), relu(g - 1/2), relu(g - 1), relu(s), where g is
    # the k-fold hat composition and s the running sum z - sum_j g_j / 4^j
    layers = [AffineLayer(np.ones((4, 1)), np.array([0.0, -0.5, -1.0, 0.0]))]
    for k in range(1, m):
        scale = 4.0 ** -k
        weights = np.array([
            [2.0, -4.0, 2.0, 0.0],
            [2.0, -4.0, 2.0, 0.0],
            [2.0, -4.0, 2.0, 0.0],
            [-2.0 * scale, 4.0 * scale, -2.0 * scale, 1.0],
        ])
        layers.append(AffineLayer(weights, np.array([0.0, -0.5, -1.0, 0.0])))
    scale = 4.0 ** -m
    layers.append(AffineLayer(np.array([[-2.0 * scale, 4.0 * scale, -2.0 * scale, 1.0]]), np.zeros(1)))
    return layers


def sawtooth_network(m: int) -> NeuralNetwork:
    """
    The m-stage sawtooth approximation sq_m(z) = z - sum_{k<=m} h^k(z) / 4^k of z^2 on [0, 1].

    Size is 15m - 5, depth m + 1, sup error on [0, 1] at most 2^(-2m-2).
    """
    if m < 1:
        raise InputError(f"sawtooth depth must be positive, got {m}")
    return NeuralNetwork(tuple(_squaring_layers(m)))


def squaring_network(eps: float) -> NeuralNetwork:
    """
    Network approximating z -> z^2 on [0, 1] with sup error at most eps.

    Args:
        eps: Target accuracy in (0, 1/2)

    Returns:
        The sawtooth network with the smallest admissible depth
    """
    if not 0.0 < eps < 0.5:
        raise InputError(f"squaring accuracy must lie in (0, 1/2), got {eps}")
    return sawtooth_network(sawtooth_depth(eps))


def product_spec(eps: float, M: float) -> ProductNetSpec:
    if not 0.0 < eps <= 1.0:
        raise InputError(f"product accuracy must lie in (0, 1], got {eps}")
    if not M >= 1.0 or not math.isfinite(M):
        raise InputError(f"product range M must be a finite real >= 1, got {M}")
    base = eps / (3.0 * M * M)
    return ProductNetSpec(epsilon=eps, M=M, sawtooth_depth=sawtooth_depth(base / 2.0), base_epsilon=base)


def product_network(eps: float, M: float) -> NeuralNetwork:
    """
    Capped product network n_{eps,M} with sup |n(x, y) - x y| < eps on [-M, M]^2.

    The inputs are scaled by 1/M and clipped to [-1, 1]; the product on [-1, 1]^2
    comes from xy = ((x+y)/2)^2 - ((x-y)/2)^2 with |z| = relu(z) + relu(-z) feeding
    two sawtooth squarings, and the result is rescaled by M^2. The network is
    bounded by M^2 + eps everywhere and 2M-Lipschitz under |dx| + |dy|.
    """
    spec = product_spec(eps, M)
    squaring = _squaring_layers(spec.sawtooth_depth)
    inv = 1.0 / M

    clip = AffineLayer(
        np.array([[inv, 0.0], [inv, 0.0], [0.0, inv], [0.0, inv]]),
        np.array([1.0, -1.0, 1.0, -1.0]),
    )
    # rows a, -a, b, -b with a = (u + v)/2, b = (u - v)/2 and u, v the clipped inputs
    halves = AffineLayer(
        0.5 * np.array([
            [1.0, -1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0, 1.0],
            [1.0, -1.0, -1.0, 1.0],
            [-1.0, 1.0, 1.0, -1.0],
        ]),
        np.array([-1.0, 1.0, 0.0, 0.0]),
    )
    absolute = squaring[0].weights @ sp.csr_matrix(np.ones((1, 2)))
    entry = AffineLayer(
        sp.block_diag([absolute, absolute], format="csr"),
        np.concatenate([squaring[0].bias, squaring[0].bias]),
    )
    middle = [
        AffineLayer(sp.block_diag([layer.weights, layer.weights], format="csr"),
                    np.concatenate([layer.bias, layer.bias]))
        for layer in squaring[1:-1]
    ]
    readout = squaring[-1].weights
    scale = M * M
    final = AffineLayer(sp.hstack([scale * readout, -scale * readout], format="csr"), np.zeros(1))
    return NeuralNetwork(tuple([clip, halves, entry] + middle + [final]))


def product_size_constant(eps: float, M: float, net_size: int) -> float:
    """Implementation constant C with size = C * (log(1/eps) + log(M) + 1)"""
    return net_size / (math.log(1.0 / eps) + math.log(M) + 1.0)


def product_network_certificate(eps: float, M: float, net: NeuralNetwork) -> SizeCertificate:
    # Euclidean form of the 2M bound under |dx| + |dy|
    return certify(net, lipschitz=math.sqrt(2.0) * PRODUCT_LIPSCHITZ_CONSTANT * M,
                   provenance=f"product_network(eps={eps!r}, M={M!r})")


def _sampled_pair_quotients(net: NeuralNetwork, half_width: float, n_pairs: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    base = rng.uniform(-half_width, half_width, size=(n_pairs, 2))
    radius = half_width * 10.0 ** rng.uniform(-6.0, 0.0, size=(n_pairs, 1))
    other = base + radius * rng.standard_normal((n_pairs, 2))
    delta = np.abs(other - base).sum(axis=1)
    change = np.abs(net(other) - net(base))[:, 0]
    valid = delta > 0
    return float(np.max(change[valid] / delta[valid]))


def product_grid_error(net: NeuralNetwork, M: float, grid_points: int = 401) -> float:
    """Sup of |n(x, y) - x y| over a uniform grid on [-M, M]^2"""
    axis = np.linspace(-M, M, grid_points)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return float(np.max(np.abs(net(points)[:, 0] - points[:, 0] * points[:, 1])))


def product_certificate(eps: float, M: float, grid_points: int = 401, n_pairs: int = 100_000,
                        seed: int = 0) -> ProductCertificate:
    """
    Build n_{eps,M} and measure it.

    Args:
        eps: Accuracy of the product network
        M: Half-width of the approximation square
        grid_points: Grid resolution per axis for the sup-error measurement
        n_pairs: Random pairs in [-10M, 10M]^2 for the Lipschitz quotient
        seed: Seed of the pair sampler

    Returns:
        ProductCertificate with measured error, size and Lipschitz data
    """
    spec = product_spec(eps, M)
    net = product_network(eps, M)
    measured = product_grid_error(net, M, grid_points)
    sampled = _sampled_pair_quotients(net, 10.0 * M, n_pairs, seed)
    certificate = ProductCertificate(
        epsilon=eps,
        M=M,
        sawtooth_depth=spec.sawtooth_depth,
        size=net.size,
        size_constant=product_size_constant(eps, M, net.size),
        lipschitz_constant=PRODUCT_LIPSCHITZ_CONSTANT,
        lipschitz_bound=PRODUCT_LIPSCHITZ_CONSTANT * M,
        measured_sup_error=measured,
        sampled_lipschitz=sampled,
        grid_points=grid_points,
        sampled_pairs=n_pairs,
    )
    logger.info(f"Product network eps={eps} M={M}: size {net.size}, sup error {measured:.3e}, "
                f"sampled Lipschitz {sampled:.4f} (bound {certificate.lipschitz_bound:.4f})")
    return certificate


def fit_size_slope(log_inverse_eps, sizes):
    """
    Least-squares affine fit of size against log(1/eps).

    Returns:
        Tuple (slope, intercept, slope_standard_error, residuals)
    """
    x = np.asarray(log_inverse_eps, dtype=np.float64)
    y = np.asarray(sizes, dtype=np.float64)
    if x.shape[0] < 3:
        raise InputError("an affine size fit needs at least three points")
    slope, intercept = np.polyfit(x, y, 1)
    residuals = y - (slope * x + intercept)
    spread = np.sum((x - x.mean()) ** 2)
    slope_error = float(np.sqrt(np.sum(residuals ** 2) / (x.shape[0] - 2) / spread))
    return float(slope), float(intercept), slope_error, residuals
