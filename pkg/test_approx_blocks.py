#!/usr/bin/env python3
"""
Tests for the sawtooth squaring network and the capped product network.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from approx_blocks import (
    PRODUCT_LIPSCHITZ_CONSTANT,
    fit_size_slope,
    product_certificate,
    product_grid_error,
    product_network,
    product_network_certificate,
    product_spec,
    sawtooth_depth,
    sawtooth_network,
    squaring_network,
)
from errors import InputError
from relu_calculus import certificate_holds, empirical_lipschitz


@pytest.mark.parametrize("m", [1, 2, 3, 6, 10])
def test_sawtooth_error_size_and_depth(m):
    net = sawtooth_network(m)
    z = np.linspace(0.0, 1.0, 100_001)[:, None]
    error = np.max(np.abs(net(z)[:, 0] - z[:, 0] ** 2))
    assert error <= 2.0 ** (-2 * m - 2) + 1e-15
    assert net.size == 15 * m - 5
    assert net.depth == m + 1


def test_sawtooth_depth_is_minimal():
    for eps in (0.2, 1e-2, 1e-3, 1e-6):
        m = sawtooth_depth(eps)
        assert 2.0 ** (-2 * m - 2) <= eps
        assert m == 1 or 2.0 ** (-2 * (m - 1) - 2) > eps


def test_squaring_network_accuracy():
    z = np.linspace(0.0, 1.0, 20_001)[:, None]
    for eps in (0.1, 1e-3, 1e-5):
        net = squaring_network(eps)
        assert np.max(np.abs(net(z)[:, 0] - z[:, 0] ** 2)) <= eps


@pytest.mark.parametrize("eps", [0.0, 0.5, 2.0, -1.0])
def test_squaring_network_rejects_accuracy(eps):
    with pytest.raises(InputError):
        squaring_network(eps)


@pytest.mark.parametrize("eps,M", [(e, M) for e in (1e-1, 1e-2, 1e-3) for M in (1.0, 10.0)])
def test_product_network_sup_error(eps, M):
    """Grid sup error on [-M, M]^2 stays below eps"""
    net = product_network(eps, M)
    assert product_grid_error(net, M, grid_points=401) < eps


@pytest.mark.parametrize("M", [1.0, 4.0])
def test_product_network_error_shrinks_with_eps(M):
    eps_list = [1e-1, 1e-2, 1e-3, 1e-4]
    depths = [product_spec(eps, M).sawtooth_depth for eps in eps_list]
    errors = [product_grid_error(product_network(eps, M), M) for eps in eps_list]
    assert depths == sorted(depths) and depths[-1] > depths[0]
    for coarse, fine in zip(errors, errors[1:]):
        assert fine <= coarse
    assert errors[-1] < errors[0] / 10.0


def test_product_network_known_values():
    net = product_network(1e-3, 1.0)
    points = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [0.5, -0.5]])
    np.testing.assert_allclose(net(points)[:, 0], [0.0, 1.0, -1.0, -0.25], atol=1e-3)


def test_product_network_is_bounded_and_lipschitz_outside_the_square():
    eps, M = 1e-2, 2.0
    net = product_network(eps, M)
    rng = np.random.default_rng(0)
    far = rng.uniform(-50.0, 50.0, size=(20_000, 2))
    assert np.max(np.abs(net(far))) <= M * M + eps
    sum_norm = empirical_lipschitz(net, n=20_000, seed=1, scale=10.0 * M, split=1)
    assert sum_norm <= PRODUCT_LIPSCHITZ_CONSTANT * M * (1 + 1e-9)


def test_product_certificate_fields():
    cert = product_certificate(1e-2, 10.0, grid_points=101, n_pairs=10_000, seed=3)
    spec = product_spec(1e-2, 10.0)
    assert cert.sawtooth_depth == spec.sawtooth_depth
    assert cert.size == product_network(1e-2, 10.0).size
    assert cert.lipschitz_bound == PRODUCT_LIPSCHITZ_CONSTANT * 10.0
    assert cert.measured_sup_error < 1e-2
    assert cert.sampled_lipschitz <= cert.lipschitz_bound
    assert math.isclose(cert.size_constant * (math.log(100.0) + math.log(10.0) + 1.0), cert.size)
    assert set(cert.to_dict()) >= {"epsilon", "M", "size", "measured_sup_error", "sampled_lipschitz"}


def test_product_network_euclidean_certificate_holds():
    net = product_network(1e-2, 3.0)
    assert certificate_holds(net, product_network_certificate(1e-2, 3.0, net))


def test_product_size_is_affine_in_log_inverse_eps():
    """At fixed M the fitted slope is resolved to within ten percent"""
    eps_values = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
    for M in (1.0, 10.0):
        sizes = [product_network(eps, M).size for eps in eps_values]
        assert sizes == sorted(sizes)
        slope, _, slope_error, _ = fit_size_slope([math.log(1.0 / e) for e in eps_values], sizes)
        assert slope > 0
        assert slope_error < 0.1 * slope


def test_product_size_grows_with_M():
    assert product_network(1e-2, 100.0).size > product_network(1e-2, 1.0).size


@pytest.mark.parametrize("eps,M", [(0.0, 1.0), (1.5, 1.0), (0.1, 0.5), (0.1, float("inf"))])
def test_product_spec_rejects_parameters(eps, M):
    with pytest.raises(InputError):
        product_spec(eps, M)


def test_fit_needs_three_points():
    with pytest.raises(InputError):
        fit_size_slope([1.0, 2.0], [3.0, 4.0])
