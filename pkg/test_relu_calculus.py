#!/usr/bin/env python3
"""
Tests for the ReLU network calculus: exact blocks, the calculus operations
with their size certificates, Lipschitz bounds and the binary container.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from errors import InputError
from relu_calculus import (
    AffineLayer,
    NeuralNetwork,
    absorb_affine,
    affine_network,
    certificate_holds,
    certify,
    clip_network,
    compose,
    constant_network,
    depth_sync,
    empirical_lipschitz,
    evaluate,
    fix_inputs,
    identity_network,
    lipschitz_upper_bound,
    load_network,
    max2,
    max_k,
    min_k,
    network_from_bytes,
    network_to_bytes,
    parallelize_separate,
    parallelize_shared,
    save_network,
    select_inputs,
    shift_output,
    size,
    spectral_norm_product,
    sum_equal_depth,
)


def random_network(rng, dims, density=0.7):
    """Random network with sparse weights through the listed widths"""
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        weights = rng.normal(size=(n_out, n_in)) * (rng.random((n_out, n_in)) < density)
        bias = rng.normal(size=n_out) * (rng.random(n_out) < density)
        layers.append(AffineLayer(weights, bias))
    return NeuralNetwork(tuple(layers))


def reference_forward(net, X):
    hidden = X
    for index, layer in enumerate(net.layers):
        hidden = hidden @ layer.weights.toarray().T + layer.bias
        if index < net.depth - 1:
            hidden = np.maximum(hidden, 0.0)
    return hidden


def test_max2_is_exact_with_size_seven():
    """max2 reproduces max(x, y) on random pairs"""
    rng = np.random.default_rng(0)
    pairs = rng.normal(scale=5.0, size=(100_000, 2))
    net = max2()
    assert size(net) == 7
    np.testing.assert_allclose(net(pairs)[:, 0], pairs.max(axis=1), rtol=0, atol=1e-12)


def test_max2_known_values():
    net = max2()
    assert evaluate(net, [3.0, -1.0])[0] == 3.0
    assert evaluate(net, [-2.0, -2.0])[0] == -2.0


@pytest.mark.parametrize("k", [1, 2, 3, 5, 8, 17, 64])
def test_max_k_and_min_k_are_exact(k):
    rng = np.random.default_rng(k)
    points = rng.normal(size=(1000, k))
    np.testing.assert_allclose(max_k(k)(points)[:, 0], points.max(axis=1), atol=1e-12)
    np.testing.assert_allclose(min_k(k)(points)[:, 0], points.min(axis=1), atol=1e-12)
    assert min_k(k).size <= 12 * k ** 3


def test_min_k_small_cases():
    assert evaluate(min_k(1), [4.0])[0] == 4.0
    assert evaluate(min_k(3), [1.0, 2.0, 3.0])[0] == 1.0
    with pytest.raises(InputError):
        max_k(0)


def test_clip_network():
    """clip is the componentwise projection onto [-M, M] and idempotent"""
    rng = np.random.default_rng(1)
    points = rng.normal(scale=3.0, size=(1000, 4))
    clip = clip_network(4, 1.5)
    np.testing.assert_allclose(clip(points), np.clip(points, -1.5, 1.5), atol=1e-12)
    np.testing.assert_allclose(compose(clip, clip)(points), clip(points), atol=1e-12)
    np.testing.assert_allclose(evaluate(clip_network(1, 1.0), [2.0]), [1.0])
    with pytest.raises(InputError):
        clip_network(2, 0.0)


def test_identity_network_every_depth():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(200, 3))
    for depth in range(1, 5):
        net = identity_network(3, depth)
        assert net.depth == depth
        np.testing.assert_allclose(net(points), points, atol=1e-12)
    assert identity_network(3, 1).size == 3
    assert identity_network(3, 3).size == 2 * 3 * 3


def test_evaluation_matches_dense_reference():
    rng = np.random.default_rng(3)
    net = random_network(rng, [4, 7, 5, 2])
    points = rng.normal(size=(300, 4))
    np.testing.assert_allclose(net(points), reference_forward(net, points), atol=1e-10)
    np.testing.assert_allclose(net(points, threads=4), net(points), atol=0)


def test_size_counts_nonzero_entries():
    net = NeuralNetwork((AffineLayer(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.0, 1.0])),))
    assert size(net) == 3
    assert constant_network(3, 0.0).size == 0
    assert constant_network(3, 2.0).size == 1


def test_dimension_mismatch_raises():
    with pytest.raises(InputError):
        NeuralNetwork((AffineLayer(np.ones((2, 3)), np.zeros(2)), AffineLayer(np.ones((1, 3)), np.zeros(1))))
    with pytest.raises(InputError):
        max2()(np.ones((4, 3)))
    with pytest.raises(InputError):
        compose(max2(), max2())


def test_calculus_algebra_on_random_pairs():
    """Each operation matches its definition and its size certificate holds by recount"""
    rng = np.random.default_rng(4)
    for trial in range(100):
        d = int(rng.integers(1, 5))
        mid = int(rng.integers(1, 4))
        inner = random_network(rng, [d] + [int(rng.integers(2, 6))] * int(rng.integers(0, 3)) + [mid])
        outer = random_network(rng, [mid] + [int(rng.integers(2, 6))] * int(rng.integers(0, 3)) + [2])
        X = rng.normal(size=(1000, d))

        composed = compose(outer, inner)
        np.testing.assert_allclose(composed(X), outer(inner(X)), atol=1e-10)
        assert composed.size <= 2 * (outer.size + inner.size)

        first = random_network(rng, [d] + [int(rng.integers(2, 6))] * int(rng.integers(0, 4)) + [2])
        second = random_network(rng, [d, 3, 2])
        synced = depth_sync([first, second])
        for original, padded in zip([first, second], synced):
            np.testing.assert_allclose(padded(X), original(X), atol=1e-10)
        assert synced[0].depth == synced[1].depth

        shared = parallelize_shared(synced)
        np.testing.assert_allclose(shared(X), np.hstack([net(X) for net in synced]), atol=1e-10)
        assert shared.size == sum(net.size for net in synced)

        Z = rng.normal(size=(1000, 2 * d))
        separate = parallelize_separate(synced)
        np.testing.assert_allclose(separate(Z), np.hstack([synced[0](Z[:, :d]), synced[1](Z[:, d:])]), atol=1e-10)
        assert separate.size == sum(net.size for net in synced)

        weights = rng.normal(size=2)
        summed = sum_equal_depth(synced, weights)
        np.testing.assert_allclose(summed(X), weights[0] * synced[0](X) + weights[1] * synced[1](X), atol=1e-10)
        assert summed.size <= sum(net.size for net in synced)

        if d > 1:
            value = rng.normal()
            pinned = fix_inputs(inner, [0], [value])
            np.testing.assert_allclose(pinned(X[:, 1:]), inner(np.hstack([np.full((1000, 1), value), X[:, 1:]])),
                                       atol=1e-10)
            assert pinned.size <= inner.size

        scalar = random_network(rng, [d, 3, 1])
        delta = float(rng.normal())
        np.testing.assert_allclose(shift_output(scalar, delta)(X), scalar(X) - delta, atol=1e-10)


def test_depth_sync_padding_cost():
    """Padding by j layers costs the duplicated last layer plus 2 * output_dim per extra layer"""
    rng = np.random.default_rng(5)
    short = random_network(rng, [3, 2], density=1.0)
    deep = random_network(rng, [3, 4, 4, 4, 2])
    padded, _ = depth_sync([short, deep])
    assert padded.depth == 4
    assert padded.size == 2 * short.size + 2 * 2 * 3
    two_layers = random_network(rng, [3, 4, 2])
    once, _ = depth_sync([two_layers, random_network(rng, [3, 4, 4, 2])])
    last = two_layers.layers[-1]
    assert once.size == two_layers.size + last.weights.nnz + np.count_nonzero(last.bias) + 2 * 2


def test_sum_and_parallel_require_equal_depth():
    rng = np.random.default_rng(6)
    with pytest.raises(InputError):
        sum_equal_depth([random_network(rng, [2, 1]), random_network(rng, [2, 3, 1])], [1.0, 1.0])
    with pytest.raises(InputError):
        parallelize_shared([])
    with pytest.raises(InputError):
        sum_equal_depth([max2()], [1.0, 2.0])


def test_fix_inputs_errors():
    net = max2()
    with pytest.raises(InputError):
        fix_inputs(net, [0, 1], [1.0, 2.0])
    with pytest.raises(InputError):
        fix_inputs(net, [2], [1.0])
    with pytest.raises(InputError):
        fix_inputs(net, [0], [np.inf])
    pinned = fix_inputs(net, [1], [0.5])
    np.testing.assert_allclose(pinned(np.array([[0.2], [0.9]]))[:, 0], [0.5, 0.9])


def test_select_inputs_and_absorb_affine():
    rng = np.random.default_rng(7)
    net = max2()
    rewired = select_inputs(net, [2, 0], 3)
    X = rng.normal(size=(500, 3))
    np.testing.assert_allclose(rewired(X)[:, 0], np.maximum(X[:, 2], X[:, 0]), atol=1e-12)
    assert rewired.size == net.size

    outer = random_network(rng, [3, 6, 1])
    affine = affine_network(np.diag([2.0, -1.0, 0.5]), [0.1, 0.0, -0.3])
    folded = absorb_affine(outer, affine)
    np.testing.assert_allclose(folded(X), outer(affine(X)), atol=1e-10)
    assert folded.size <= compose(outer, affine).size
    with pytest.raises(InputError):
        absorb_affine(outer, random_network(rng, [3, 2, 3]))


def test_lipschitz_bounds_are_ordered():
    """sampled quotient <= power-iteration product <= certified bound"""
    rng = np.random.default_rng(8)
    for _ in range(10):
        net = random_network(rng, [3, 6, 6, 2])
        sampled = empirical_lipschitz(net, n=2000, seed=1)
        assert sampled <= lipschitz_upper_bound(net) * (1 + 1e-9)
        assert spectral_norm_product(net) <= lipschitz_upper_bound(net) * (1 + 1e-9)
    assert empirical_lipschitz(max2(), n=5000, seed=2) <= np.sqrt(2.0) + 1e-9
    assert empirical_lipschitz(constant_network(2, 3.0)) == 0.0


def test_certificates():
    net = compose(max2(), clip_network(2, 1.0))
    cert = certify(net, lipschitz=lipschitz_upper_bound(net), provenance="clip then max")
    assert certificate_holds(net, cert)
    assert not certificate_holds(net, certify(max2()))


def test_container_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    net = random_network(rng, [5, 8, 3, 1])
    cert = certify(net, lipschitz=2.5, provenance="random")
    restored, restored_cert = network_from_bytes(network_to_bytes(net, cert))
    assert restored_cert == cert
    for a, b in zip(net.layers, restored.layers):
        assert (a.weights != b.weights).nnz == 0
        assert np.array_equal(a.bias, b.bias)
    assert network_to_bytes(restored, cert) == network_to_bytes(net, cert)

    path = tmp_path / "net.bin"
    save_network(net, path)
    loaded, no_cert = load_network(path)
    assert no_cert is None
    X = rng.normal(size=(50, 5))
    assert np.array_equal(loaded(X), net(X))


def test_container_rejects_garbage():
    with pytest.raises(InputError):
        network_from_bytes(b"NOTANETWORK" + bytes(32))


@pytest.mark.parametrize("keep", [12, 30, 60, -9])
def test_container_rejects_truncated_payloads(keep):
    net = random_network(np.random.default_rng(10), [4, 5, 1])
    payload = network_to_bytes(net, certify(net, provenance="truncated"))
    with pytest.raises(InputError):
        network_from_bytes(payload[:keep])
