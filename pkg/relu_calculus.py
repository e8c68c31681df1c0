"""
ReLU Network Calculus
=====================

Explicit deep ReLU networks x -> W_L o (relu o W_{L-1}) o ... o (relu o W_1)(x)
with audited nonzero-parameter counts, plus the operations every construction in
this package is assembled from: composition, parallelization, weighted sums,
identity padding, input fixing, output shifts, exact max/min/clip blocks,
Lipschitz bounds and a portable binary container.

Weights are stored as scipy CSR matrices with explicit zeros eliminated, so the
size of a network is the number of stored weights plus the nonzero biases.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from errors import InputError

logger = logging.getLogger(__name__)

# Floats of hidden activations held in memory per evaluation chunk
_CHUNK_BUDGET = 1 << 23

MAGIC = b"RELUCALC"
FORMAT_VERSION = 1
_FLAG_METADATA = 1


def _as_csr(weights) -> sp.csr_matrix:
    """Canonical CSR copy: float64, summed duplicates, no stored zeros, sorted indices"""
    if sp.issparse(weights):
        matrix = sp.csr_matrix(weights, dtype=np.float64, copy=True)
    else:
        dense = np.asarray(weights, dtype=np.float64)
        if dense.ndim != 2:
            raise InputError(f"weights must be a matrix, got shape {dense.shape}")
        matrix = sp.csr_matrix(dense)
    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    matrix.sort_indices()
    return matrix


@dataclass(frozen=True)
class AffineLayer:
    """One affine map z -> W z + b with W of shape (out_dim, in_dim)"""

    weights: sp.csr_matrix
    bias: np.ndarray

    def __post_init__(self):
        weights = _as_csr(self.weights)
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        out_dim, in_dim = weights.shape
        if out_dim < 1 or in_dim < 1:
            raise InputError(f"layer dimensions must be positive, got {weights.shape}")
        if bias.shape[0] != out_dim:
            raise InputError(f"bias length {bias.shape[0]} does not match out_dim {out_dim}")
        if not (np.all(np.isfinite(weights.data)) and np.all(np.isfinite(bias))):
            raise InputError("layer entries must be finite")
        bias.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return int(self.weights.nnz + np.count_nonzero(self.bias))


@dataclass(frozen=True)
class NeuralNetwork:
    """Layered affine/ReLU function; ReLU between layers, never after the last"""

    layers: Tuple[AffineLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InputError("a network needs at least one layer")
        for index in range(1, len(layers)):
            if layers[index].in_dim != layers[index - 1].out_dim:
                raise InputError(
                    f"layer {index} expects {layers[index].in_dim} inputs but layer "
                    f"{index - 1} produces {layers[index - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def max_width(self) -> int:
        return max(layer.out_dim for layer in self.layers)

    def __call__(self, X, threads: int = 1) -> np.ndarray:
        return evaluate_batch(self, X, threads=threads)


@dataclass(frozen=True)
class SizeCertificate:
    """Declared size and Lipschitz bound of a constructed network"""

    declared_size: int
    declared_lipschitz_upper: Optional[float] = None  # None means "unknown"
    provenance: str = ""

    def to_dict(self) -> dict:
        return {
            "declared_size": self.declared_size,
            "declared_lipschitz_upper": self.declared_lipschitz_upper,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SizeCertificate":
        return cls(
            declared_size=int(data["declared_size"]),
            declared_lipschitz_upper=data.get("declared_lipschitz_upper"),
            provenance=data.get("provenance", ""),
        )


# ---------------------------------------------------------------------------
# Evaluation and accounting
# ---------------------------------------------------------------------------

def _forward(layers: Sequence[AffineLayer], X: np.ndarray) -> np.ndarray:
    hidden = np.ascontiguousarray(X.T)
    last = len(layers) - 1
    for index, layer in enumerate(layers):
        hidden = layer.weights @ hidden
        hidden += layer.bias[:, None]
        if index < last:
            np.maximum(hidden, 0.0, out=hidden)
    return hidden.T


def evaluate_batch(net: NeuralNetwork, X, threads: int = 1) -> np.ndarray:
    """
    Evaluate a network on a batch of points.

    Args:
        net: Network to evaluate
        X: Array of shape (n, input_dim)
        threads: Worker threads used for large batches

    Returns:
        Array of shape (n, output_dim)
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise InputError(f"expected points of dimension {net.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("network inputs must be finite")

    chunk = max(1, _CHUNK_BUDGET // max(net.max_width, 1))
    if X.shape[0] <= chunk:
        return _forward(net.layers, X)

    starts = range(0, X.shape[0], chunk)
    pieces = [X[start:start + chunk] for start in starts]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda part: _forward(net.layers, part), pieces))
    else:
        results = [_forward(net.layers, part) for part in pieces]
    return np.vstack(results)


def evaluate(net: NeuralNetwork, x) -> np.ndarray:
    """Evaluate a network at a single point of length input_dim"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a vector, got shape {x.shape}")
    return evaluate_batch(net, x[None, :])[0]


def size(net: NeuralNetwork) -> int:
    """Exact count of nonzero weight and bias entries"""
    return net.size


def certify(net: NeuralNetwork, lipschitz: Optional[float] = None, provenance: str = "") -> SizeCertificate:
    return SizeCertificate(declared_size=net.size, declared_lipschitz_upper=lipschitz, provenance=provenance)


def certificate_holds(net: NeuralNetwork, certificate: SizeCertificate) -> bool:
    """Recount the artifact and check the declared size and Lipschitz bound against it"""
    if certificate.declared_size != net.size:
        return False
    if certificate.declared_lipschitz_upper is None:
        return True
    return empirical_lipschitz(net) <= certificate.declared_lipschitz_upper * (1.0 + 1e-9)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def affine_network(weights, bias=None) -> NeuralNetwork:
    """Single-layer network z -> W z + b"""
    weights = _as_csr(weights)
    if bias is None:
        bias = np.zeros(weights.shape[0])
    return NeuralNetwork((AffineLayer(weights, bias),))


def constant_network(input_dim: int, value: float) -> NeuralNetwork:
    """Network that ignores its input and returns a constant"""
    return affine_network(sp.csr_matrix((1, input_dim)), [value])


def identity_network(dim: int, depth: int) -> NeuralNetwork:
    """
    Exact identity on R^dim with the requested depth.

    Depth 1 is the plain affine identity (dim nonzeros); deeper identities carry
    x = relu(x) - relu(-x) through 2*dim channels and cost 2*dim per layer.
    """
    if dim < 1 or depth < 1:
        raise InputError(f"identity needs positive dim and depth, got {dim}, {depth}")
    eye = sp.identity(dim, format="csr")
    if depth == 1:
        return affine_network(eye)
    layers = [AffineLayer(sp.vstack([eye, -eye]), np.zeros(2 * dim))]
    layers += [AffineLayer(sp.identity(2 * dim, format="csr"), np.zeros(2 * dim)) for _ in range(depth - 2)]
    layers.append(AffineLayer(sp.hstack([eye, -eye]), np.zeros(dim)))
    return NeuralNetwork(tuple(layers))


def select_inputs(net: NeuralNetwork, sources: Sequence[int], input_dim: int) -> NeuralNetwork:
    """
    Rewire the first layer so that input j of `net` reads coordinate sources[j].

    Args:
        net: Network whose inputs are rewired
        sources: One source coordinate per input of `net`
        input_dim: Dimension of the new input vector

    Returns:
        Network on R^input_dim computing net(z[sources])
    """
    sources = np.asarray(sources, dtype=np.int64)
    if sources.shape != (net.input_dim,):
        raise InputError(f"need {net.input_dim} sources, got {sources.shape[0]}")
    if np.any(sources < 0) or np.any(sources >= input_dim):
        raise InputError("source coordinate out of range")
    selector = sp.csr_matrix(
        (np.ones(net.input_dim), (np.arange(net.input_dim), sources)),
        shape=(net.input_dim, input_dim),
    )
    first = net.layers[0]
    rewired = AffineLayer(first.weights @ selector, first.bias)
    return NeuralNetwork((rewired,) + net.layers[1:])


# ---------------------------------------------------------------------------
# Calculus operations
# ---------------------------------------------------------------------------

def compose(outer: NeuralNetwork, inner: NeuralNetwork) -> NeuralNetwork:
    """
    Realize outer o inner.

    The seam splits the inner output as z = relu(z) - relu(-z), which keeps
    size(result) <= 2 * (size(outer) + size(inner)) without densifying.
    """
    if outer.input_dim != inner.output_dim:
        raise InputError(
            f"cannot compose: outer expects {outer.input_dim} inputs, inner produces {inner.output_dim}"
        )
    last = inner.layers[-1]
    first = outer.layers[0]
    split = AffineLayer(sp.vstack([last.weights, -last.weights]), np.concatenate([last.bias, -last.bias]))
    merge = AffineLayer(sp.hstack([first.weights, -first.weights]), first.bias)
    return NeuralNetwork(inner.layers[:-1] + (split, merge) + outer.layers[1:])


def absorb_affine(outer: NeuralNetwork, inner: NeuralNetwork) -> NeuralNetwork:
    """
    Realize outer o inner for a single-layer inner by multiplying it into outer's first layer.

    Falls back to compose when the product would be larger than the seam
    construction, so the 2 * (s1 + s2) bound still holds.
    """
    if inner.depth != 1:
        raise InputError(f"absorb_affine needs a single-layer inner network, got depth {inner.depth}")
    if outer.input_dim != inner.output_dim:
        raise InputError(
            f"cannot compose: outer expects {outer.input_dim} inputs, inner produces {inner.output_dim}"
        )
    first, affine = outer.layers[0], inner.layers[0]
    folded = AffineLayer(first.weights @ affine.weights, first.bias + first.weights @ affine.bias)
    seam = compose(outer, inner)
    candidate = NeuralNetwork((folded,) + outer.layers[1:])
    return candidate if candidate.size <= seam.size else seam


def _require_equal_depth(nets: Sequence[NeuralNetwork]) -> int:
    if not nets:
        raise InputError("at least one network is required")
    depths = {net.depth for net in nets}
    if len(depths) != 1:
        raise InputError(f"networks must share one depth, got {sorted(depths)}; use depth_sync")
    return depths.pop()


def parallelize_separate(nets: Sequence[NeuralNetwork]) -> NeuralNetwork:
    """Stack networks on concatenated inputs with block-diagonal layers"""
    depth = _require_equal_depth(nets)
    layers = []
    for index in range(depth):
        blocks = [net.layers[index] for net in nets]
        layers.append(AffineLayer(
            sp.block_diag([block.weights for block in blocks], format="csr"),
            np.concatenate([block.bias for block in blocks]),
        ))
    return NeuralNetwork(tuple(layers))


def parallelize_shared(nets: Sequence[NeuralNetwork]) -> NeuralNetwork:
    """Stack networks that read the same input; outputs are concatenated"""
    depth = _require_equal_depth(nets)
    if len({net.input_dim for net in nets}) != 1:
        raise InputError("shared parallelization needs equal input dimensions")
    layers = [AffineLayer(
        sp.vstack([net.layers[0].weights for net in nets], format="csr"),
        np.concatenate([net.layers[0].bias for net in nets]),
    )]
    for index in range(1, depth):
        blocks = [net.layers[index] for net in nets]
        layers.append(AffineLayer(
            sp.block_diag([block.weights for block in blocks], format="csr"),
            np.concatenate([block.bias for block in blocks]),
        ))
    return NeuralNetwork(tuple(layers))


def sum_equal_depth(nets: Sequence[NeuralNetwork], weights: Sequence[float]) -> NeuralNetwork:
    """
    Weighted sum x -> sum_i w_i net_i(x) of networks with one shared shape.

    Args:
        nets: Networks of equal depth, input_dim and output_dim
        weights: One finite weight per network

    Returns:
        Network with size at most the sum of the operand sizes
    """
    depth = _require_equal_depth(nets)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != len(nets):
        raise InputError(f"{len(nets)} networks but {weights.shape[0]} weights")
    if not np.all(np.isfinite(weights)):
        raise InputError("summation weights must be finite")
    if len({(net.input_dim, net.output_dim) for net in nets}) != 1:
        raise InputError("summed networks need equal input and output dimensions")

    bias = np.zeros(nets[0].output_dim)
    for w, net in zip(weights, nets):
        bias = bias + w * net.layers[-1].bias

    if depth == 1:
        matrix = sp.csr_matrix(nets[0].layers[0].weights.shape)
        for w, net in zip(weights, nets):
            matrix = matrix + w * net.layers[0].weights
        return affine_network(matrix, bias)

    shared = parallelize_shared([NeuralNetwork(net.layers[:-1]) for net in nets])
    final = AffineLayer(
        sp.hstack([w * net.layers[-1].weights for w, net in zip(weights, nets)], format="csr"),
        bias,
    )
    return NeuralNetwork(shared.layers + (final,))


def _pad_depth(net: NeuralNetwork, extra: int) -> NeuralNetwork:
    """
    Extend a network by `extra` layers without changing its function.

    The last layer is split into (A, -A) so relu(Ax+b) - relu(-Ax-b) recovers it.
    Padding by e >= 1 layers therefore adds the size of the duplicated last layer,
    once, on top of 2*output_dim per added layer; it is not a flat 2*output_dim
    per added layer.
    """
    last = net.layers[-1]
    out = net.output_dim
    eye = sp.identity(out, format="csr")
    split = AffineLayer(sp.vstack([last.weights, -last.weights]), np.concatenate([last.bias, -last.bias]))
    carry = [AffineLayer(sp.identity(2 * out, format="csr"), np.zeros(2 * out)) for _ in range(extra - 1)]
    merge = AffineLayer(sp.hstack([eye, -eye]), np.zeros(out))
    return NeuralNetwork(net.layers[:-1] + (split,) + tuple(carry) + (merge,))


def depth_sync(nets: Sequence[NeuralNetwork]) -> List[NeuralNetwork]:
    """Pad every network with output-side identity layers up to the largest depth"""
    if not nets:
        return []
    target = max(net.depth for net in nets)
    return [net if net.depth == target else _pad_depth(net, target - net.depth) for net in nets]


def fix_inputs(net: NeuralNetwork, fixed_coords: Iterable[int], values) -> NeuralNetwork:
    """
    Pin some input coordinates to constants by folding their columns into the first bias.

    Args:
        net: Network to specialize
        fixed_coords: Distinct input indices to pin
        values: One finite value per pinned index

    Returns:
        Network on the remaining coordinates (original order), size never larger
    """
    coords = [int(c) for c in fixed_coords]
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(coords) != values.shape[0]:
        raise InputError(f"{len(coords)} fixed coordinates but {values.shape[0]} values")
    if len(set(coords)) != len(coords):
        raise InputError("fixed coordinates must be distinct")
    if any(c < 0 or c >= net.input_dim for c in coords):
        raise InputError(f"fixed coordinate out of range for input_dim {net.input_dim}")
    if not np.all(np.isfinite(values)):
        raise InputError("fixed values must be finite")
    keep = [j for j in range(net.input_dim) if j not in set(coords)]
    if not keep:
        raise InputError("cannot fix every input coordinate")

    first = net.layers[0]
    weights = first.weights.tocsc()
    folded = first.bias + (weights[:, coords] @ values if coords else 0.0)
    pinned = AffineLayer(weights[:, keep], folded)
    return NeuralNetwork((pinned,) + net.layers[1:])


def shift_output(net: NeuralNetwork, delta: float) -> NeuralNetwork:
    """x -> net(x) - delta for a scalar-output network"""
    if net.output_dim != 1:
        raise InputError("shift_output needs a scalar-output network")
    last = net.layers[-1]
    return NeuralNetwork(net.layers[:-1] + (AffineLayer(last.weights, last.bias - float(delta)),))


# ---------------------------------------------------------------------------
# Exact blocks
# ---------------------------------------------------------------------------

def max2() -> NeuralNetwork:
    """max(x, y) = relu(x - y) + relu(y) - relu(-y); size 7"""
    hidden = np.array([[1.0, -1.0], [0.0, 1.0], [0.0, -1.0]])
    output = np.array([[1.0, 1.0, -1.0]])
    return NeuralNetwork((AffineLayer(hidden, np.zeros(3)), AffineLayer(output, np.zeros(1))))


def max_k(k: int) -> NeuralNetwork:
    """
    Exact maximum of k inputs via a pairwise-max tree.

    Each stage pairs neighbours through max2 and carries an odd element with
    relu(c) - relu(-c); stage output maps are merged into the next stage's
    hidden map, so the depth is ceil(log2 k) + 1.
    """
    if k < 1:
        raise InputError(f"max_k needs k >= 1, got {k}")
    if k == 1:
        return affine_network(np.eye(1))

    layers = []
    readout = None
    width = k
    while width > 1:
        pairs, odd = divmod(width, 2)
        hidden = np.zeros((3 * pairs + 2 * odd, width))
        output = np.zeros((pairs + odd, 3 * pairs + 2 * odd))
        for p in range(pairs):
            a, b, row = 2 * p, 2 * p + 1, 3 * p
            hidden[row, a], hidden[row, b] = 1.0, -1.0
            hidden[row + 1, b] = 1.0
            hidden[row + 2, b] = -1.0
            output[p, row:row + 3] = (1.0, 1.0, -1.0)
        if odd:
            row, c = 3 * pairs, width - 1
            hidden[row, c], hidden[row + 1, c] = 1.0, -1.0
            output[pairs, row:row + 2] = (1.0, -1.0)
        merged = hidden if readout is None else hidden @ readout
        layers.append(AffineLayer(merged, np.zeros(merged.shape[0])))
        readout = output
        width = pairs + odd
    layers.append(AffineLayer(readout, np.zeros(1)))
    return NeuralNetwork(tuple(layers))


def min_k(k: int) -> NeuralNetwork:
    """Exact minimum of k inputs, min(z) = -max(-z)"""
    tree = max_k(k)
    if tree.depth == 1:
        return tree
    first, last = tree.layers[0], tree.layers[-1]
    return NeuralNetwork(
        (AffineLayer(-first.weights, first.bias),) + tree.layers[1:-1] + (AffineLayer(-last.weights, last.bias),)
    )


def clip_network(dim: int, M: float) -> NeuralNetwork:
    """Componentwise clip to [-M, M]: relu(z + M) - relu(z - M) - M"""
    if not M > 0:
        raise InputError(f"clip bound must be positive, got {M}")
    eye = sp.identity(dim, format="csr")
    hidden = AffineLayer(sp.vstack([eye, eye]), np.concatenate([np.full(dim, M), np.full(dim, -M)]))
    output = AffineLayer(sp.hstack([eye, -eye]), np.full(dim, -M))
    return NeuralNetwork((hidden, output))


# ---------------------------------------------------------------------------
# Lipschitz bounds
# ---------------------------------------------------------------------------

def _layer_norm_bound(weights: sp.csr_matrix) -> float:
    if weights.nnz == 0:
        return 0.0
    magnitudes = abs(weights)
    frobenius = float(np.sqrt(np.sum(weights.data ** 2)))
    col_sum = float(magnitudes.sum(axis=0).max())
    row_sum = float(magnitudes.sum(axis=1).max())
    return min(frobenius, float(np.sqrt(col_sum * row_sum)))


def lipschitz_upper_bound(net: NeuralNetwork) -> float:
    """
    Certified Euclidean Lipschitz bound, the product of per-layer operator-norm bounds.

    Each layer contributes min(||A||_F, sqrt(||A||_1 ||A||_inf)) >= ||A||_2; relu is 1-Lipschitz.
    spectral_norm_product gives the power-iteration estimate of the same product,
    which is tighter but not guaranteed from above.
    """
    bound = 1.0
    for layer in net.layers:
        bound *= _layer_norm_bound(layer.weights)
    return bound


def spectral_norm_product(net: NeuralNetwork, iterations: int = 100, tol: float = 1e-10, seed: int = 0) -> float:
    """
    Power-iteration estimate of prod_l ||A_l||_2 (approaches the true product from below).

    lipschitz_upper_bound is the certified counterpart; this value never exceeds it.
    """
    rng = np.random.default_rng(seed)
    product = 1.0
    for layer in net.layers:
        matrix = layer.weights
        if matrix.nnz == 0:
            return 0.0
        vector = rng.standard_normal(matrix.shape[1])
        vector /= np.linalg.norm(vector)
        estimate = 0.0
        for _ in range(iterations):
            image = matrix.T @ (matrix @ vector)
            norm = np.linalg.norm(image)
            if norm == 0.0:
                break
            vector = image / norm
            previous, estimate = estimate, float(np.sqrt(norm))
            if abs(estimate - previous) <= tol * max(estimate, 1.0):
                break
        product *= estimate
    return product


def empirical_lipschitz(net: NeuralNetwork, n: int = 2000, seed: int = 0, scale: float = 1.0,
                        split: Optional[int] = None) -> float:
    """
    Largest sampled difference quotient, a lower bound on the Lipschitz constant.

    Args:
        net: Network to sample
        n: Number of sampled pairs
        seed: Seed of the sampling stream
        scale: Standard deviation of the sampled base points
        split: When given, inputs [0, split) and [split, d) are two blocks and the
            denominator is ||dx_1|| + ||dx_2|| instead of the Euclidean norm

    Returns:
        Maximum of ||net(x) - net(x')|| / distance over the sampled pairs
    """
    rng = np.random.default_rng(seed)
    base = scale * rng.standard_normal((n, net.input_dim))
    radii = scale * 10.0 ** rng.uniform(-4.0, 0.0, size=(n, 1))
    direction = rng.standard_normal((n, net.input_dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    other = base + radii * direction
    delta = other - base
    if split is None:
        distance = np.linalg.norm(delta, axis=1)
    else:
        distance = np.linalg.norm(delta[:, :split], axis=1) + np.linalg.norm(delta[:, split:], axis=1)
    change = np.linalg.norm(net(other) - net(base), axis=1)
    valid = distance > 0
    return float(np.max(change[valid] / distance[valid])) if np.any(valid) else 0.0


# ---------------------------------------------------------------------------
# Portable container
# ---------------------------------------------------------------------------

def network_to_bytes(net: NeuralNetwork, certificate: Optional[SizeCertificate] = None) -> bytes:
    """
    Serialize a network.

    Layout (little endian): 8-byte magic, uint32 version, uint32 flags, uint64 L,
    uint64 dims N_0..N_L, then per layer uint64 nnz, int64 rows[nnz],
    int64 cols[nnz] (row-major order), float64 values[nnz], float64 bias[N_l];
    when flagged, uint64 length and a UTF-8 JSON metadata record.
    """
    flags = _FLAG_METADATA if certificate is not None else 0
    dims = [net.input_dim] + [layer.out_dim for layer in net.layers]
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, flags), struct.pack("<Q", net.depth),
              np.asarray(dims, dtype="<u8").tobytes()]
    for layer in net.layers:
        coo = layer.weights.tocoo()
        chunks.append(struct.pack("<Q", coo.nnz))
        chunks.append(coo.row.astype("<i8").tobytes())
        chunks.append(coo.col.astype("<i8").tobytes())
        chunks.append(coo.data.astype("<f8").tobytes())
        chunks.append(layer.bias.astype("<f8").tobytes())
    if certificate is not None:
        record = json.dumps(certificate.to_dict(), sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<Q", len(record)))
        chunks.append(record)
    return b"".join(chunks)


def network_from_bytes(payload: bytes) -> Tuple[NeuralNetwork, Optional[SizeCertificate]]:
    """Inverse of network_to_bytes; bit-exact. Truncated or corrupt payloads raise InputError."""
    try:
        return _parse_network(payload)
    except InputError:
        raise
    except (ValueError, struct.error) as e:
        raise InputError(f"corrupt or truncated network payload ({len(payload)} bytes): {e}") from e


def _parse_network(payload: bytes) -> Tuple[NeuralNetwork, Optional[SizeCertificate]]:
    if payload[:8] != MAGIC:
        raise InputError("not a serialized ReLU network (bad magic)")
    version, flags = struct.unpack_from("<II", payload, 8)
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported network format version {version}")
    offset = 16
    (depth,) = struct.unpack_from("<Q", payload, offset)
    offset += 8
    dims = np.frombuffer(payload, dtype="<u8", count=depth + 1, offset=offset).astype(np.int64)
    offset += 8 * (depth + 1)

    layers = []
    for index in range(depth):
        (nnz,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        rows = np.frombuffer(payload, dtype="<i8", count=nnz, offset=offset)
        offset += 8 * nnz
        cols = np.frombuffer(payload, dtype="<i8", count=nnz, offset=offset)
        offset += 8 * nnz
        data = np.frombuffer(payload, dtype="<f8", count=nnz, offset=offset)
        offset += 8 * nnz
        out_dim, in_dim = int(dims[index + 1]), int(dims[index])
        bias = np.frombuffer(payload, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        weights = sp.csr_matrix((data.copy(), (rows.copy(), cols.copy())), shape=(out_dim, in_dim))
        layers.append(AffineLayer(weights, bias.copy()))

    certificate = None
    if flags & _FLAG_METADATA:
        (length,) = struct.unpack_from("<Q", payload, offset)
        offset += 8
        certificate = SizeCertificate.from_dict(json.loads(payload[offset:offset + length].decode("utf-8")))
    return NeuralNetwork(tuple(layers)), certificate


def save_network(net: NeuralNetwork, path: Union[str, Path], certificate: Optional[SizeCertificate] = None) -> None:
    Path(path).write_bytes(network_to_bytes(net, certificate))


def load_network(path: Union[str, Path]) -> Tuple[NeuralNetwork, Optional[SizeCertificate]]:
    return network_from_bytes(Path(path).read_bytes())
