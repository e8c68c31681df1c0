"""
Verification Suite
==================

Empirical checks of the quantitative properties the constructions rely on:
size scaling in the dimension and the accuracy, growth envelopes of payoffs,
updates and value functions, noise moments against closed forms, conditional
moment bounds, the average Lipschitz property and certificate re-derivation.

Failed checks are results (passed=False), never exceptions.
"""

import logging
import math
import time
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import special

from approx_blocks import fit_size_slope, product_certificate
from errors import DomainError, InputError
from markov_models import (
    STREAM_MOMENTS,
    STREAM_VALIDATION,
    AffineCoefficient,
    MarkovModel,
    black_scholes_model,
    discrete_diffusion_model,
    draw_noise,
    finite_noise_model,
    merton_model,
    model_exponential_moment,
    noise_stream,
)
from payoff_library import Payoff, max_call_network
from relu_calculus import (
    NeuralNetwork,
    SizeCertificate,
    empirical_lipschitz,
    lipschitz_upper_bound,
    max2,
    min_k,
)
from stopping_engine import (
    ValueStack,
    build_value_stack,
    exact_dp_policy_value,
    exact_dp_value,
    exact_dp_values,
)

logger = logging.getLogger(__name__)

CHECK_GROUPS = ("exact_blocks", "product", "growth", "moments", "lipschitz", "snell")

# Polynomial-degree ceiling for the fitted log(size)-log(d) slope
MAX_DIMENSION_SLOPE = 4.0


@dataclass(frozen=True)
class ScalingRecord:
    d: int
    eps_bar: float
    size_total: int
    size_by_t: List[int]
    wall_ms: float
    slope_partial: Optional[float] = None


@dataclass(frozen=True)
class ScalingStudy:
    records: List[ScalingRecord]
    slope: float
    intercept: float
    residuals: List[float]
    variable: str

    @property
    def polynomial(self) -> bool:
        return self.variable != "log_d" or self.slope <= MAX_DIMENSION_SLOPE

    def to_dict(self, record_timing: bool = False) -> dict:
        rows = []
        for record in self.records:
            row = asdict(record)
            if not record_timing:
                row.pop("wall_ms")
            rows.append(row)
        return {"variable": self.variable, "slope": self.slope, "intercept": self.intercept,
                "residuals": self.residuals, "polynomial": self.polynomial, "records": rows}


@dataclass(frozen=True)
class CheckResult:
    name: str
    group: str
    passed: bool
    worst_ratio: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Scaling studies
# ---------------------------------------------------------------------------

def _build_record(model: MarkovModel, payoff: Payoff, eps_bar: float, N: int, delta: Optional[float], seed: int,
                  n_val: int, inner: int, threads: int) -> ScalingRecord:
    started = time.perf_counter()
    stack = build_value_stack(model, payoff, eps_bar, N=N, delta=delta, n_val=n_val, max_retries=0, seed=seed,
                              inner=inner, threads=threads)
    wall_ms = (time.perf_counter() - started) * 1000.0
    return ScalingRecord(d=model.d, eps_bar=eps_bar, size_total=stack.total_size, size_by_t=stack.size_by_t,
                         wall_ms=wall_ms)


def _with_partial_slopes(records: List[ScalingRecord], xs: Sequence[float]) -> List[ScalingRecord]:
    out = []
    for index, record in enumerate(records):
        slope = None
        if index > 0:
            slope = float((math.log(record.size_total) - math.log(records[index - 1].size_total))
                          / (xs[index] - xs[index - 1]))
        out.append(ScalingRecord(record.d, record.eps_bar, record.size_total, record.size_by_t, record.wall_ms, slope))
    return out


def scaling_study(model_factory: Callable[[int], MarkovModel], payoff_factory: Callable[[int], Payoff],
                  d_list: Sequence[int], eps_bar: float, N: int, delta: Optional[float] = None, seed: int = 0,
                  n_val: int = 100, inner: int = 16, threads: int = 1) -> ScalingStudy:
    """
    Build one stack per dimension and fit log(size) against log(d).

    Args:
        model_factory: d -> model
        payoff_factory: d -> payoff
        d_list: Ascending dimensions, at least three
        eps_bar: Base accuracy shared by every build
        N: Noise draws per step
        delta: Exercise margin
        seed: Root seed
        n_val: Validation points per build
        inner: Inner batch of the validation reference
        threads: Worker threads

    Returns:
        ScalingStudy with the fitted slope and per-d records
    """
    d_list = [int(d) for d in d_list]
    if len(d_list) < 3 or any(b <= a for a, b in zip(d_list, d_list[1:])):
        raise InputError(f"scaling study needs at least three ascending dimensions, got {d_list}")
    records = []
    for d in d_list:
        record = _build_record(model_factory(d), payoff_factory(d), eps_bar, N, delta, seed, n_val, inner, threads)
        logger.info(f"Scaling study d={d}: total size {record.size_total} ({record.wall_ms:.0f} ms)")
        records.append(record)
    xs = [math.log(d) for d in d_list]
    slope, intercept, _, residuals = fit_size_slope(xs, [math.log(r.size_total) for r in records])
    logger.info(f"Fitted log(size)-log(d) slope {slope:.3f}")
    return ScalingStudy(_with_partial_slopes(records, xs), slope, intercept, [float(r) for r in residuals], "log_d")


def eps_scaling_study(model: MarkovModel, payoff: Payoff, eps_list: Sequence[float], N: Optional[int] = None,
                      delta: Optional[float] = None, seed: int = 0, n_val: int = 100, inner: int = 16,
                      threads: int = 1) -> ScalingStudy:
    """Build one stack per accuracy at fixed d and fit log(size) against log(1/eps_bar)"""
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InputError(f"accuracy study needs at least three decreasing accuracies, got {eps_list}")
    records = []
    for eps in eps_list:
        record = _build_record(model, payoff, eps, N if N is not None else int(math.ceil(eps ** -2)), delta, seed,
                               n_val, inner, threads)
        logger.info(f"Accuracy study eps_bar={eps}: total size {record.size_total}")
        records.append(record)
    xs = [math.log(1.0 / e) for e in eps_list]
    slope, intercept, _, residuals = fit_size_slope(xs, [math.log(r.size_total) for r in records])
    return ScalingStudy(_with_partial_slopes(records, xs), slope, intercept, [float(r) for r in residuals],
                        "log_inverse_eps")


def format_scaling_table(records: Sequence[ScalingRecord], record_timing: bool = True) -> str:
    """Fixed columns: d, eps_bar, size_total, slope_partial, wall_ms"""
    lines = [f"{'d':>6} {'eps_bar':>10} {'size_total':>12} {'slope_partial':>14} {'wall_ms':>10}"]
    for record in records:
        slope = "-" if record.slope_partial is None else f"{record.slope_partial:.4f}"
        wall = f"{record.wall_ms:.1f}" if record_timing else "-"
        lines.append(f"{record.d:>6d} {record.eps_bar:>10.4g} {record.size_total:>12d} {slope:>14} {wall:>10}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Growth envelopes
# ---------------------------------------------------------------------------

def growth_bound_check(values, points, c: float, q: float, name: str = "growth") -> CheckResult:
    """Check |v_j| <= c d^q (1 + ||x_j||) at every sampled point"""
    values = np.abs(np.asarray(values, dtype=np.float64).reshape(-1))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    envelope = c * points.shape[1] ** q * (1.0 + np.linalg.norm(points, axis=1))
    ratio = float(np.max(values / envelope)) if values.size else 0.0
    return CheckResult(name=name, group="growth", passed=ratio <= 1.0, worst_ratio=ratio,
                       detail=f"c={c}, q={q}, {values.size} points")


def payoff_growth_check(payoff: Payoff, X, t: Optional[int] = None) -> CheckResult:
    c, q = payoff.growth_constants()
    times = range(payoff.T + 1) if t is None else [t]
    results = [growth_bound_check(payoff.value(s, X), X, c, q, name=f"payoff_growth[{payoff.kind}]") for s in times]
    return max(results, key=lambda r: r.worst_ratio)


def update_growth_check(model: MarkovModel, X, Y, t: int = 0) -> CheckResult:
    """||f_t(x, y)|| against the model's declared envelope"""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    norms = np.linalg.norm(model.update(t, X, Y), axis=1)
    envelope = model.envelope(t, X, Y)
    scale = np.where(envelope > 0, envelope, 1.0)
    ratio = float(np.max(np.where(envelope > 0, norms / scale, np.where(norms > 0, np.inf, 0.0))))
    return CheckResult(name=f"update_growth[{model.family}]", group="growth", passed=ratio <= 1.0 + 1e-12,
                       worst_ratio=ratio, detail=f"{X.shape[0]} points")


def conditional_growth_factor(model: MarkovModel, t: int, s: int) -> float:
    """prod_{k=t}^{s-1} a_k with E[1 + ||X_s|| | X_t = x] <= factor (1 + ||x||)"""
    if model.step_moment is None:
        raise InputError(f"{model.family} model declares no step moment factor")
    return float(np.prod([model.step_moment(k) for k in range(t, s)])) if s > t else 1.0


def value_growth_constant(model: MarkovModel, payoff: Payoff, t: int) -> float:
    """c_hat with |V(t, x)| <= c_hat d^q (1 + ||x||), from the payoff growth and the step factors"""
    c, _ = payoff.growth_constants()
    return c * sum(conditional_growth_factor(model, t, s) for s in range(t, model.T + 1))


def value_growth_check(model: MarkovModel, payoff: Payoff, X, t: int = 0) -> CheckResult:
    _, q = payoff.growth_constants()
    values = exact_dp_values(model, payoff, t, X)
    result = growth_bound_check(values, X, value_growth_constant(model, payoff, t), q, name="value_growth")
    return result


def conditional_moment_check(model: MarkovModel, t: int, s: int, X, n_inner: int = 2000, seed: int = 0) -> CheckResult:
    """Monte Carlo E[||X_s|| | X_t = x] against conditional_growth_factor(t, s) * (1 + ||x||)"""
    if not 0 <= t < s <= model.T:
        raise InputError(f"need 0 <= t < s <= T, got t={t}, s={s}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    states = np.repeat(X, n_inner, axis=0)
    for k in range(t, s):
        noise = draw_noise(model, seed, (STREAM_MOMENTS, 1, k), k, states.shape[0])
        states = model.update(k, states, noise)
    means = np.linalg.norm(states, axis=1).reshape(X.shape[0], n_inner).mean(axis=1)
    bound = conditional_growth_factor(model, t, s) * (1.0 + np.linalg.norm(X, axis=1))
    ratio = float(np.max(means / bound))
    return CheckResult(name=f"conditional_moment[{model.family}]", group="growth", passed=ratio <= 1.0,
                       worst_ratio=ratio, detail=f"t={t}, s={s}, {n_inner} inner paths per point")


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentCheck:
    passed: bool
    estimate: np.ndarray
    expected: np.ndarray
    standard_error: np.ndarray
    envelope_ok: bool = True


def gaussian_norm_moment(d: int, variance: float, p_bar: float) -> float:
    """E||Z||^p for Z ~ Normal(0, variance I_d), via ||Z||^2 / variance ~ chi-square(d)"""
    if p_bar <= -d:
        raise DomainError(f"moment of order {p_bar} diverges in dimension {d}")
    log_value = 0.5 * p_bar * math.log(2.0 * variance) + special.gammaln(0.5 * (d + p_bar)) - special.gammaln(0.5 * d)
    return math.exp(log_value)


def moment_check(model: MarkovModel, p_bar: float, n_samples: int = 1_000_000, seed: int = 0, t: int = 0,
                 envelope: Optional[tuple] = None) -> MomentCheck:
    """
    Monte Carlo noise moments against their closed forms, within 3 standard errors.

    Exponential Levy and finite multiplicative models are checked per coordinate
    on E[Y_i^p]; diffusion models on E||Y||^p. With `envelope` = (c, q) the
    estimate must also stay below c d^q.
    """
    if p_bar == 0:
        one = np.ones(1)
        return MomentCheck(True, one, one, np.zeros(1))
    noise = draw_noise(model, seed, (STREAM_MOMENTS, 2), t, n_samples)
    if model.family == "diffusion":
        samples = np.linalg.norm(noise, axis=1)[:, None] ** p_bar
        expected = np.array([gaussian_norm_moment(model.d, model.dt(t), p_bar)])
    else:
        expected = model_exponential_moment(model, p_bar)
        samples = noise ** p_bar
    estimate = samples.mean(axis=0)
    error = samples.std(axis=0, ddof=1) / math.sqrt(n_samples)
    passed = bool(np.all(np.abs(estimate - expected) <= 3.0 * error + 1e-12 * np.abs(expected)))
    envelope_ok = True
    if envelope is not None:
        c, q = envelope
        envelope_ok = bool(np.all(estimate <= c * model.d ** q))
    return MomentCheck(passed and envelope_ok, estimate, expected, error, envelope_ok)


# ---------------------------------------------------------------------------
# Lipschitz estimates and certificates
# ---------------------------------------------------------------------------

def average_lipschitz_estimate(t: int, h, n: int = 1000, seed: int = 0, stack: Optional[ValueStack] = None,
                               model: Optional[MarkovModel] = None, payoff: Optional[Payoff] = None) -> float:
    """
    ((1/n) sum_j |V(t, x_j) - V(t, x_j + h)|^2)^(1/2) / ||h|| with x_j standard Gaussian.

    Uses the exact oracle when a finite-noise model and payoff are given, else the stack's v_t.
    """
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(h))
    if norm == 0:
        raise InputError("shift h must be nonzero")
    points = noise_stream(seed, STREAM_VALIDATION, t, 3).standard_normal((n, h.shape[0]))
    if model is not None and payoff is not None and model.support.finite:
        def value(X):
            return exact_dp_values(model, payoff, t, X)
    elif stack is not None:
        def value(X):
            return stack.value(t, X)
    else:
        raise InputError("average Lipschitz estimate needs a finite-noise oracle or a value stack")
    gaps = value(points) - value(points + h)
    return float(np.sqrt(np.mean(gaps ** 2)) / norm)


def certificate_recheck(net: NeuralNetwork, certificate: SizeCertificate, n: int = 2000, seed: int = 0) -> dict:
    """Re-derive size and Lipschitz data from the artifact alone"""
    recount = net.size
    upper = lipschitz_upper_bound(net)
    sampled = empirical_lipschitz(net, n=n, seed=seed)
    declared = certificate.declared_lipschitz_upper
    lipschitz_ok = declared is None or sampled <= declared * (1.0 + 1e-9)
    return {
        "declared_size": certificate.declared_size,
        "recounted_size": recount,
        "size_ok": recount == certificate.declared_size,
        "declared_lipschitz_upper": declared,
        "lipschitz_upper_bound": upper,
        "sampled_lipschitz": sampled,
        "lipschitz_ok": bool(lipschitz_ok and sampled <= upper * (1.0 + 1e-9)),
        "provenance": certificate.provenance,
    }


# ---------------------------------------------------------------------------
# Check groups of the verify command
# ---------------------------------------------------------------------------

def _two_atom_instance(d: int, T: int, rng: np.random.Generator):
    up = 1.0 + rng.uniform(0.1, 0.6, size=d)
    down = 1.0 / (1.0 + rng.uniform(0.1, 0.6, size=d))
    p = rng.uniform(0.3, 0.7)
    model = finite_noise_model(d, T, [up, down], [p, 1.0 - p], x0=np.ones(d))
    payoff = Payoff(kind="basket_put", d=d, T=T, K=float(rng.uniform(0.8, 1.2)), r=float(rng.uniform(0.0, 0.05)))
    return model, payoff


def _exact_block_checks(seed: int) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    pairs = rng.normal(scale=10.0, size=(100_000, 2))
    gap = float(np.max(np.abs(max2()(pairs)[:, 0] - pairs.max(axis=1))))
    results.append(CheckResult("max2_exact", "exact_blocks", gap <= 1e-12 and max2().size == 7, gap,
                               f"size {max2().size}"))
    for k in (2, 3, 8, 17, 64):
        points = rng.normal(size=(2000, k))
        net = min_k(k)
        gap = float(np.max(np.abs(net(points)[:, 0] - points.min(axis=1))))
        results.append(CheckResult(f"min_k[{k}]", "exact_blocks", gap <= 1e-12 and net.size <= 12 * k ** 3,
                                   net.size / (12 * k ** 3), f"size {net.size}, max gap {gap:.2e}"))
    for d in (2, 8, 32, 64):
        X = np.exp(rng.normal(scale=0.3, size=(10_000, d)))
        net = max_call_network(d, 1.0, 0.0, 0)
        direct = np.maximum(X.max(axis=1) - 1.0, 0.0)
        rel = float(np.max(np.abs(net(X)[:, 0] - direct) / (1.0 + direct)))
        results.append(CheckResult(f"max_call[{d}]", "exact_blocks", rel <= 1e-12 and net.size <= 6 * d ** 3,
                                   net.size / (6 * d ** 3), f"size {net.size}, max rel gap {rel:.2e}"))
    return results


def _product_checks(seed: int) -> List[CheckResult]:
    results = []
    for eps in (1e-1, 1e-2, 1e-3):
        for M in (1.0, 10.0):
            cert = product_certificate(eps, M, grid_points=201, n_pairs=20_000, seed=seed)
            ok = cert.measured_sup_error < eps and cert.sampled_lipschitz <= cert.lipschitz_bound
            results.append(CheckResult(f"product[eps={eps},M={M}]", "product", ok, cert.measured_sup_error / eps,
                                       f"size {cert.size}, sampled Lipschitz {cert.sampled_lipschitz:.4f}"))
    return results


def _growth_checks(seed: int) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    X = np.exp(rng.normal(scale=1.0, size=(100_000, 3)))
    for kind in ("max_call", "basket_call", "basket_put", "put_on_min", "put_on_max", "call_on_min"):
        results.append(payoff_growth_check(Payoff(kind=kind, d=3, T=2, K=1.5, r=0.0), X))
    bs = black_scholes_model(3, 2, mu=0.03, sigma=0.2)
    Y = bs.sample_noise(noise_stream(seed, STREAM_MOMENTS, 9), 0, 10_000)
    results.append(update_growth_check(bs, X[:10_000], Y))
    results.append(conditional_moment_check(bs, 0, 2, X[:20], n_inner=2000, seed=seed))
    model, payoff = _two_atom_instance(2, 3, rng)
    results.append(value_growth_check(model, payoff, rng.normal(size=(200, 2)) + 1.0))
    return results


def _moment_checks(seed: int, n_samples: int) -> List[CheckResult]:
    results = []
    for name, model, p_bar in (
        ("lognormal", black_scholes_model(2, 1, mu=0.05, sigma=0.25), 2.0),
        ("merton", merton_model(1, 1, mu=0.05, sigma=0.2), 1.0),
    ):
        check = moment_check(model, p_bar, n_samples=n_samples, seed=seed)
        gap = float(np.max(np.abs(check.estimate - check.expected) / np.maximum(check.standard_error, 1e-300)))
        results.append(CheckResult(f"moment[{name},p={p_bar}]", "moments", check.passed, gap / 3.0,
                                   f"estimate {check.estimate.tolist()}, closed form {check.expected.tolist()}"))
    diffusion = discrete_diffusion_model(3, 1, [0.0, 0.5], AffineCoefficient.diagonal(3, 0.0, 0.0, matrix=False),
                                         AffineCoefficient.diagonal(3, 1.0, 0.0, matrix=True))
    check = moment_check(diffusion, 2.0, n_samples=n_samples, seed=seed)
    gap = float(np.max(np.abs(check.estimate - check.expected) / np.maximum(check.standard_error, 1e-300)))
    results.append(CheckResult("moment[chi,p=2]", "moments", check.passed, gap / 3.0,
                               f"estimate {check.estimate.tolist()}, closed form {check.expected.tolist()}"))
    return results


def _lipschitz_checks(seed: int) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    model, payoff = _two_atom_instance(1, 2, rng)
    stack = build_value_stack(model, payoff, 0.1, N=2000, delta=0.0, n_val=100, inner=32, seed=seed,
                              exact_update=True)
    results = []
    for t in range(stack.T + 1):
        bound = lipschitz_upper_bound(stack.values[t])
        estimate = average_lipschitz_estimate(t, [1e-2], n=1000, seed=seed, stack=stack)
        results.append(CheckResult(f"average_lipschitz[t={t}]", "lipschitz", estimate <= bound * (1 + 1e-9),
                                   estimate / bound if bound > 0 else 0.0, f"estimate {estimate:.4f}, bound {bound:.4f}"))
    return results


def _snell_checks(seed: int, instances: int = 20) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for index in range(instances):
        model, payoff = _two_atom_instance(int(rng.integers(1, 4)), int(rng.integers(2, 5)), rng)
        value = exact_dp_value(model, payoff, 0, model.x0)
        policy = exact_dp_policy_value(model, payoff)
        gap = abs(value - policy)
        results.append(CheckResult(f"snell[{index}]", "snell", gap <= 1e-10, gap / 1e-10,
                                   f"d={model.d}, T={model.T}, V={value:.6f}"))
    return results


def run_checks(groups: Optional[Sequence[str]] = None, seed: int = 0, n_samples: int = 1_000_000) -> List[CheckResult]:
    """
    Run the selected check groups.

    Args:
        groups: Subset of CHECK_GROUPS, all groups when None
        seed: Root seed of every check
        n_samples: Draws for the moment checks

    Returns:
        One CheckResult per individual check
    """
    groups = list(CHECK_GROUPS) if groups is None else list(groups)
    unknown = [g for g in groups if g not in CHECK_GROUPS]
    if unknown:
        raise InputError(f"unknown check groups {unknown}; expected a subset of {CHECK_GROUPS}")
    runners: Dict[str, Callable[[], List[CheckResult]]] = {
        "exact_blocks": lambda: _exact_block_checks(seed),
        "product": lambda: _product_checks(seed),
        "growth": lambda: _growth_checks(seed),
        "moments": lambda: _moment_checks(seed, n_samples),
        "lipschitz": lambda: _lipschitz_checks(seed),
        "snell": lambda: _snell_checks(seed),
    }
    results: List[CheckResult] = []
    for group in groups:
        group_results = runners[group]()
        failed = [r.name for r in group_results if not r.passed]
        if failed:
            logger.warning(f"Check group {group}: {len(failed)} failed ({', '.join(failed)})")
        else:
            logger.info(f"Check group {group}: {len(group_results)} passed")
        results.extend(group_results)
    return results
