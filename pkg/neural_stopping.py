#!/usr/bin/env python3
"""
Neural Stopping Command Line
============================

Batch front door of the toolkit. Reads a YAML experiment config, applies
`--set` overrides, validates everything up front and dispatches one of the
commands

    price          build a value stack, roll its policy out, write report.yml
    oracle         exact dynamic programming or a binomial lattice, write report.yml
    stack          build | inspect | eval a persisted value stack
    verify         run check groups, write verify.yml
    scaling-study  size against dimension (and accuracy), write scaling.txt/.yml
    product-cert   certify one product network, write certificate.yml

Exit status: 0 on success, 1 on a failed acceptance check, 2 on bad input.
"""

import argparse
import copy
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from approx_blocks import product_certificate, product_network, product_network_certificate
from errors import ConfigError, InputError, StoppingError
from markov_models import (
    AffineCoefficient,
    MarkovModel,
    augment_running_extreme,
    black_scholes_model,
    discrete_diffusion_model,
    finite_noise_model,
    lattice_surrogate,
    load_atoms,
    merton_model,
)
from payoff_library import Payoff, build_payoff
from relu_calculus import save_network
from stopping_engine import (
    GaussianMeasure,
    binomial_american,
    build_value_stack,
    exact_dp_value,
    load_stack,
    price,
    save_stack,
)
from verification_suite import CHECK_GROUPS, eps_scaling_study, format_scaling_table, run_checks, scaling_study

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2

THREADS_ENV = "NEURAL_STOPPING_THREADS"

FAMILIES = ("black_scholes", "merton", "diffusion", "finite")

DEFAULTS = {
    "logging": {"level": "INFO", "file": None},
    "model": {
        "family": "black_scholes", "d": 1, "T": 10, "x0": 1.0, "dt": 0.1, "mu": 0.05, "sigma": 0.2,
        "correlation": 0.0, "jump_intensity": 0.1, "jump_mean": -0.1, "jump_std": 0.15, "beta": None,
        "atoms": None, "probabilities": None, "atoms_file": None, "update": "multiplicative", "grid": None,
        "mu_const": 0.0, "mu_linear": 0.0, "sigma_const": 1.0, "sigma_linear": 0.0, "extreme": None,
        "surrogate": None,
    },
    "payoff": {"kind": "basket_put", "K": 1.0, "r": 0.0, "weights": None},
    "build": {
        "eps_bar": 0.1, "N": None, "delta": None, "seed": 0, "exact_update": False, "n_val": 256,
        "max_retries": 3, "rho_center": None, "rho_scale": None, "inner": 256, "l2_points": 0,
    },
    "run": {
        "n_paths": 10_000, "d_list": None, "eps_list": None, "checks": None, "points": None, "rel_tol": None,
        "eps": 0.01, "M": 1.0, "record_timing": False, "stack_dir": None, "oracle_steps": 5000,
        "n_samples": 1_000_000,
    },
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, overlay: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(name, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(name, "expected a mapping")
            merged[key] = _merge(base[key], value, prefix=f"{name}.")
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[str]) -> dict:
    """Read a YAML config; parse errors carry their line number"""
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError("--config", f"no such file {path}") from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "--config"
        raise ConfigError(where, f"cannot parse {path}: {getattr(e, 'problem', e)}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level must be a mapping")
    return data


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply dotted `block.key=value` assignments; values are parsed as YAML scalars or lists"""
    config = copy.deepcopy(config)
    for assignment in overrides:
        key, sep, raw = assignment.partition("=")
        if not sep or "." not in key:
            raise ConfigError(assignment, "overrides look like block.key=value")
        block, name = key.split(".", 1)
        if block not in config or not isinstance(config[block], dict) or name not in config[block]:
            raise ConfigError(key, "unknown key")
        try:
            config[block][name] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(key, f"cannot parse value {raw!r}") from e
    return config


def _number(block: dict, section: str, key: str, low: float = -math.inf, high: float = math.inf,
            low_open: bool = False, high_open: bool = False, integer: bool = False):
    value = block[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key}", f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{section}.{key}", f"expected an integer, got {value!r}")
    below = value <= low if low_open else value < low
    above = value >= high if high_open else value > high
    if below or above or not math.isfinite(value):
        raise ConfigError(f"{section}.{key}", f"value {value!r} out of range")
    return int(value) if integer else float(value)


@dataclass
class ExperimentConfig:
    """Resolved configuration: defaults, then the YAML file, then overrides"""

    logging: dict
    model: dict
    payoff: dict
    build: dict
    run: dict

    @classmethod
    def from_sources(cls, path: Optional[str] = None, overrides: Sequence[str] = (),
                     seed: Optional[int] = None) -> "ExperimentConfig":
        data = _merge(DEFAULTS, load_config_file(path))
        data = apply_overrides(data, overrides)
        if seed is not None:
            data["build"]["seed"] = seed
        return cls(**data)

    def to_dict(self) -> dict:
        return {"logging": self.logging, "model": self.model, "payoff": self.payoff, "build": self.build,
                "run": self.run}

    def validate(self, command: str) -> None:
        """Check families and numeric ranges before any work starts"""
        model, build, run = self.model, self.build, self.run
        if model["family"] not in FAMILIES:
            raise ConfigError("model.family", f"expected one of {FAMILIES}, got {model['family']!r}")
        _number(model, "model", "d", low=1, integer=True)
        _number(model, "model", "T", low=1, integer=True)
        _number(model, "model", "dt", low=0, low_open=True)
        if model["extreme"] not in (None, "min", "max"):
            raise ConfigError("model.extreme", "expected min, max or null")
        if model["surrogate"] is not None:
            if model["family"] != "black_scholes":
                raise ConfigError("model.surrogate", "lattice surrogates exist for black_scholes models only")
            _number(model, "model", "surrogate", low=1, integer=True)
        if model["family"] == "finite" and model["atoms"] is None and model["atoms_file"] is None:
            raise ConfigError("model.atoms", "finite models need atoms or atoms_file")
        if self.payoff["kind"] is None:
            raise ConfigError("payoff.kind", "missing")
        _number(build, "build", "eps_bar", low=0, high=1, low_open=True, high_open=True)
        if build["N"] is not None:
            _number(build, "build", "N", low=1, integer=True)
        if build["delta"] is not None:
            _number(build, "build", "delta", low=0)
        _number(build, "build", "seed", low=0, integer=True)
        _number(build, "build", "n_val", low=100, integer=True)
        _number(build, "build", "max_retries", low=0, integer=True)
        _number(build, "build", "inner", low=1, integer=True)
        _number(build, "build", "l2_points", low=0, integer=True)
        if build["rho_scale"] is not None:
            _number(build, "build", "rho_scale", low=0, low_open=True)
        _number(run, "run", "n_paths", low=100, integer=True)
        _number(run, "run", "oracle_steps", low=1, integer=True)
        if run["rel_tol"] is not None:
            _number(run, "run", "rel_tol", low=0, low_open=True)
        if command == "scaling-study":
            d_list = run["d_list"]
            if not isinstance(d_list, list) or len(d_list) < 3:
                raise ConfigError("run.d_list", "scaling studies need a list of at least three dimensions")
        if command == "product-cert":
            _number(run, "run", "eps", low=0, high=1, low_open=True)
            _number(run, "run", "M", low=1)
        if command == "verify" and run["checks"] is not None:
            unknown = [g for g in run["checks"] if g not in CHECK_GROUPS]
            if unknown:
                raise ConfigError("run.checks", f"unknown groups {unknown}; expected a subset of {CHECK_GROUPS}")


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        threads = flag
    else:
        raw = os.environ.get(THREADS_ENV)
        try:
            threads = int(raw) if raw else 1
        except ValueError as e:
            raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError("--threads", f"must be positive, got {threads}")
    return threads


def setup_logging(block: dict) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if block.get("file"):
        handlers.append(logging.FileHandler(block["file"]))
    logging.basicConfig(
        level=getattr(logging, str(block.get("level", "INFO")).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


# ---------------------------------------------------------------------------
# Model and payoff factories
# ---------------------------------------------------------------------------

def _x0(model: dict, d: int) -> np.ndarray:
    x0 = np.asarray(model["x0"], dtype=np.float64).reshape(-1)
    if x0.size == 1:
        return np.full(d, float(x0[0]))
    if x0.size != d:
        raise ConfigError("model.x0", f"expected a scalar or {d} values, got {x0.size}")
    return x0


def build_models(block: dict, d: Optional[int] = None) -> Tuple[MarkovModel, Optional[MarkovModel]]:
    """
    Build the model of a `model:` block and, when `surrogate` is set, its lattice surrogate.

    Args:
        block: Model block of the resolved config
        d: Dimension override used by scaling studies

    Returns:
        (model, surrogate or None); with `extreme` set both are augmented by the running extreme
    """
    family = block["family"]
    d = int(block["d"] if d is None else d)
    T = int(block["T"])
    dt = float(block["dt"])
    try:
        x0 = _x0(block, d)
        if family == "black_scholes":
            model = black_scholes_model(d, T, mu=block["mu"], sigma=block["sigma"], dt=dt,
                                        correlation=block["correlation"], beta=block["beta"], x0=x0)
        elif family == "merton":
            model = merton_model(d, T, mu=block["mu"], sigma=block["sigma"], jump_intensity=block["jump_intensity"],
                                 jump_mean=block["jump_mean"], jump_std=block["jump_std"], dt=dt,
                                 correlation=block["correlation"], beta=block["beta"], x0=x0)
        elif family == "diffusion":
            grid = block["grid"] if block["grid"] is not None else list(dt * np.arange(T + 1))
            mu = AffineCoefficient.diagonal(d, block["mu_const"], block["mu_linear"], matrix=False)
            sigma = AffineCoefficient.diagonal(d, block["sigma_const"], block["sigma_linear"], matrix=True)
            model = discrete_diffusion_model(d, T, grid, mu, sigma, x0=x0, beta=block["beta"])
        else:
            if block["atoms_file"] is not None:
                atoms, probabilities = load_atoms(block["atoms_file"])
            else:
                atoms, probabilities = block["atoms"], block["probabilities"]
            model = finite_noise_model(d, T, atoms, probabilities, update=block["update"], x0=x0, dt=dt,
                                       beta=block["beta"])
        surrogate = lattice_surrogate(model, int(block["surrogate"])) if block["surrogate"] is not None else None
        if block["extreme"] is not None:
            model = augment_running_extreme(model, block["extreme"])
            surrogate = augment_running_extreme(surrogate, block["extreme"]) if surrogate is not None else None
    except ConfigError:
        raise
    except InputError as e:
        raise ConfigError("model", str(e)) from e
    return model, surrogate


def make_payoff(config: ExperimentConfig, model: MarkovModel) -> Payoff:
    return build_payoff(config.payoff, model.d, model.T, step=float(config.model["dt"]))


def _measure(config: ExperimentConfig, model: MarkovModel) -> Optional[GaussianMeasure]:
    build = config.build
    if build["rho_center"] is None and build["rho_scale"] is None:
        return None
    center = model.x0 if build["rho_center"] is None else np.broadcast_to(
        np.asarray(build["rho_center"], dtype=np.float64), (model.d,)).copy()
    scale = 0.1 * max(1.0, float(np.abs(model.x0).max())) if build["rho_scale"] is None else build["rho_scale"]
    return GaussianMeasure(center=center, scale=float(scale))


def binomial_reference(config: ExperimentConfig, model: MarkovModel, payoff: Payoff) -> Optional[float]:
    """Lattice value of a one-asset Black-Scholes put or call whose drift equals the discount rate"""
    if model.family != "exp_levy" or model.params["kind"] != "black_scholes" or model.d != 1:
        return None
    if payoff.kind == "custom" or not math.isclose(float(model.params["mu"][0]), payoff.r, abs_tol=1e-15):
        return None
    kind = "call" if payoff.kind in ("max_call", "basket_call", "call_on_min") else "put"
    dt = float(model.params["dt"])
    dates = [t * dt for t in range(model.T + 1)]
    return binomial_american(float(model.x0[0]), payoff.K, payoff.r, float(model.params["sigma"][0]), model.T * dt,
                             int(config.run["oracle_steps"]), dates, kind=kind)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def write_report(out: Path, name: str, document: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w") as f:
        yaml.safe_dump(document, f, sort_keys=False)
    logger.info(f"Wrote {path}")
    return path


def _build_kwargs(config: ExperimentConfig, model: MarkovModel, threads: int) -> dict:
    build = config.build
    return dict(N=build["N"], delta=build["delta"], n_val=int(build["n_val"]),
                max_retries=int(build["max_retries"]), measure=_measure(config, model), seed=int(build["seed"]),
                exact_update=bool(build["exact_update"]), inner=int(build["inner"]), threads=threads)


def cmd_price(config: ExperimentConfig, out: Path, threads: int) -> int:
    model, surrogate = build_models(config.model)
    payoff = make_payoff(config, model)
    oracle = binomial_reference(config, model, payoff)
    kwargs = _build_kwargs(config, surrogate or model, threads)
    report, _ = price(model, payoff, float(config.build["eps_bar"]), n_paths=int(config.run["n_paths"]),
                      build_model=surrogate, oracle_value=oracle, l2_points=int(config.build["l2_points"]),
                      record_timing=bool(config.run["record_timing"]), **kwargs)
    report.config = config.to_dict()
    write_report(out, "report.yml", report.to_dict())

    status = EXIT_OK
    if report.value_oracle is not None:
        if report.value_rollout > report.value_oracle + 3.0 * report.se_rollout + 1e-12:
            logger.error(f"Rollout {report.value_rollout:.6f} exceeds oracle {report.value_oracle:.6f} + 3 SE")
            status = EXIT_CHECK_FAILED
        rel_tol = config.run["rel_tol"]
        if rel_tol is not None and report.value_oracle > 0:
            gap = abs(report.value_rollout - report.value_oracle) / report.value_oracle
            if gap > rel_tol:
                logger.error(f"Rollout is {gap:.2%} away from the oracle (tolerance {rel_tol:.2%})")
                status = EXIT_CHECK_FAILED
    return status


def cmd_oracle(config: ExperimentConfig, out: Path) -> int:
    model, _ = build_models(config.model)
    payoff = make_payoff(config, model)
    if model.support.finite:
        value, method = exact_dp_value(model, payoff, 0, model.x0), "exact_dp"
    else:
        value, method = binomial_reference(config, model, payoff), "binomial"
        if value is None:
            raise InputError("no oracle for this model: need finite noise or a one-asset Black-Scholes model "
                             "with mu equal to the payoff rate")
    logger.info(f"Oracle ({method}) value {value:.10f}")
    write_report(out, "report.yml", {"value_oracle": float(value), "method": method, "seed": int(config.build["seed"]),
                                     "config": config.to_dict()})
    return EXIT_OK


def cmd_stack(config: ExperimentConfig, out: Path, threads: int, action: str) -> int:
    directory = Path(config.run["stack_dir"]) if config.run["stack_dir"] else out / "stack"
    if action == "build":
        model, surrogate = build_models(config.model)
        builder = surrogate or model
        payoff = make_payoff(config, builder)
        stack = build_value_stack(builder, payoff, float(config.build["eps_bar"]),
                                  **_build_kwargs(config, builder, threads))
        save_stack(stack, directory)
        write_report(out, "report.yml", {"stack_dir": str(directory), "manifest": stack.manifest(),
                                         "config": config.to_dict()})
        return EXIT_OK
    stack = load_stack(directory)
    if action == "inspect":
        write_report(out, "report.yml", {"stack_dir": str(directory), "manifest": stack.manifest()})
        return EXIT_OK
    points = config.run["points"]
    if points is None:
        raise ConfigError("run.points", "stack eval needs a list of points")
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[1] != stack.d:
        raise ConfigError("run.points", f"points must have dimension {stack.d}")
    values = {t: [float(v) for v in stack.value(t, X, threads)] for t in range(stack.T + 1)}
    write_report(out, "report.yml", {"stack_dir": str(directory), "points": X.tolist(), "values": values})
    return EXIT_OK


def cmd_verify(config: ExperimentConfig, out: Path) -> int:
    results = run_checks(config.run["checks"], seed=int(config.build["seed"]),
                         n_samples=int(config.run["n_samples"]))
    failed = [r for r in results if not r.passed]
    write_report(out, "verify.yml", {"passed": not failed, "n_checks": len(results), "n_failed": len(failed),
                                     "checks": [r.to_dict() for r in results], "config": config.to_dict()})
    for result in failed:
        logger.error(f"Check {result.name} failed: {result.detail}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_scaling(config: ExperimentConfig, out: Path, threads: int) -> int:
    build, run = config.build, config.run
    record_timing = bool(run["record_timing"])
    common = dict(delta=build["delta"], seed=int(build["seed"]), n_val=int(build["n_val"]),
                  inner=int(build["inner"]), threads=threads)

    def model_factory(d: int) -> MarkovModel:
        model, surrogate = build_models(config.model, d=d)
        return surrogate or model

    def payoff_factory(d: int) -> Payoff:
        return make_payoff(config, model_factory(d))

    eps_bar = float(build["eps_bar"])
    N = int(build["N"]) if build["N"] is not None else int(math.ceil(eps_bar ** -2))
    study = scaling_study(model_factory, payoff_factory, run["d_list"], eps_bar, N, **common)
    document = {"dimension": study.to_dict(record_timing)}
    table = format_scaling_table(study.records, record_timing)
    if run["eps_list"]:
        model = model_factory(int(config.model["d"]))
        accuracy = eps_scaling_study(model, make_payoff(config, model), run["eps_list"], N=build["N"], **common)
        document["accuracy"] = accuracy.to_dict(record_timing)
        table += "\n" + format_scaling_table(accuracy.records, record_timing)
    document["config"] = config.to_dict()
    out.mkdir(parents=True, exist_ok=True)
    (out / "scaling.txt").write_text(table)
    write_report(out, "scaling.yml", document)
    if not study.polynomial:
        logger.error(f"Fitted dimension slope {study.slope:.3f} exceeds the polynomial ceiling")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_product_cert(config: ExperimentConfig, out: Path) -> int:
    eps, M = float(config.run["eps"]), float(config.run["M"])
    cert = product_certificate(eps, M, seed=int(config.build["seed"]))
    net = product_network(eps, M)
    out.mkdir(parents=True, exist_ok=True)
    save_network(net, out / "product.net", product_network_certificate(eps, M, net))
    write_report(out, "certificate.yml", {**cert.to_dict(), "config": config.to_dict()})
    ok = cert.measured_sup_error < eps and cert.sampled_lipschitz <= cert.lipschitz_bound
    if not ok:
        logger.error(f"Product certificate failed: error {cert.measured_sup_error:.3e}, "
                     f"Lipschitz {cert.sampled_lipschitz:.4f} > {cert.lipschitz_bound:.4f}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. build.eps_bar=0.05 (repeatable)")
    common.add_argument("--out", default="out", help="output directory for reports")
    common.add_argument("--seed", type=int, help="root seed, overrides build.seed")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")

    parser = argparse.ArgumentParser(prog="neural_stopping", description="Constructive ReLU networks for optimal stopping")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("price", parents=[common], help="build, roll out and report")
    commands.add_parser("oracle", parents=[common], help="exact DP or binomial reference value")
    stack = commands.add_parser("stack", parents=[common], help="build, inspect or evaluate a value stack")
    stack.add_argument("action", choices=("build", "inspect", "eval"))
    commands.add_parser("verify", parents=[common], help="run check groups")
    commands.add_parser("scaling-study", parents=[common], help="network size against dimension and accuracy")
    commands.add_parser("product-cert", parents=[common], help="certify a product network")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the exit status"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_INPUT_ERROR

    try:
        config = ExperimentConfig.from_sources(args.config, args.overrides, args.seed)
        setup_logging(config.logging)
        config.validate(args.command)
        threads = resolve_threads(args.threads)
    except StoppingError as e:
        logging.basicConfig(format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INPUT_ERROR

    out = Path(args.out)
    logger.info(f"Running {args.command} (seed {config.build['seed']}, {threads} threads)")
    try:
        if args.command == "price":
            return cmd_price(config, out, threads)
        if args.command == "oracle":
            return cmd_oracle(config, out)
        if args.command == "stack":
            return cmd_stack(config, out, threads, args.action)
        if args.command == "verify":
            return cmd_verify(config, out)
        if args.command == "scaling-study":
            return cmd_scaling(config, out, threads)
        return cmd_product_cert(config, out)
    except (StoppingError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
