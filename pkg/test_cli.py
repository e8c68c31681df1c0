#!/usr/bin/env python3
"""
End-to-end tests of the command line: config loading, overrides, exit codes
and the reports each command writes.
"""

import os
import sys

import pytest
import yaml

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from errors import ConfigError
from neural_stopping import (
    EXIT_CHECK_FAILED,
    EXIT_INPUT_ERROR,
    EXIT_OK,
    THREADS_ENV,
    ExperimentConfig,
    apply_overrides,
    load_config_file,
    main,
    resolve_threads,
)

TWO_ATOM = [
    "--set", "model.family=finite",
    "--set", "model.d=1",
    "--set", "model.T=1",
    "--set", "model.atoms=[[2.0], [0.5]]",
    "--set", "model.probabilities=[0.5, 0.5]",
    "--set", "model.x0=1.0",
    "--set", "payoff.kind=basket_put",
    "--set", "payoff.K=1.0",
    "--set", "payoff.r=0.0",
]


def read(path):
    with open(path) as f:
        return yaml.safe_load(f)


def test_oracle_two_atom_instance(tmp_path):
    assert main(["oracle", "--out", str(tmp_path)] + TWO_ATOM) == EXIT_OK
    report = read(tmp_path / "report.yml")
    assert report["value_oracle"] == pytest.approx(0.25, abs=1e-15)
    assert report["method"] == "exact_dp"


def test_oracle_binomial_for_black_scholes(tmp_path):
    args = ["oracle", "--out", str(tmp_path), "--set", "model.x0=100", "--set", "model.mu=0.05",
            "--set", "payoff.K=100", "--set", "payoff.r=0.05", "--set", "run.oracle_steps=1000"]
    assert main(args) == EXIT_OK
    report = read(tmp_path / "report.yml")
    assert report["method"] == "binomial"
    assert 5.5 < report["value_oracle"] < 6.5


def test_single_threaded_commands_ignore_thread_count(tmp_path):
    assert main(["oracle", "--out", str(tmp_path / "one")] + TWO_ATOM) == EXIT_OK
    assert main(["oracle", "--out", str(tmp_path / "four"), "--threads", "4"] + TWO_ATOM) == EXIT_OK
    assert read(tmp_path / "one" / "report.yml") == read(tmp_path / "four" / "report.yml")
    args = ["product-cert", "--threads", "2", "--set", "run.eps=0.1", "--set", "run.M=1.0"]
    assert main(args + ["--out", str(tmp_path / "cert")]) == EXIT_OK


def test_oversized_price_build_exits_2(tmp_path):
    args = ["price", "--out", str(tmp_path), "--set", "model.T=4", "--set", "model.dt=0.25",
            "--set", "build.exact_update=true", "--set", "build.N=100"]
    assert main(args) == EXIT_INPUT_ERROR
    assert not (tmp_path / "report.yml").exists()


def test_oracle_without_reference_is_input_error(tmp_path):
    assert main(["oracle", "--out", str(tmp_path), "--set", "model.family=merton"]) == EXIT_INPUT_ERROR


def test_unknown_command_exits_2():
    assert main(["forecast"]) == EXIT_INPUT_ERROR


def test_malformed_yaml_exits_2(tmp_path):
    path = tmp_path / "bad.yml"
    path.write_text("model:\n  family: [finite\n")
    assert main(["oracle", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INPUT_ERROR
    with pytest.raises(ConfigError) as error:
        load_config_file(str(path))
    assert error.value.field.startswith("line")


@pytest.mark.parametrize("override", ["build.eps_bar=1.5", "model.family=heston", "run.n_paths=10",
                                      "model.colour=red", "eps_bar=0.1", "build.n_val=20"])
def test_bad_overrides_exit_2(tmp_path, override):
    assert main(["price", "--out", str(tmp_path), "--set", override]) == EXIT_INPUT_ERROR


def test_unknown_config_key_is_reported(tmp_path):
    path = tmp_path / "config.yml"
    path.write_text("build:\n  eps: 0.1\n")
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_sources(str(path))
    assert error.value.field == "build.eps"


def test_overrides_parse_yaml_values():
    config = apply_overrides({"build": {"N": None, "exact_update": False}}, ["build.N=1000", "build.exact_update=true"])
    assert config["build"] == {"N": 1000, "exact_update": True}


def test_price_with_zero_volatility(tmp_path):
    args = ["price", "--out", str(tmp_path), "--set", "model.sigma=0", "--set", "model.mu=0", "--set", "model.T=2",
            "--set", "model.dt=0.5", "--set", "model.x0=0.8", "--set", "payoff.K=1.0", "--set", "payoff.r=0.0",
            "--set", "build.exact_update=true", "--set", "build.N=8", "--set", "build.n_val=100",
            "--set", "build.inner=8", "--set", "run.n_paths=200"]
    assert main(args) == EXIT_OK
    report = read(tmp_path / "report.yml")
    assert report["value_rollout"] == pytest.approx(0.2, rel=1e-12)
    assert report["se_rollout"] == 0.0
    assert report["value_oracle"] == pytest.approx(0.2, rel=1e-12)


def test_price_reports_are_reproducible(tmp_path):
    args = TWO_ATOM + ["--set", "build.N=200", "--set", "build.n_val=100", "--set", "build.inner=16",
                       "--set", "run.n_paths=500", "--set", "build.l2_points=100", "--seed", "7"]
    assert main(["price", "--out", str(tmp_path / "a")] + args) == EXIT_OK
    assert main(["price", "--out", str(tmp_path / "b")] + args) == EXIT_OK
    first = (tmp_path / "a" / "report.yml").read_bytes()
    assert first == (tmp_path / "b" / "report.yml").read_bytes()
    report = yaml.safe_load(first)
    assert report["seed"] == 7
    assert report["value_oracle"] == pytest.approx(0.25)
    assert report["wall_ms"] is None


def test_product_certificate_command(tmp_path):
    args = ["product-cert", "--out", str(tmp_path), "--set", "run.eps=0.01", "--set", "run.M=2.0"]
    assert main(args) == EXIT_OK
    certificate = read(tmp_path / "certificate.yml")
    assert certificate["measured_sup_error"] < 0.01
    assert certificate["sampled_lipschitz"] <= certificate["lipschitz_bound"]
    assert (tmp_path / "product.net").exists()


def test_product_certificate_rejects_small_M(tmp_path):
    assert main(["product-cert", "--out", str(tmp_path), "--set", "run.M=0.5"]) == EXIT_INPUT_ERROR


def test_stack_build_inspect_and_eval(tmp_path):
    args = ["--out", str(tmp_path)] + TWO_ATOM + ["--set", "build.exact_update=true", "--set", "build.N=100",
                                                   "--set", "build.n_val=100", "--set", "build.inner=16"]
    assert main(["stack", "build"] + args) == EXIT_OK
    assert (tmp_path / "stack" / "manifest.yml").exists()
    assert main(["stack", "inspect"] + args) == EXIT_OK
    assert read(tmp_path / "report.yml")["manifest"]["T"] == 1
    assert main(["stack", "eval"] + args + ["--set", "run.points=[[0.5], [1.0]]"]) == EXIT_OK
    values = read(tmp_path / "report.yml")["values"]
    assert values[1] == pytest.approx([0.5, 0.0])
    assert main(["stack", "eval"] + args) == EXIT_INPUT_ERROR


def test_stack_inspect_without_stack_exits_2(tmp_path):
    assert main(["stack", "inspect", "--out", str(tmp_path)]) == EXIT_INPUT_ERROR


def test_verify_snell_group(tmp_path):
    assert main(["verify", "--out", str(tmp_path), "--set", "run.checks=[snell]"]) == EXIT_OK
    report = read(tmp_path / "verify.yml")
    assert report["passed"] and report["n_checks"] == 20
    assert main(["verify", "--out", str(tmp_path), "--set", "run.checks=[weather]"]) == EXIT_INPUT_ERROR


def test_scaling_study_needs_three_dimensions(tmp_path):
    assert main(["scaling-study", "--out", str(tmp_path), "--set", "run.d_list=[1, 2]"]) == EXIT_INPUT_ERROR


def test_scaling_study_writes_table(tmp_path):
    args = ["scaling-study", "--out", str(tmp_path), "--set", "model.T=2", "--set", "build.eps_bar=0.5",
            "--set", "build.N=4", "--set", "build.n_val=100", "--set", "build.inner=8",
            "--set", "run.d_list=[1, 2, 3]"]
    assert main(args) == EXIT_OK
    lines = (tmp_path / "scaling.txt").read_text().splitlines()
    assert lines[0].split() == ["d", "eps_bar", "size_total", "slope_partial", "wall_ms"]
    assert len(lines) == 4
    assert read(tmp_path / "scaling.yml")["dimension"]["polynomial"]


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


def test_exit_code_constants():
    assert (EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT_ERROR) == (0, 1, 2)


def test_shipped_configs_validate():
    here = os.path.dirname(os.path.abspath(__file__))
    for name in ("config.yml", "config_template.yml"):
        config = ExperimentConfig.from_sources(os.path.join(here, name))
        config.validate("price")
    bermudan = ExperimentConfig.from_sources(os.path.join(here, "config.yml"))
    assert bermudan.model["surrogate"] == 1 and bermudan.run["rel_tol"] == 0.015
