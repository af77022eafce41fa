import json
import logging

import numpy as np
import pytest

import main
from src.config import Config
from src.env import garnet_generate
from src.exceptions import DivergenceError


def reducible_garnet_seed() -> int:
    """A Garnet(2, 1, 1) is ergodic only when its two states swap; any other draw is reducible."""
    for seed in range(100):
        kernel = garnet_generate(2, 1, 1, seed).transition[:, 0, :]
        if not np.array_equal(kernel, [[0.0, 1.0], [1.0, 0.0]]):
            return seed
    raise RuntimeError("no reducible draw found")


def test_gen_env(config_path, tmp_path):
    out = tmp_path / "env.json"
    assert main.main(["gen-env", "--config", str(config_path), "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["n_states"] == 6
    assert len(payload["features"]) == 6


def test_diagnose_prints_report(config_path, capsys):
    assert main.main(["diagnose", "--config", str(config_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["hurwitz"] is True
    assert report["k0"] == 32


def test_diagnose_to_file(config_path, tmp_path):
    out = tmp_path / "diag.json"
    assert main.main(["diagnose", "--config", str(config_path), "--out", str(out)]) == 0
    assert "alpha_max_td" in json.loads(out.read_text())


def test_kolmogorov_run(config_path, tmp_path):
    out = tmp_path / "kd.csv"
    code = main.main(["kolmogorov", "--config", str(config_path), "--out", str(out),
                      "--seed", "3", "--override", "experiment.replicates=4"])
    assert code == 0
    assert out.read_text().splitlines()[-1].startswith("256,4,")


@pytest.mark.parametrize("extra", [["--override", "experiment.replicates=0"],
                                   ["--override", "env.unknown_key=1"]])
def test_config_errors(config_path, extra):
    assert main.main(["kolmogorov", "--config", str(config_path)] + extra) == 2


def test_missing_config(tmp_path):
    assert main.main(["diagnose", "--config", str(tmp_path / "none.toml")]) == 2


def test_reducible_chain(config_path):
    overrides = ["env.n_states=2", "env.n_actions=1", "env.branching=1",
                 f"env.seed={reducible_garnet_seed()}"]
    args = ["diagnose", "--config", str(config_path)]
    for override in overrides:
        args += ["--override", override]
    assert main.main(args) == 3


def test_divergence_exit_code(config_path, monkeypatch):
    def diverge(cfg, out_path):
        raise DivergenceError("iterate left the stable regime")

    monkeypatch.setitem(main.EXPERIMENTS, "coverage", diverge)
    assert main.main(["coverage", "--config", str(config_path)]) == 4


def test_unexpected_failure(config_path, monkeypatch):
    def broken(cfg, out_path):
        raise RuntimeError("boom")

    monkeypatch.setitem(main.EXPERIMENTS, "variance-decay", broken)
    assert main.main(["variance-decay", "--config", str(config_path)]) == 1


@pytest.mark.parametrize("name, level", [("debug", logging.DEBUG), ("WARNING", logging.WARNING),
                                         ("chatty", logging.INFO)])
def test_log_level(monkeypatch, name, level):
    monkeypatch.setattr(Config, "LOG_LEVEL", name)
    assert Config.log_level() == level
