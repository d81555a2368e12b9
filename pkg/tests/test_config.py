import math

import numpy as np
import pytest

from gridchase.baselines import Kind
from gridchase.config import (
    DEFAULTS,
    build_experiment,
    build_network,
    build_profile,
    config_hash,
    load_config,
    resolve_eta,
)
from gridchase.controller import PARTIAL_OBSERVABILITY_BUSES
from gridchase.errors import SchemaError
from gridchase.grid import save_network, random_feeder
from gridchase.profiles import save_profile, synth_profile


def test_defaults_load():
    doc = load_config()
    assert doc == DEFAULTS
    assert doc is not DEFAULTS


def test_preset_and_file_merge(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[uncertainty]\nsigma = 0.25\n[output]\nseeds = [4, 5]\n")
    doc = load_config(p, "large-po")
    assert doc["uncertainty"] == {**DEFAULTS["uncertainty"], "alpha": 1.0, "sigma": 0.25}
    assert doc["controller"]["hidden_buses"] == list(PARTIAL_OBSERVABILITY_BUSES)
    assert doc["output"]["seeds"] == [4, 5]
    doc = load_config(p, "moderate", {"uncertainty": {"alpha": 0.3}})
    assert doc["uncertainty"]["alpha"] == 0.3 and doc["uncertainty"]["sigma"] == 0.25


@pytest.mark.parametrize(
    "text",
    [
        "[network]\nsize = 3\n",
        "[nope]\nx = 1\n",
        "network = 3\n",
        "[controller]\nkind = \"Magic\"\n",
        "[controller]\nmode = \"Fast\"\n",
        "[output]\nseeds = []\n",
        "[uncertainty]\nsigma = 2.0\n",
        "[profile]\nT = 0\n",
        "[envelope]\neta = \"big\"\n",
        "not toml at all [",
    ],
)
def test_schema_errors(tmp_path, text):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    with pytest.raises(SchemaError):
        load_config(p)


def test_unknown_preset():
    with pytest.raises(SchemaError):
        load_config(preset="huge")


def test_relative_files(tmp_path):
    net = random_feeder(4, 1)
    save_network(net, tmp_path / "net.json")
    save_profile(synth_profile(4, 11, seed=2), tmp_path / "prof.csv")
    (tmp_path / "c.toml").write_text('[network]\nfile = "net.json"\n[profile]\nfile = "prof.csv"\nT = 10\n')
    doc = load_config(tmp_path / "c.toml")
    assert build_network(doc) == net
    assert build_profile(doc, 4).T == 11


def test_auto_eta():
    doc = load_config(overrides={"network": {"n": 8}, "profile": {"T": 30}})
    exp = build_experiment(doc)
    from gridchase.grid import sensitivity_matrices
    from gridchase.profiles import compute_trace

    eta_hat = compute_trace(sensitivity_matrices(exp.network, warn=False), exp.profile, 144.0).eta_hat
    assert exp.env.eta == math.ceil(eta_hat * 1.02 * 100) / 100
    assert exp.env.eta >= eta_hat
    fixed = load_config(overrides={"network": {"n": 8}, "profile": {"T": 30}, "envelope": {"eta": 2.5}})
    assert resolve_eta(fixed, exp.network, exp.profile) == 2.5


def test_experiment_episode():
    doc = load_config(preset="large-po", overrides={"network": {"n": 60}, "profile": {"T": 20},
                                                    "envelope": {"controllable": [1, 2, 3]}})
    exp = build_experiment(doc)
    assert exp.profile.T == 21
    assert exp.env.controllable.sum() == 3
    cfg = exp.episode(kind="PiFixed", seed=9)
    assert cfg.controller is Kind.PI_FIXED and cfg.seed == 9 and cfg.steps == 20
    assert cfg.hidden_buses == PARTIAL_OBSERVABILITY_BUSES
    assert exp.episode(T=5).steps == 5


def test_bad_controllable_bus():
    with pytest.raises(SchemaError):
        build_experiment(load_config(overrides={"network": {"n": 5}, "profile": {"T": 5},
                                                "envelope": {"controllable": [7]}}))


def test_chain_style_and_hash():
    doc = load_config(overrides={"network": {"style": "chain", "n": 5}})
    net = build_network(doc)
    assert [e.parent for e in net.edges] == [0, 1, 2, 3, 4]
    assert config_hash(doc) == config_hash(load_config(overrides={"network": {"style": "chain", "n": 5}}))
    assert config_hash(doc) != config_hash(load_config())


def test_profile_shape_follows_config():
    doc = load_config(overrides={"profile": {"T": 7, "pv_every": 0}, "network": {"n": 3}})
    prof = build_profile(doc, 3)
    assert prof.p.shape == (8, 3)
    assert np.all(prof.p <= 0)
