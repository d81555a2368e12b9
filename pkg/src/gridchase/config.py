"""Declarative experiment configuration.

One TOML document with sections ``[network]``, ``[profile]``,
``[envelope]``, ``[uncertainty]``, ``[controller]`` and ``[output]``.
Unknown sections or keys are rejected. Presets are ordinary documents
merged under the user's file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .baselines import Kind, droop_gains
from .cbc import SubsamplePolicy
from .controller import PARTIAL_OBSERVABILITY_BUSES, EpisodeConfig
from .errors import SchemaError
from .grid import RadialNetwork, chain_network, load_network, random_feeder, sensitivity_matrices
from .oracle import Mode, SafetyEnvelope
from .profiles import InjectionProfile, compute_trace, load_profile, synth_profile

DEFAULTS: dict = {
    "network": {
        "file": "",
        "style": "feeder-random",
        "n": 55,
        "seed": 4,
        "r_range": [0.05, 0.4],
        "x_range": [0.05, 0.4],
    },
    "profile": {
        "file": "",
        "T": 500,
        "dt": 115.2,
        "smoothness": 1.0,
        "pv_every": 3,
        "pv_buses": [],
        "pv_peak": 3.8e5,
        "seed": 1,
        "start_hour": 6.0,
        "load_range": [1.8e4, 5.5e4],
        "cloud_rate": 0.2,
        "cloud_depth": 0.3,
    },
    "envelope": {
        "eta": "auto",
        "eta_margin": 0.02,
        "epsilon": 0.1,
        "beta": 100.0,
        "v_nom": 144.0,
        "band": 0.05,
        "q_limit": 0.24,
        "pv": 0.1,
        "pu": 10.0,
        "controllable": "all",
    },
    "uncertainty": {
        "alpha": 1.0,
        "sigma": 1.0,
        "permute": True,
        "psd": False,
        "box_inflation": 0.0,
    },
    "controller": {
        "kind": "PiPlusSel",
        "compare": ["PiPlusSel", "PiFixed"],
        "mode": "TwoStage",
        "latest_k": 20,
        "random_k": 80,
        "hidden_buses": [],
        "hide_from_oracle": False,
        "droop_scale": 0.05,
        "inflate_on_infeasible": False,
    },
    "output": {
        "dir": "out",
        "seeds": [0],
        "per_unit": False,
    },
}

PRESETS: dict[str, dict] = {
    "moderate": {"uncertainty": {"alpha": 0.5, "sigma": 0.5}},
    "large": {"uncertainty": {"alpha": 1.0, "sigma": 1.0}},
    "large-po": {
        "uncertainty": {"alpha": 1.0, "sigma": 1.0},
        "controller": {"hidden_buses": list(PARTIAL_OBSERVABILITY_BUSES)},
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise SchemaError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise SchemaError(f"'{path}' must be a table")
            out[key] = _merge(base[key], val, path)
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the preset, then the file, then explicit overrides."""
    doc = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise SchemaError(f"unknown preset '{preset}'; choose from {', '.join(PRESETS)}")
        doc = _merge(doc, PRESETS[preset])
    base_dir = Path(".")
    if path is not None:
        base_dir = Path(path).parent
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None
        doc = _merge(doc, user)
    if overrides:
        doc = _merge(doc, overrides)
    # relative data paths are taken from the config file's directory
    for sec in ("network", "profile"):
        f = doc[sec]["file"]
        if f and not Path(f).is_absolute():
            doc[sec]["file"] = str(base_dir / f)
    _validate(doc)
    return doc


def _validate(doc: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise SchemaError(msg)

    net, prof, env, unc, ctl, out = (doc[k] for k in ("network", "profile", "envelope", "uncertainty",
                                                       "controller", "output"))
    need(net["style"] in ("chain", "feeder-random"), "network.style must be 'chain' or 'feeder-random'")
    need(isinstance(net["n"], int) and net["n"] >= 1, "network.n must be a positive integer")
    need(isinstance(prof["T"], int) and prof["T"] >= 1, "profile.T must be a positive integer")
    need(env["eta"] == "auto" or isinstance(env["eta"], (int, float)), "envelope.eta must be a number or 'auto'")
    need(env["controllable"] == "all" or isinstance(env["controllable"], list),
         "envelope.controllable must be 'all' or a list of buses")
    for k in ("kind",):
        try:
            Kind(ctl[k])
        except ValueError:
            raise SchemaError(f"controller.kind must be one of {[x.value for x in Kind]}") from None
    for k in ctl["compare"]:
        try:
            Kind(k)
        except ValueError:
            raise SchemaError(f"controller.compare entry '{k}' is not a controller") from None
    try:
        Mode(ctl["mode"])
    except ValueError:
        raise SchemaError("controller.mode must be 'TwoStage' or 'SlackOnly'") from None
    need(isinstance(out["seeds"], list) and out["seeds"] and all(isinstance(s, int) for s in out["seeds"]),
         "output.seeds must be a non-empty list of integers")
    need(unc["alpha"] >= 0 and 0 <= unc["sigma"] <= 1, "uncertainty.alpha >= 0 and sigma in [0, 1] required")


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def build_network(doc: dict) -> RadialNetwork:
    net = doc["network"]
    if net["file"]:
        return load_network(net["file"])
    n = net["n"]
    if net["style"] == "chain":
        rng = np.random.default_rng(net["seed"])
        return chain_network(rng.uniform(*net["r_range"], size=n), rng.uniform(*net["x_range"], size=n))
    return random_feeder(n, net["seed"], tuple(net["r_range"]), tuple(net["x_range"]))


def build_profile(doc: dict, n: int) -> InjectionProfile:
    p = doc["profile"]
    if p["file"]:
        return load_profile(p["file"], dt=p["dt"])
    pv = p["pv_buses"] or (list(range(p["pv_every"], n + 1, p["pv_every"])) if p["pv_every"] else [])
    return synth_profile(
        n, p["T"] + 1, dt=p["dt"], smoothness=p["smoothness"], pv_buses=pv, pv_peak=p["pv_peak"],
        seed=p["seed"], start_hour=p["start_hour"], load_range=tuple(p["load_range"]),
        cloud_rate=p["cloud_rate"], cloud_depth=p["cloud_depth"],
    )


@dataclass(frozen=True)
class Experiment:
    doc: dict
    network: RadialNetwork
    profile: InjectionProfile
    env: SafetyEnvelope

    @property
    def seeds(self) -> list[int]:
        return list(self.doc["output"]["seeds"])

    def episode(self, kind: Kind | str | None = None, seed: int | None = None, **changes) -> EpisodeConfig:
        d = self.doc
        unc, ctl = d["uncertainty"], d["controller"]
        kind = Kind(kind or ctl["kind"])
        cfg = EpisodeConfig(
            network=self.network,
            profile=self.profile,
            env=self.env,
            controller=kind,
            T=min(d["profile"]["T"], self.profile.T - 1),
            alpha=unc["alpha"],
            sigma=unc["sigma"],
            permute=unc["permute"],
            seed=self.seeds[0] if seed is None else seed,
            subsample=SubsamplePolicy(ctl["latest_k"], ctl["random_k"]),
            hidden_buses=tuple(ctl["hidden_buses"]),
            mode=Mode(ctl["mode"]),
            psd=unc["psd"],
            hide_from_oracle=ctl["hide_from_oracle"],
            box_inflation=unc["box_inflation"],
            droop_gains=droop_gains(self.env, ctl["droop_scale"]),
            inflate_on_infeasible=ctl["inflate_on_infeasible"],
        )
        if changes:
            cfg = replace(cfg, **changes)
        return cfg


def resolve_eta(doc: dict, network: RadialNetwork, profile: InjectionProfile) -> float:
    """Numeric eta; ``auto`` takes the largest step change over the episode
    plus ``eta_margin`` relative headroom, rounded up to 0.01."""
    env = doc["envelope"]
    if env["eta"] != "auto":
        return float(env["eta"])
    trace = compute_trace(sensitivity_matrices(network, warn=False), profile, env["v_nom"])
    T = min(doc["profile"]["T"], profile.T - 1)
    eta_hat = float(np.abs(trace.w[:T]).max(initial=0.0))
    return math.ceil(eta_hat * (1.0 + env["eta_margin"]) * 100.0) / 100.0


def build_experiment(doc: dict) -> Experiment:
    network = build_network(doc)
    profile = build_profile(doc, network.n)
    e = doc["envelope"]
    ctrl = None
    if e["controllable"] != "all":
        ctrl = np.zeros(network.n, dtype=bool)
        for b in e["controllable"]:
            if not 1 <= b <= network.n:
                raise SchemaError(f"controllable bus {b} outside 1..{network.n}")
            ctrl[b - 1] = True
    env = SafetyEnvelope.standard(
        network.n, eta=resolve_eta(doc, network, profile), controllable=ctrl, epsilon=e["epsilon"],
        beta=e["beta"], v_nom=e["v_nom"], band=e["band"], q_limit=e["q_limit"], pv=e["pv"], pu=e["pu"],
    )
    return Experiment(doc, network, profile, env)
