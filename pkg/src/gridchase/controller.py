"""Episode loop: estimate, act, simulate the true grid, record.

At step ``t`` the loop observes ``v(t)``, refreshes the model estimate from
the stored transitions (``PiPlusSel`` only), asks the policy for ``u(t)``,
sets ``qc(t) = qc(t-1) + u(t)`` and advances the true grid::

    v(t+1) = (v(t) + X* u(t)) + w(t)

The transition is then stored with the configured buses hidden from the
model update. The controller itself still sees every voltage unless
``hide_from_oracle`` is set, in which case hidden coordinates are replaced
by the controller's own prediction from the previous step.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .baselines import Kind, Policy, make_policy, policy_step
from .cbc import (
    SubsamplePolicy,
    UncertaintySet,
    ObservationStore,
    build_view,
    init_estimate,
    mistake_bound_log,
    sel_project,
)
from .errors import AssumptionViolation, DimensionMismatch, DomainError, SchemaError
from .grid import RadialNetwork, sensitivity_matrices, triangle_norm
from .oracle import Mode, SafetyEnvelope
from .profiles import ExogenousTrace, InjectionProfile, check_assumption1, compute_trace, vpar_box

log = logging.getLogger(__name__)

PARTIAL_OBSERVABILITY_BUSES = (9, 19, 22, 31, 40, 46, 55)


@dataclass(frozen=True)
class EpisodeConfig:
    network: RadialNetwork
    profile: InjectionProfile
    env: SafetyEnvelope
    controller: Kind = Kind.PI_PLUS_SEL
    T: int | None = None  # defaults to profile length - 1
    alpha: float = 1.0
    sigma: float = 1.0
    permute: bool = False
    seed: int = 0  # drives the initial estimate and the tuple subsampling
    subsample: SubsamplePolicy = SubsamplePolicy()
    hidden_buses: tuple[int, ...] = ()
    mode: Mode = Mode.TWO_STAGE
    psd: bool = False
    hide_from_oracle: bool = False
    box_inflation: float = 0.0
    droop_gains: NDArray[np.float64] | None = None
    inflate_on_infeasible: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "controller", Kind(self.controller))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "hidden_buses", tuple(sorted(set(int(b) for b in self.hidden_buses))))
        n = self.network.n
        if self.profile.n != n or self.env.n != n:
            raise DimensionMismatch("network, profile and envelope sizes differ")
        if any(not 1 <= b <= n for b in self.hidden_buses):
            raise DomainError(f"hidden buses must lie in 1..{n}")
        if self.steps < 1 or self.steps > self.profile.T - 1:
            raise DomainError(f"T must lie in 1..{self.profile.T - 1}")
        if self.alpha < 0 or not 0 <= self.sigma <= 1:
            raise DomainError("alpha must be nonnegative and sigma in [0, 1]")

    @property
    def steps(self) -> int:
        return self.profile.T - 1 if self.T is None else self.T

    @property
    def label(self) -> str:
        return self.name or self.controller.value

    def digest(self) -> str:
        """Stable hash of everything that determines the episode."""
        h = hashlib.sha256()
        h.update(json.dumps(self.network.to_dict(), sort_keys=True).encode())
        for a in (self.profile.p, self.profile.q_e):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        env = self.env
        for a in (env.v_lo, env.v_hi, env.v_nom, env.q_lo, env.q_hi, env.Pv, env.Pu):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        if self.droop_gains is not None:
            h.update(np.ascontiguousarray(self.droop_gains, dtype="<f8").tobytes())
        scalars = {
            "dt": self.profile.dt, "eta": env.eta, "epsilon": env.epsilon, "beta": env.beta, "v0": env.v0,
            "controller": self.controller.value, "T": self.steps, "alpha": self.alpha, "sigma": self.sigma,
            "permute": self.permute, "seed": self.seed, "subsample": asdict(self.subsample),
            "hidden": list(self.hidden_buses), "mode": self.mode.value, "psd": self.psd,
            "hide_from_oracle": self.hide_from_oracle, "box_inflation": self.box_inflation,
            "inflate_on_infeasible": self.inflate_on_infeasible,
        }
        h.update(json.dumps(scalars, sort_keys=True).encode())
        return h.hexdigest()[:16]


@dataclass
class TrajectoryLog:
    """Per-step record; row ``t - 1`` holds step ``t``.

    ``qc[t]`` is the injection after the action of step ``t``. ``move`` and
    ``model_err`` are triangle-norm distances of the estimate used at step
    ``t`` from the previous estimate and from ``X*``.
    """

    header: dict
    v: NDArray[np.float64]
    u: NDArray[np.float64]
    qc: NDArray[np.float64]
    xi: NDArray[np.float64]
    k: NDArray[np.float64]
    stage: list[str]
    mistake: NDArray[np.int64]
    move: NDArray[np.float64]
    model_err: NDArray[np.float64]
    solver: list[dict] = field(default_factory=list)  # per step: iterations and timings
    X_final: NDArray[np.float64] | None = None
    X_star: NDArray[np.float64] | None = None
    w: NDArray[np.float64] | None = None
    store: ObservationStore | None = None
    uset: UncertaintySet | None = None
    box: object = None
    estimates: list[NDArray[np.float64]] | None = None

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[1]

    def columns(self) -> list[str]:
        n = self.n
        return (["t", "mistake", "stage", "xi", "k", "move", "model_err"]
                + [f"v_{i}" for i in range(1, n + 1)]
                + [f"u_{i}" for i in range(1, n + 1)]
                + [f"qc_{i}" for i in range(1, n + 1)])

    def write_csv(self, path: str | Path, v_base=None) -> None:
        """One row per step, floats in round-trip form. With ``v_base`` the
        voltages are written in per unit (squared), ``v / v_base``."""
        fmt = lambda x: format(float(x), ".17g")  # noqa: E731
        v = self.v if v_base is None else self.v / v_base
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for t in range(self.T):
                row = [t + 1, int(self.mistake[t]), self.stage[t], fmt(self.xi[t]), fmt(self.k[t]),
                       fmt(self.move[t]), fmt(self.model_err[t])]
                row += [fmt(x) for x in v[t]]
                row += [fmt(x) for x in self.u[t]]
                row += [fmt(x) for x in self.qc[t]]
                w.writerow(row)

    def write_header(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.header, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_trajectory(path: str | Path) -> dict[str, NDArray]:
    """Column arrays from a trajectory CSV (``stage`` as strings)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if not head or head[:7] != ["t", "mistake", "stage", "xi", "k", "move", "model_err"]:
            raise SchemaError("not a trajectory file")
        rows = list(reader)
    n = (len(head) - 7) // 3
    out: dict[str, NDArray] = {"stage": np.array([r[2] for r in rows])}
    num = np.array([[float(x) for i, x in enumerate(r) if i != 2] for r in rows]).reshape(len(rows), -1)
    out["t"] = num[:, 0].astype(int)
    out["mistake"] = num[:, 1].astype(int)
    out["xi"], out["k"], out["move"], out["model_err"] = num[:, 2], num[:, 3], num[:, 4], num[:, 5]
    out["v"] = num[:, 6: 6 + n]
    out["u"] = num[:, 6 + n: 6 + 2 * n]
    out["qc"] = num[:, 6 + 2 * n: 6 + 3 * n]
    return out


@dataclass(frozen=True)
class MistakeReport:
    total: int
    first_t: int | None
    last_t: int | None
    max_violation: float


def count_mistakes(log_or_v, env: SafetyEnvelope) -> MistakeReport:
    """Steps whose voltage leaves ``[v_lo, v_hi]`` at some bus (steps count from 1)."""
    v = log_or_v.v if isinstance(log_or_v, TrajectoryLog) else np.asarray(log_or_v, dtype=float)
    excess = np.maximum(v - env.v_hi, env.v_lo - v).max(axis=1) if v.size else np.zeros(0)
    bad = np.flatnonzero(excess > 0)
    if bad.size == 0:
        return MistakeReport(0, None, None, 0.0)
    return MistakeReport(int(bad.size), int(bad[0]) + 1, int(bad[-1]) + 1, float(excess.max()))


def _mistake_flags(v: NDArray[np.float64], env: SafetyEnvelope) -> NDArray[np.int64]:
    return ((v < env.v_lo) | (v > env.v_hi)).any(axis=1).astype(np.int64)


def prepare(cfg: EpisodeConfig):
    """Truth model, exogenous trace, noise check and exogenous box."""
    model = sensitivity_matrices(cfg.network)
    trace = compute_trace(model, cfg.profile, cfg.env.v0)
    steps = cfg.steps
    # only the part of the trace the episode touches matters
    trace = ExogenousTrace(trace.v_par[: steps + 1], trace.w[:steps])
    rep = check_assumption1(trace, cfg.env.eta, cfg.env.v_lo, cfg.env.v_hi)
    if not rep.ok:
        raise AssumptionViolation(f"{rep.reason}: largest step change {rep.worst:.6g} vs eta {cfg.env.eta:.6g}",
                                  step=rep.argmax_t + 1)
    box = vpar_box(trace, cfg.box_inflation)
    return model, trace, box


def run_episode(cfg: EpisodeConfig, keep_estimates: bool = False) -> TrajectoryLog:
    model, trace, box = prepare(cfg)
    X_star = model.X
    env = cfg.env
    n, T = env.n, cfg.steps
    uset = UncertaintySet.around(X_star, cfg.alpha, enforce_nonneg=True, enforce_psd=cfg.psd)
    X_init = init_estimate(cfg.network, cfg.sigma, cfg.permute, cfg.alpha, cfg.seed, X_star=X_star)
    policy: Policy = make_policy(cfg.controller, env, X_star=X_star, X_init=X_init,
                                 gains=cfg.droop_gains, mode=cfg.mode)
    store = ObservationStore(n, cfg.hidden_buses)
    hidden = ~store.mask
    subsample = replace(cfg.subsample, seed=cfg.seed)

    v_log = np.empty((T, n))
    u_log = np.empty((T, n))
    qc_log = np.empty((T, n))
    xi = np.zeros(T)
    kk = np.zeros(T)
    move = np.zeros(T)
    err = np.zeros(T)
    stage: list[str] = []
    stats: list[dict] = []
    estimates = [] if keep_estimates else None

    X_prev = policy.X_hat
    v = trace.v_par[0].copy()
    qc = np.zeros(n)
    predicted = None
    for t in range(T):
        st: dict = {}
        if cfg.controller is Kind.PI_PLUS_SEL and len(store):
            t0 = time.perf_counter()
            view = build_view(store, uset, box, env.eta, subsample, step=t)
            res = sel_project(X_prev, view, inflate_on_infeasible=cfg.inflate_on_infeasible)
            policy.X_hat = res.X
            st.update(sel_solved=res.solved, sel_iterations=res.iterations, sel_rows=res.working_rows,
                      sel_time=time.perf_counter() - t0)
        if policy.X_hat is not None:
            move[t] = triangle_norm(policy.X_hat - X_prev)
            err[t] = triangle_norm(policy.X_hat - X_star)
            X_prev = policy.X_hat
            if estimates is not None:
                estimates.append(policy.X_hat.copy())
        seen = v
        if cfg.hide_from_oracle and predicted is not None and hidden.any():
            seen = np.where(hidden, predicted, v)
        t0 = time.perf_counter()
        u = policy_step(policy, seen, qc, env)
        st["policy_time"] = time.perf_counter() - t0
        sol = policy.last
        if sol is not None:
            xi[t], kk[t] = sol.xi, sol.k
            stage.append(sol.stage.value)
            predicted = sol.predicted_v
            if sol.report is not None:
                st["oracle_iterations"] = sol.report.iterations
        else:
            stage.append("None")
        qc = qc + u
        v_next = (v + X_star @ u) + trace.w[t]
        store.append(v, v_next, u, qc)
        v_log[t], u_log[t], qc_log[t] = v, u, qc
        stats.append(st)
        v = v_next

    diam = uset.diameter
    header = {
        "config_hash": cfg.digest(),
        "controller": cfg.controller.value,
        "name": cfg.label,
        "seed": cfg.seed,
        "T": T,
        "n": n,
        "rho": env.rho,
        "eta": env.eta,
        "epsilon": env.epsilon,
        "diam": diam,
        "log10_mistake_bound": mistake_bound_log(diam, env.rho, n) if diam > 0 else 0.0,
        "hidden_buses": list(cfg.hidden_buses),
        "eta_hat": trace.eta_hat,
    }
    mistakes = _mistake_flags(v_log, env)
    rep = count_mistakes(v_log, env)
    header.update(mistakes=rep.total, first_mistake=rep.first_t, last_mistake=rep.last_t,
                  max_violation=rep.max_violation)
    return TrajectoryLog(header, v_log, u_log, qc_log, xi, kk, stage, mistakes, move, err, stats,
                         X_final=X_prev, X_star=X_star, w=trace.w, store=store, uset=uset, box=box,
                         estimates=estimates)


def replay(log_: TrajectoryLog) -> NDArray[np.float64]:
    """Re-simulate the voltages from the logged actions and the noise."""
    v = np.empty_like(log_.v)
    v[0] = log_.v[0]
    for t in range(1, log_.T):
        v[t] = (v[t - 1] + log_.X_star @ log_.u[t - 1]) + log_.w[t - 1]
    return v


def episode_cost(log_: TrajectoryLog, env: SafetyEnvelope) -> float:
    d = log_.v - env.v_nom
    return float(np.einsum("ti,ij,tj->", d, env.Pv, d) + np.einsum("ti,ij,tj->", log_.u, env.Pu, log_.u))


def post_warmup_violation_rate(log_: TrajectoryLog, diam: float, frac: float = 0.01) -> tuple[int, float]:
    """Start of the post-warmup phase (the step after the last model update
    of at least ``frac * diam``) and the fraction of later steps with a
    mistake."""
    big = np.flatnonzero(log_.move >= frac * diam)
    start = int(big[-1]) + 1 if big.size else 0
    rest = log_.mistake[start:]
    return start + 1, float(rest.mean()) if rest.size else 0.0


@dataclass
class ComparisonRow:
    name: str
    controller: str
    seeds: list[int]
    mistakes: list[int]
    costs: list[float]
    final_errors: list[float]

    def summary(self) -> dict:
        m = np.array(self.mistakes, dtype=float)
        c = np.array(self.costs)
        e = np.array(self.final_errors)
        return {
            "name": self.name, "controller": self.controller, "seeds": self.seeds,
            "mistakes": self.mistakes, "mistakes_mean": float(m.mean()), "mistakes_std": float(m.std()),
            "cost_mean": float(c.mean()), "cost_std": float(c.std()),
            "final_model_error_mean": float(e.mean()), "final_model_error_std": float(e.std()),
        }


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def to_json(self) -> str:
        return json.dumps([r.summary() for r in self.rows], indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'controller':<24} {'mistakes':>20} {'cost':>26} {'final model error':>24}"]
        for r in self.rows:
            s = r.summary()
            lines.append(
                f"{r.name:<24} {s['mistakes_mean']:>10.2f} +- {s['mistakes_std']:<6.2f}"
                f" {s['cost_mean']:>14.6g} +- {s['cost_std']:<9.3g}"
                f" {s['final_model_error_mean']:>12.6g} +- {s['final_model_error_std']:<8.3g}"
            )
        return "\n".join(lines) + "\n"


def _episode_scalars(cfg: EpisodeConfig) -> tuple[int, float, float]:
    lg = run_episode(cfg)
    return lg.header["mistakes"], episode_cost(lg, cfg.env), float(lg.model_err[-1])


def compare(cfgs: list[EpisodeConfig], seeds: list[int], jobs: int = 1) -> ComparisonTable:
    """Run every configuration on every seed; rows keep the order of ``cfgs``."""
    if not seeds:
        raise DomainError("compare needs at least one seed")
    tasks = [replace(c, seed=s) for c in cfgs for s in seeds]
    if jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_scalars, tasks))
    else:
        results = [_episode_scalars(c) for c in tasks]
    rows = []
    for i, c in enumerate(cfgs):
        chunk = results[i * len(seeds): (i + 1) * len(seeds)]
        rows.append(ComparisonRow(c.label, c.controller.value, list(seeds), [r[0] for r in chunk],
                                  [r[1] for r in chunk], [r[2] for r in chunk]))
    return ComparisonTable(rows)
