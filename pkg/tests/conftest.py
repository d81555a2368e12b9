import numpy as np
import pytest

from gridchase.grid import random_feeder, sensitivity_matrices
from gridchase.oracle import SafetyEnvelope
from gridchase.profiles import InjectionProfile, synth_profile

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def small_case(n=6, seed=0, T=40, eta=None, pv_peak=2.5e5, cloud_rate=0.0):
    """Small feeder, profile and envelope for fast episode tests."""
    net = random_feeder(n, seed)
    prof = synth_profile(n, T + 1, dt=115.2, pv_buses=range(2, n + 1, 2), pv_peak=pv_peak,
                         seed=seed, start_hour=9.0, cloud_rate=cloud_rate, cloud_depth=0.3)
    if eta is None:
        from gridchase.profiles import compute_trace

        tr = compute_trace(sensitivity_matrices(net, warn=False), prof, 144.0)
        eta = float(np.ceil(1.05 * tr.eta_hat * 100 + 1) / 100)
    env = SafetyEnvelope.standard(n, eta=eta)
    return net, prof, env


def constant_profile(n: int, T: int, p=-2e4, q=-6e3) -> InjectionProfile:
    return InjectionProfile(6.0, np.full((T, n), p), np.full((T, n), q))


@pytest.fixture
def case6():
    return small_case()
