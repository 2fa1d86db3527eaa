import numpy as np
import pytest

from iwgvem.model import LoadingStructure, ModelParams, simulate_responses


def random_params(rng, J, K, mask=None, rho=0.3):
    """Loadings on [0.5, 2], standard normal intercepts, equicorrelated latents."""
    if mask is None:
        mask = np.ones((J, K), dtype=bool)
    A = np.where(mask, rng.uniform(0.5, 2.0, size=(J, K)), 0.0)
    B = rng.standard_normal(J)
    S = np.full((K, K), rho) + (1 - rho) * np.eye(K)
    return ModelParams(A, B, S)


def between_mask(J, K):
    mask = np.zeros((J, K), dtype=bool)
    for j in range(J):
        mask[j, j * K // J] = True
    return mask


def small_problem(seed, N=60, J=6, K=2, within=False):
    rng = np.random.default_rng(seed)
    mask = np.ones((J, K), dtype=bool) if within else between_mask(J, K)
    params = random_params(rng, J, K, mask)
    Y, theta = simulate_responses(params, N, rng)
    return Y, params, LoadingStructure(mask)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
