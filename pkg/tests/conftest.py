import numpy as np
import pytest

from rocbf.barrier import RffBarrier
from rocbf.models import SystemModel, identity_measurement

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_barrier(rng, n=3, ell=20, sigma2=1.0, alpha=1.0) -> RffBarrier:
    return RffBarrier(
        W=rng.standard_normal((ell, n)) * np.sqrt(sigma2),
        b=rng.uniform(0, 2 * np.pi, ell),
        theta=rng.standard_normal(ell),
        sigma2=sigma2,
        alpha_slope=alpha,
    )


def linear_system(A, Bm, delta_f=0.0, delta_g=0.0) -> SystemModel:
    """``x' = A x + B u`` with constant error bounds."""
    A = np.asarray(A, dtype=float)
    Bm = np.asarray(Bm, dtype=float)
    n, m = Bm.shape
    return SystemModel(
        n=n,
        m=m,
        fhat=lambda x, t, w=None: A @ x,
        ghat=lambda x, t, w=None: Bm,
        delta_f=delta_f,
        delta_g=delta_g,
        fhat_batch=lambda X, t, w=None: X @ A.T,
        ghat_batch=lambda X, t, w=None: np.broadcast_to(Bm, (X.shape[0], n, m)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def exact_meas():
    return identity_measurement(3, 0.0)
