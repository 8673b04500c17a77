"""Small numerical helpers shared across modules."""

from __future__ import annotations

import numpy as np


class ConvergenceError(ArithmeticError):
    """Raised when an iterative method fails to reach its tolerance."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


def spectral_norm(A, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    The iteration stops once the relative change of the singular value estimate
    drops below ``tol``. A ``ConvergenceError`` carrying the iteration count is
    raised if that does not happen within ``max_iter`` steps.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.size == 0 or not np.any(A):
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    sigma_old = 0.0
    for it in range(1, max_iter + 1):
        Ax = A @ x
        sigma = float(np.linalg.norm(Ax))
        if sigma == 0.0:
            # started orthogonal to the row space; restart from a fresh vector
            x = rng.standard_normal(A.shape[1])
            x /= np.linalg.norm(x)
            continue
        x = A.T @ Ax
        x /= np.linalg.norm(x)
        if abs(sigma - sigma_old) <= tol * sigma:
            # one more product with the converged direction
            return float(np.linalg.norm(A @ x))
        sigma_old = sigma
    raise ConvergenceError(
        f"power iteration did not converge within {max_iter} iterations", max_iter
    )


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)
