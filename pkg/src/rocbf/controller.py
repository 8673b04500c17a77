"""Minimum-norm safe output-feedback control.

With Euclidean norms the constraint is ``q(u) = A + <b, u> - kappa ||u||``, so
the minimum-norm feasible input points along ``b`` and has a closed form.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .barrier import RffBarrier, RobustnessConsts, compute_b_terms
from .models import MeasurementModel, SystemModel

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class InputSet:
    kind: str = "unbounded"
    radius: float = np.inf
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("unbounded", "ball", "box"):
            raise ValueError(f"unknown input set kind {self.kind!r}")
        if self.kind == "ball" and not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise ValueError("box needs lower < upper componentwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)

    @classmethod
    def ball(cls, radius: float) -> "InputSet":
        return cls("ball", radius=float(radius))

    @classmethod
    def box(cls, lower, upper) -> "InputSet":
        return cls("box", lower=lower, upper=upper)

    @property
    def bounded(self) -> bool:
        return self.kind != "unbounded"

    def project(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        if self.kind == "ball":
            nu = np.linalg.norm(u)
            return u if nu <= self.radius else u * (self.radius / nu)
        return u

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))
        if self.kind == "ball":
            return bool(np.linalg.norm(u) <= self.radius + tol)
        return True


@dataclass
class SafeControlResult:
    u: np.ndarray
    q_value: float
    feasible: bool
    clamped: bool = False


@dataclass(frozen=True)
class ConstraintCoeffs:
    """``q(u) = A + <b, u> - kappa ||u||``."""

    A: float
    b: np.ndarray
    kappa: float

    def q(self, u) -> float:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(self.A + self.b @ u - self.kappa * np.linalg.norm(u))


def constraint_coeffs(y, t, bar: RffBarrier, sys: SystemModel, meas: MeasurementModel,
                      consts: RobustnessConsts, w=None) -> ConstraintCoeffs:
    x = meas.X(y)
    bt = compute_b_terms(x, t, sys, bar, w)
    dx = meas.dX(y)
    A = bt.b1 - consts.lbar1 * dx
    kappa = -bt.b3 + (consts.lbar2 + consts.lbar3) * dx
    b = np.asarray(bt.b2, dtype=float)
    if not (np.isfinite(A) and np.isfinite(kappa) and np.all(np.isfinite(b))):
        raise FloatingPointError("non-finite barrier terms")
    return ConstraintCoeffs(float(A), b, float(kappa))


def solve_min_norm(c: ConstraintCoeffs, uset: InputSet = InputSet()) -> SafeControlResult:
    m = c.b.shape[0]
    if c.A >= 0:
        return SafeControlResult(np.zeros(m), c.A, True)
    bn = float(np.linalg.norm(c.b))
    if bn > c.kappa:
        u = (-c.A / (bn - c.kappa)) * c.b / bn
    else:
        return SafeControlResult(np.zeros(m), c.A, False)
    clamped = False
    if uset.bounded and not uset.contains(u):
        u = uset.project(u)
        clamped = True
    qv = c.q(u)
    return SafeControlResult(u, qv, bool(qv >= -FEAS_TOL), clamped)


def safe_control(y, t, bar, sys, meas, consts, uset: InputSet = InputSet(), w=None) -> SafeControlResult:
    """Minimum-norm input with ``q(u, y, t) >= 0``; infeasibility is reported, not raised."""
    return solve_min_norm(constraint_coeffs(y, t, bar, sys, meas, consts, w), uset)


def grid_min_norm(c: ConstraintCoeffs, uset: InputSet, resolution: float = 1e-3,
                  extent: Optional[float] = None) -> SafeControlResult:
    """Exhaustive search for the smallest-norm grid point with ``q >= 0``."""
    m = c.b.shape[0]
    if m > 2:
        raise NotImplementedError("grid oracle supports m <= 2")
    if uset.kind == "box":
        # integer multiples of the resolution, so u = 0 is always a grid point
        axes = [
            np.unique(np.concatenate([
                resolution * np.arange(np.ceil(lo / resolution), np.floor(hi / resolution) + 1), [lo, hi]
            ]))
            for lo, hi in zip(uset.lower, uset.upper)
        ]
    else:
        r = uset.radius if uset.kind == "ball" else extent
        if r is None or not np.isfinite(r):
            raise ValueError("unbounded input set needs a finite grid extent")
        k = int(np.ceil(r / resolution))
        ax = resolution * np.arange(-k, k + 1)
        axes = [ax] * m
    U = np.array(list(itertools.product(*axes))) if m == 2 else axes[0][:, None]
    if uset.kind == "ball":
        U = U[np.linalg.norm(U, axis=1) <= uset.radius + 1e-12]
    qs = c.A + U @ c.b - c.kappa * np.linalg.norm(U, axis=1)
    ok = qs >= 0
    if not ok.any():
        best = int(np.argmax(qs))
        return SafeControlResult(U[best], float(qs[best]), False)
    norms = np.where(ok, np.linalg.norm(U, axis=1), np.inf)
    best = int(np.argmin(norms))
    return SafeControlResult(U[best], float(qs[best]), True)


def grid_oracle(y, t, bar, sys, meas, consts, uset: InputSet, resolution: float = 1e-3,
                extent: Optional[float] = None, w=None) -> SafeControlResult:
    c = constraint_coeffs(y, t, bar, sys, meas, consts, w)
    return grid_min_norm(c, uset, resolution, extent)
