"""System and measurement models with their uncertainty bounds, plus the
lane-keeping vehicle instance (longitudinal model, kinematic bicycle and the
local cross-track coordinates).

State layout of the lane-keeping instance: ``[v, d, c_e, theta_e]`` with ``v``
the speed (m/s), ``d`` the integrator state of the longitudinal PID, ``c_e`` the
cross-track error (m) and ``theta_e`` the heading error (rad). The input is
``u = tan(delta)`` with ``delta`` the steering angle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import wrap_angle

V, D, CE, THETA_E = 0, 1, 2, 3
LANE_N = 4
LANE_M = 1


def _vec(x, n: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != n:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {n}")
    return x


@dataclass(frozen=True)
class SystemModel:
    """Nominal dynamics ``x' = fhat(x, t) + ghat(x, t) u`` with error bounds.

    ``fhat`` and ``ghat`` take an optional third argument ``w``, the exogenous
    signal at time ``t`` (the path turn rate for the lane model). When ``w`` is
    not given explicitly, ``exogenous(t)`` is used if present.
    """

    n: int
    m: int
    fhat: Callable[..., np.ndarray]
    ghat: Callable[..., np.ndarray]
    # error bounds: constants or callables (x, t) -> float
    delta_f: float | Callable[..., float]
    delta_g: float | Callable[..., float]
    exogenous: Optional[Callable[[float], float]] = None
    time_invariant: bool = True
    # range of the exogenous signal, used to bound the time variation of q
    exo_range: Optional[tuple[float, float]] = None
    # optional vectorised versions taking (N, n) states and (N,) signals
    fhat_batch: Optional[Callable[..., np.ndarray]] = None
    ghat_batch: Optional[Callable[..., np.ndarray]] = None

    def _w(self, t, w):
        if w is None and self.exogenous is not None:
            return float(self.exogenous(t))
        return w

    def F(self, x, t: float = 0.0, w=None) -> np.ndarray:
        out = np.asarray(self.fhat(x, t, self._w(t, w)), dtype=float).reshape(self.n)
        return out

    def G(self, x, t: float = 0.0, w=None) -> np.ndarray:
        out = np.asarray(self.ghat(x, t, self._w(t, w)), dtype=float)
        return out.reshape(self.n, self.m)

    def F_batch(self, X, t: float = 0.0, w=None) -> np.ndarray:
        X = np.atleast_2d(X)
        w = self._w(t, w)
        if self.fhat_batch is not None:
            return np.asarray(self.fhat_batch(X, t, w), dtype=float)
        ws = np.broadcast_to(np.asarray(w if w is not None else np.nan, dtype=float), X.shape[:1])
        return np.array([self.F(x, t, None if np.isnan(wi) else wi) for x, wi in zip(X, ws)])

    def G_batch(self, X, t: float = 0.0, w=None) -> np.ndarray:
        X = np.atleast_2d(X)
        w = self._w(t, w)
        if self.ghat_batch is not None:
            return np.asarray(self.ghat_batch(X, t, w), dtype=float)
        ws = np.broadcast_to(np.asarray(w if w is not None else np.nan, dtype=float), X.shape[:1])
        return np.array([self.G(x, t, None if np.isnan(wi) else wi) for x, wi in zip(X, ws)])

    def dF(self, x, t: float = 0.0, w=None) -> float:
        return _bound(self.delta_f, "delta_f", x, t)

    def dG(self, x, t: float = 0.0, w=None) -> float:
        return _bound(self.delta_g, "delta_g", x, t)

    def dF_batch(self, X, t: float = 0.0) -> np.ndarray:
        return _bound_batch(self.delta_f, "delta_f", X, t)

    def dG_batch(self, X, t: float = 0.0) -> np.ndarray:
        return _bound_batch(self.delta_g, "delta_g", X, t)


def _bound(fn, name, *args) -> float:
    val = float(fn(*args)) if callable(fn) else float(fn)
    if val < 0:
        raise ValueError(f"{name} must be nonnegative")
    return val


def _bound_batch(fn, name, X, *args) -> np.ndarray:
    if not callable(fn):
        return np.full(len(X), _bound(fn, name))
    return np.array([_bound(fn, name, x, *args) for x in X])


@dataclass(frozen=True)
class MeasurementModel:
    """State estimate ``xhat(y)`` with error bound ``delta_x(y)``.

    ``y_true`` is the forward map used by the simulator only.
    """

    n: int
    p: int
    xhat: Callable[[np.ndarray], np.ndarray]
    # constant or callable y -> float
    delta_x: float | Callable[[np.ndarray], float]
    y_true: Callable[[np.ndarray], np.ndarray]
    lip_y_bound: float = 1.0
    # sup of delta_x over the admissible outputs, when known in closed form
    delta_x_max: Optional[float] = None
    xhat_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def X_batch(self, Ys) -> np.ndarray:
        Ys = np.atleast_2d(np.asarray(Ys, dtype=float))
        if self.xhat_batch is not None:
            return np.asarray(self.xhat_batch(Ys), dtype=float)
        return np.array([self.X(y) for y in Ys])

    def X(self, y) -> np.ndarray:
        return np.asarray(self.xhat(np.asarray(y, dtype=float)), dtype=float).reshape(self.n)

    def dX(self, y) -> float:
        return _bound(self.delta_x, "delta_x", np.asarray(y, dtype=float))

    def dX_batch(self, Ys) -> np.ndarray:
        return _bound_batch(self.delta_x, "delta_x", np.atleast_2d(Ys))

    def Y(self, x) -> np.ndarray:
        return np.asarray(self.y_true(np.asarray(x, dtype=float)), dtype=float).reshape(self.p)


def identity_measurement(n: int, delta: float = 0.0) -> MeasurementModel:
    """Exact state measurement ``y = x`` with a constant error bound."""
    return MeasurementModel(
        n=n,
        p=n,
        xhat=lambda y: np.array(y, dtype=float),
        delta_x=float(delta),
        y_true=lambda x: np.array(x, dtype=float),
        lip_y_bound=1.0,
        delta_x_max=delta,
        xhat_batch=lambda Y: np.array(Y, dtype=float),
    )


# ---------------------------------------------------------------------------
# lane-keeping vehicle


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.51
    # v' = a1 v + a2 v^2 + a3 d + a4 ;  d' = b1 v + b2
    a1: float = -1.095
    a2: float = -0.007
    a3: float = -0.152
    a4: float = 3.74
    b1: float = 3.6
    b2: float = -20.0
    # expert PID: u = -(kp c_e + ktheta theta_e + kd v sin(theta_e))
    kp: float = 0.5
    ktheta: float = 1.2
    kd: float = 0.05
    u_max: float = 1.0

    def __post_init__(self):
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")

    @property
    def gains(self) -> tuple[float, float, float]:
        return (self.kp, self.ktheta, self.kd)

    @classmethod
    def from_dict(cls, d: dict | None) -> "VehicleParams":
        d = dict(d or {})
        if "L" in d:
            d["wheelbase"] = d.pop("L")
        return cls(**d)


def longitudinal_rates(v: float, d: float, params: VehicleParams) -> tuple[float, float]:
    p = params
    vdot = p.a1 * v + p.a2 * v * v + p.a3 * d + p.a4
    ddot = p.b1 * v + p.b2
    return vdot, ddot


def eval_fhat_lane(x, t: float, params: VehicleParams, theta_dot_t: float = 0.0) -> np.ndarray:
    """Drift of the local lane-keeping model."""
    x = _vec(x, LANE_N)
    v, d, _, te = x
    vdot, ddot = longitudinal_rates(v, d, params)
    return np.array([vdot, ddot, v * np.sin(te), -float(theta_dot_t)])


def eval_ghat_lane(x, params: VehicleParams) -> np.ndarray:
    """Input column ``[0, 0, 0, v/L]`` as an ``(4, 1)`` matrix."""
    x = _vec(x, LANE_N)
    g = np.zeros((LANE_N, LANE_M))
    g[THETA_E, 0] = x[V] / params.wheelbase
    return g


def eval_global_bicycle(pose, v: float, u: float, L: float) -> tuple[float, float, float]:
    if L <= 0:
        raise ValueError("L must be positive")
    theta = pose[2]
    return (v * np.cos(theta), v * np.sin(theta), v * u / L)


def cross_track_error(pose, wp1, wp2) -> tuple[float, float]:
    """Signed lateral offset and heading error relative to segment wp1 -> wp2.

    ``c_e`` is positive when the car is to the left of the segment direction.
    ``theta_e`` is wrapped to (-pi, pi].
    """
    wp1 = np.asarray(wp1, dtype=float)
    seg = np.asarray(wp2, dtype=float) - wp1
    seg_len = float(np.hypot(seg[0], seg[1]))
    if seg_len == 0.0:
        raise ValueError("waypoints coincide")
    w = np.array([pose[0] - wp1[0], pose[1] - wp1[1]])
    # |w| sin(angle between seg and w) == cross(seg, w) / |seg|
    c_e = (seg[0] * w[1] - seg[1] * w[0]) / seg_len
    theta_t = np.arctan2(seg[1], seg[0])
    return float(c_e), float(wrap_angle(pose[2] - theta_t))


def lane_system(
    params: VehicleParams | None = None,
    delta_f: float = 0.1,
    delta_g: float = 0.1,
    exogenous: Optional[Callable[[float], float]] = None,
    exo_range: Optional[tuple[float, float]] = None,
) -> SystemModel:
    """The identified lane-keeping model with constant error bounds."""
    params = params or VehicleParams()

    def fhat(x, t, w=None):
        return eval_fhat_lane(x, t, params, 0.0 if w is None else w)

    def ghat(x, t, w=None):
        return eval_ghat_lane(x, params)

    def fhat_batch(X, t, w=None):
        v, d, te = X[:, V], X[:, D], X[:, THETA_E]
        vdot, ddot = longitudinal_rates(v, d, params)
        wv = np.zeros_like(v) if w is None else np.broadcast_to(np.asarray(w, dtype=float), v.shape)
        return np.stack([vdot, ddot, v * np.sin(te), -wv], axis=1)

    def ghat_batch(X, t, w=None):
        g = np.zeros((X.shape[0], LANE_N, LANE_M))
        g[:, THETA_E, 0] = X[:, V] / params.wheelbase
        return g

    return SystemModel(
        n=LANE_N,
        m=LANE_M,
        fhat=fhat,
        ghat=ghat,
        delta_f=float(delta_f),
        delta_g=float(delta_g),
        exogenous=exogenous,
        time_invariant=exo_range is None or exo_range == (0.0, 0.0),
        exo_range=exo_range,
        fhat_batch=fhat_batch,
        ghat_batch=ghat_batch,
    )


@dataclass(frozen=True)
class SyntheticMeasurement:
    """Redundant, deterministically corrupted reads of the cross-track error.

    ``y = [v, d, c_e + e_0, theta_e, c_e + e_1, ..., c_e + e_r]`` where
    ``e_k = amplitude * sin(freq_k * c_e + phase_k)``. The estimate averages
    all ``r + 1`` reads of ``c_e``, so its error never exceeds ``amplitude``.
    """

    n_extra: int = 2
    amplitude: float = 0.05
    delta_x: float = 0.1
    freqs: tuple[float, ...] = field(default=(3.0, 5.0, 7.0))
    phases: tuple[float, ...] = field(default=(0.3, 1.1, 2.0))

    def __post_init__(self):
        if self.amplitude > self.delta_x:
            raise ValueError("amplitude must not exceed delta_x")
        if len(self.freqs) < self.n_extra + 1 or len(self.phases) < self.n_extra + 1:
            raise ValueError("need one frequency and phase per c_e read")

    @property
    def p(self) -> int:
        return LANE_N + self.n_extra

    def errors(self, ce: float) -> np.ndarray:
        k = self.n_extra + 1
        return self.amplitude * np.sin(np.asarray(self.freqs[:k]) * ce + np.asarray(self.phases[:k]))

    def y_true(self, x) -> np.ndarray:
        x = _vec(x, LANE_N)
        e = self.errors(x[CE])
        y = np.empty(self.p)
        y[:LANE_N] = x
        y[CE] = x[CE] + e[0]
        y[LANE_N:] = x[CE] + e[1:]
        return y

    def xhat(self, y) -> np.ndarray:
        y = _vec(y, self.p, "y")
        x = y[:LANE_N].copy()
        x[CE] = (y[CE] + y[LANE_N:].sum()) / (self.n_extra + 1)
        return x

    def xhat_batch(self, Ys) -> np.ndarray:
        Ys = np.asarray(Ys, dtype=float)
        X = Ys[:, :LANE_N].copy()
        X[:, CE] = (Ys[:, CE] + Ys[:, LANE_N:].sum(axis=1)) / (self.n_extra + 1)
        return X

    def lip_y(self) -> float:
        # Jacobian columns have disjoint support, so the spectral norm is the
        # largest column norm; only the c_e column differs from a unit vector.
        k = self.n_extra + 1
        slopes = 1.0 + self.amplitude * np.asarray(self.freqs[:k])
        return float(max(1.0, np.sqrt(np.sum(slopes**2))))

    def model(self) -> MeasurementModel:
        dx = float(self.delta_x)
        return MeasurementModel(
            n=LANE_N,
            p=self.p,
            xhat=self.xhat,
            delta_x=dx,
            y_true=self.y_true,
            lip_y_bound=self.lip_y(),
            delta_x_max=dx,
            xhat_batch=self.xhat_batch,
        )


def cruise_equilibrium(params: VehicleParams | None = None) -> tuple[float, float]:
    """Speed and drive state ``(v, d)`` at which the longitudinal model is at rest."""
    p = params or VehicleParams()
    v = -p.b2 / p.b1
    d = -(p.a1 * v + p.a2 * v * v + p.a4) / p.a3
    return v, d
