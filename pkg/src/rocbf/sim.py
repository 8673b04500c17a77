"""Lane-keeping simulator: tracks, the expert PID, closed-loop rollouts and
demonstration collection.

The true plant is the global kinematic bicycle driven by the identified
longitudinal model, plus bounded perturbations. Local coordinates
``(c_e, theta_e)`` are obtained by projecting the pose onto the track, whose
pieces are exact straight lines and circular arcs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .barrier import RffBarrier, RobustnessConsts, eval_h, eval_q
from .controller import InputSet, safe_control
from .datasets import DemoRecord
from .linalg import wrap_angle
from .models import CE, LANE_N, THETA_E, V, MeasurementModel, SystemModel, VehicleParams, longitudinal_rates


class SimulationDiverged(RuntimeError):
    def __init__(self, message: str, trace: "RolloutTrace"):
        super().__init__(message)
        self.trace = trace


class CollectionFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tracks


@dataclass(frozen=True, eq=False)
class Track:
    """Waypoints with the signed curvature of each piece between them.

    ``headings[i]`` is the path tangent at waypoint ``i``; together with the
    curvature it fixes the exact arc through consecutive waypoints.
    """

    waypoints: np.ndarray
    curvature: np.ndarray
    headings: np.ndarray
    closed: bool = False

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError("need at least two 2-D waypoints")
        if len(self.curvature) != len(wp) - 1 or len(self.headings) != len(wp):
            raise ValueError("curvature needs one entry per piece, headings one per waypoint")
        if np.any(np.linalg.norm(np.diff(wp, axis=0), axis=1) <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        object.__setattr__(self, "waypoints", wp)

    @property
    def n_pieces(self) -> int:
        return len(self.curvature)

    def piece_length(self, i: int) -> float:
        chord = float(np.linalg.norm(self.waypoints[i + 1] - self.waypoints[i]))
        k = self.curvature[i]
        if k == 0:
            return chord
        return 2.0 / abs(k) * math.asin(min(1.0, chord * abs(k) / 2))

    def _piece_coords(self, i: int, px: float, py: float):
        """(c_e, theta_t, s, length) of point ``(px, py)`` w.r.t. piece ``i``."""
        x0, y0 = self.waypoints[i]
        th0 = self.headings[i]
        k = float(self.curvature[i])
        if k == 0.0:
            x1, y1 = self.waypoints[i + 1]
            dx, dy = x1 - x0, y1 - y0
            length = math.hypot(dx, dy)
            wx, wy = px - x0, py - y0
            s = (dx * wx + dy * wy) / length
            ce = (dx * wy - dy * wx) / length
            return ce, math.atan2(dy, dx), s, length
        r = 1.0 / k
        cx, cy = x0 - r * math.sin(th0), y0 + r * math.cos(th0)
        rx, ry = px - cx, py - cy
        rho = math.hypot(rx, ry)
        ce = r - math.copysign(rho, k)
        phi = math.atan2(ry, rx)
        phi0 = th0 - math.copysign(math.pi / 2, k)
        swept = wrap_angle(phi - phi0) * math.copysign(1.0, k)
        tangent = phi + math.copysign(math.pi / 2, k)
        return ce, tangent, swept * abs(r), self.piece_length(i)

    def locate(self, px: float, py: float, hint: Optional[int] = None, window: int = 4):
        """Closest piece to the point; returns ``(index, c_e, theta_t)``.

        With a ``hint`` only nearby pieces are searched, so a closed track
        never jumps across to a distant section.
        """
        n = self.n_pieces
        if hint is None:
            cand = range(n)
        elif self.closed:
            cand = [(hint + j) % n for j in range(-window, window + 1)]
        else:
            cand = range(max(0, hint - window), min(n, hint + window + 1))
        best = None
        for i in cand:
            ce, tt, s, length = self._piece_coords(i, px, py)
            # distance outside the piece's arclength extent
            out = max(0.0, -s, s - length)
            key = (out, abs(ce), i)
            if best is None or key < best[0]:
                best = (key, i, ce, tt)
        _, i, ce, tt = best
        return i, ce, tt

    def pose_at(self, i: int, c_e: float = 0.0, theta_e: float = 0.0):
        """Global pose offset by ``c_e`` to the left of waypoint ``i``."""
        x, y = self.waypoints[i]
        th = self.headings[i]
        return (x - c_e * math.sin(th), y + c_e * math.cos(th), th + theta_e)


def _parse_segment(seg):
    if isinstance(seg, dict):
        kind = seg.get("type") or next(iter(seg))
        body = seg if "type" in seg else seg[kind]
        if kind == "straight":
            return "straight", float(body["length"] if isinstance(body, dict) else body), 0.0
        if kind == "arc":
            return "arc", float(body["radius"]), float(body["angle"])
        raise ValueError(f"unknown segment type {kind!r}")
    kind = seg[0]
    if kind == "straight":
        return "straight", float(seg[1]), 0.0
    if kind == "arc":
        return "arc", float(seg[1]), float(seg[2])
    raise ValueError(f"unknown segment type {kind!r}")


def make_track(segments: Sequence, spacing: float = 1.0, start=(0.0, 0.0), heading: float = 0.0,
               closed: Optional[bool] = None) -> Track:
    """Build a track from ``("straight", length)`` and ``("arc", radius, angle)``
    pieces (positive angle turns left). Waypoints are placed at equal arclength
    not exceeding ``spacing`` within each segment."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not segments:
        raise ValueError("empty track")
    pts = [np.array(start, dtype=float)]
    heads = [float(heading)]
    curv: list[float] = []
    x, y, th = float(start[0]), float(start[1]), float(heading)
    for seg in segments:
        kind, a, angle = _parse_segment(seg)
        if a <= 0:
            raise ValueError("lengths and radii must be positive")
        if kind == "straight":
            k = max(1, math.ceil(a / spacing - 1e-9))
            step = a / k
            for j in range(1, k + 1):
                pts.append(np.array([x + j * step * math.cos(th), y + j * step * math.sin(th)]))
                heads.append(th)
                curv.append(0.0)
            x, y = pts[-1]
        else:
            if angle == 0:
                raise ValueError("arc angle must be nonzero")
            r = a
            sgn = math.copysign(1.0, angle)
            arclen = r * abs(angle)
            k = max(1, math.ceil(arclen / spacing - 1e-9))
            cx, cy = x - sgn * r * math.sin(th), y + sgn * r * math.cos(th)
            phi0 = th - sgn * math.pi / 2
            for j in range(1, k + 1):
                phi = phi0 + angle * j / k
                pts.append(np.array([cx + r * math.cos(phi), cy + r * math.sin(phi)]))
                heads.append(th + angle * j / k)
                curv.append(sgn / r)
            x, y = pts[-1]
            th = th + angle
    wp = np.array(pts)
    if closed is None:
        closed = bool(np.linalg.norm(wp[-1] - wp[0]) < 1e-9)
    if closed:
        # snap the end onto the start so the loop closes exactly
        wp[-1] = wp[0]
    return Track(wp, np.array(curv), np.array(heads), closed=closed)


def stadium_track(straight: float = 40.0, radius: float = 40.0, spacing: float = 1.0) -> Track:
    return make_track(
        [("straight", straight), ("arc", radius, math.pi), ("straight", straight), ("arc", radius, math.pi)],
        spacing=spacing,
    )


def track_from_config(cfg: dict | None) -> Track:
    cfg = dict(cfg or {})
    spacing = float(cfg.get("spacing", 1.0))
    if "segments" in cfg:
        return make_track(cfg["segments"], spacing=spacing)
    return stadium_track(float(cfg.get("straight", 40.0)), float(cfg.get("radius", 40.0)), spacing)


# ---------------------------------------------------------------------------
# controllers


def expert_pid(x, gains, clamp: Optional[float] = None) -> np.ndarray:
    """``u = -(kp c_e + ktheta theta_e + kd v sin(theta_e))``, optionally clamped."""
    kp, kt, kd = gains
    v, ce, te = x[V], x[CE], x[THETA_E]
    u = -(kp * ce + kt * te + kd * v * math.sin(te))
    if clamp is not None:
        u = min(max(u, -clamp), clamp)
    return np.array([u])


@dataclass
class Observation:
    t: float
    y: np.ndarray
    x: np.ndarray  # ground truth, only for full-state experts
    w: float  # exogenous signal the controller may use (road heading rate)


@dataclass
class Action:
    u: np.ndarray
    feasible: bool = True
    q: float = float("nan")


class ExpertController:
    def __init__(self, params: VehicleParams, clamp: Optional[float] = None):
        self.gains = params.gains
        self.clamp = params.u_max if clamp is None else clamp

    def reset(self):
        pass

    def __call__(self, obs: Observation) -> Action:
        return Action(expert_pid(obs.x, self.gains, self.clamp))


class ConstantController:
    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))

    def reset(self):
        pass

    def __call__(self, obs: Observation) -> Action:
        return Action(self.u.copy())


class RocbfController:
    """Min-norm safe controller acting on the output only.

    On an infeasible step it falls back to the clamped solution when clamping
    caused the infeasibility (for one input this maximizes ``q`` over the box),
    otherwise to the last feasible input, otherwise to zero.
    """

    def __init__(self, bar: RffBarrier, consts: RobustnessConsts, sys: SystemModel,
                 meas: MeasurementModel, uset: InputSet = InputSet()):
        self.bar, self.consts, self.sys, self.meas, self.uset = bar, consts, sys, meas, uset
        self.last: Optional[np.ndarray] = None

    def reset(self):
        self.last = None

    def __call__(self, obs: Observation) -> Action:
        res = safe_control(obs.y, obs.t, self.bar, self.sys, self.meas, self.consts, self.uset, obs.w)
        if res.feasible:
            self.last = res.u.copy()
            return Action(res.u, True, res.q_value)
        if res.clamped:
            u = res.u
        elif self.last is not None:
            u = self.last.copy()
        else:
            u = np.zeros(self.sys.m)
        return Action(u, False, res.q_value)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Perturbation:
    """Time-varying model error ``F - Fhat`` and ``G - Ghat`` of bounded norm.

    The drift error acts on the speed and heading channels with Euclidean norm
    exactly ``fraction * delta_f``; the input-gain error scales the steering
    rate by at most ``fraction * delta_g`` per unit input.
    """

    fraction: float = 0.5
    delta_f: float = 0.1
    delta_g: float = 0.1
    omega_f: float = 0.7
    omega_g: float = 1.3
    phase_f: float = 0.0
    phase_g: float = 0.0

    @classmethod
    def random(cls, rng, fraction, delta_f, delta_g) -> "Perturbation":
        return cls(fraction, delta_f, delta_g,
                   omega_f=float(rng.uniform(0.2, 2.0)), omega_g=float(rng.uniform(0.2, 2.0)),
                   phase_f=float(rng.uniform(0, 2 * np.pi)), phase_g=float(rng.uniform(0, 2 * np.pi)))

    def drift(self, t: float) -> tuple[float, float]:
        a = self.fraction * self.delta_f
        ph = self.omega_f * t + self.phase_f
        return a * math.cos(ph), a * math.sin(ph)

    def gain(self, t: float) -> float:
        return self.fraction * self.delta_g * math.sin(self.omega_g * t + self.phase_g)


@dataclass
class RolloutConfig:
    dt: float = 0.02
    horizon: float = 30.0
    integrator: str = "rk4"
    ce0: float = 0.0
    theta_e0: float = 0.0
    v0: float = 0.0
    d0: float = 0.0
    start_index: int = 0
    perturbation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least dt")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.perturbation < 0:
            raise ValueError("perturbation fraction must be non-negative")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class RolloutTrace:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    h: np.ndarray
    q: np.ndarray
    feasible: np.ndarray
    pose: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    w: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def length(self) -> int:
        return len(self.t)

    @property
    def max_abs_ce(self) -> float:
        return float(np.max(np.abs(self.x[:, CE]))) if self.length else float("nan")

    @property
    def min_h(self) -> float:
        return float(np.min(self.h)) if self.length else float("nan")

    @property
    def violations(self) -> int:
        return int(np.sum(self.h < 0))

    @property
    def infeasible_steps(self) -> int:
        return int(np.sum(~self.feasible))

    def summary(self) -> dict:
        return dict(steps=self.length, max_abs_ce=self.max_abs_ce, min_h=self.min_h,
                    violations=self.violations, infeasible_steps=self.infeasible_steps)

    def save(self, path) -> None:
        p, m = self.y.shape[1], self.u.shape[1]
        cols = (["t", "v", "d", "c_e", "theta_e"] + [f"y{i}" for i in range(p)]
                + [f"u{i}" for i in range(m)] + ["h", "q", "feasible", "px", "py", "psi", "w"])
        data = np.column_stack([self.t, self.x, self.y, self.u, self.h, self.q,
                                self.feasible.astype(float), self.pose, self.w])
        lines = ["# rocbf-trace v1", " ".join(cols)]
        lines += [" ".join(repr(float(v)) for v in row) for row in data]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutTrace":
        text = Path(path).read_text().splitlines()
        if not text or text[0].strip() != "# rocbf-trace v1":
            raise ValueError(f"{path}: not a trace file")
        cols = text[1].split()
        data = np.array([[float(v) for v in ln.split()] for ln in text[2:] if ln.strip()]).reshape(-1, len(cols))
        p = sum(c.startswith("y") for c in cols)
        m = sum(c.startswith("u") for c in cols)
        o = 5
        return cls(t=data[:, 0], x=data[:, 1:5], y=data[:, o:o + p], u=data[:, o + p:o + p + m],
                   h=data[:, o + p + m], q=data[:, o + p + m + 1],
                   feasible=data[:, o + p + m + 2] != 0, pose=data[:, -4:-1], w=data[:, -1])


def _plant_rhs(s, t, u, params: VehicleParams, pert: Optional[Perturbation]):
    px, py, psi, v, d = s
    vdot, ddot = longitudinal_rates(v, d, params)
    psidot = v * u / params.wheelbase
    if pert is not None:
        ev, epsi = pert.drift(t)
        vdot += ev
        psidot += epsi + pert.gain(t) * u
    return (v * math.cos(psi), v * math.sin(psi), psidot, vdot, ddot)


def _step(s, t, u, dt, params, pert, integrator):
    if integrator == "euler":
        k = _plant_rhs(s, t, u, params, pert)
        return tuple(a + dt * b for a, b in zip(s, k))
    k1 = _plant_rhs(s, t, u, params, pert)
    k2 = _plant_rhs(tuple(a + 0.5 * dt * b for a, b in zip(s, k1)), t + 0.5 * dt, u, params, pert)
    k3 = _plant_rhs(tuple(a + 0.5 * dt * b for a, b in zip(s, k2)), t + 0.5 * dt, u, params, pert)
    k4 = _plant_rhs(tuple(a + dt * b for a, b in zip(s, k3)), t + dt, u, params, pert)
    return tuple(a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(s, k1, k2, k3, k4))


def local_state(track: Track, s, hint=None):
    i, ce, tt = track.locate(s[0], s[1], hint)
    return i, np.array([s[3], s[4], ce, wrap_angle(s[2] - tt)])


def rollout(
    track: Track,
    cfg: RolloutConfig,
    controller: Callable[[Observation], Action],
    sys: SystemModel,
    meas: MeasurementModel,
    params: Optional[VehicleParams] = None,
    barrier: Optional[tuple[RffBarrier, RobustnessConsts]] = None,
    stop_if: Optional[Callable[[np.ndarray], bool]] = None,
) -> RolloutTrace:
    """Integrate the true plant under ``controller``; the controller receives
    the output ``y`` (and ground truth only through ``Observation.x``).

    ``barrier`` (or the controller's own barrier) is evaluated along the way
    to record ``h(x)`` and ``q(u, y, t)``.
    """
    params = params or VehicleParams()
    if barrier is None and isinstance(controller, RocbfController):
        barrier = (controller.bar, controller.consts)
    if hasattr(controller, "reset"):
        controller.reset()
    pert = None
    if cfg.perturbation > 0:
        rng = np.random.default_rng(cfg.seed)
        pert = Perturbation.random(rng, cfg.perturbation, _const_bound(sys.delta_f), _const_bound(sys.delta_g))
    s = track.pose_at(cfg.start_index, cfg.ce0, cfg.theta_e0) + (cfg.v0, cfg.d0)
    hint = min(cfg.start_index, track.n_pieces - 1)
    N = cfg.steps
    T, Xs, Ys, Us, Hs, Qs, Fs, Ps, Ws = [], [], [], [], [], [], [], [], []

    def build():
        m = sys.m
        return RolloutTrace(
            t=np.array(T), x=np.array(Xs).reshape(-1, LANE_N), y=np.array(Ys).reshape(-1, meas.p),
            u=np.array(Us).reshape(-1, m), h=np.array(Hs), q=np.array(Qs),
            feasible=np.array(Fs, dtype=bool), pose=np.array(Ps).reshape(-1, 3), w=np.array(Ws),
        )

    for k in range(N):
        t = k * cfg.dt
        if not all(math.isfinite(v) for v in s):
            raise SimulationDiverged(f"non-finite state at t={t:.3f}", build())
        hint, x = local_state(track, s, hint)
        y = meas.Y(x)
        w = float(meas.X(y)[V] * track.curvature[hint])
        act = controller(Observation(t, y, x, w))
        u = np.atleast_1d(np.asarray(act.u, dtype=float))
        if barrier is not None:
            bar, consts = barrier
            hv = eval_h(x, bar)
            qv = act.q if math.isfinite(act.q) else eval_q(u, y, t, sys, meas, bar, consts, w)
        else:
            hv, qv = float("nan"), float("nan")
        T.append(t)
        Xs.append(x)
        Ys.append(y)
        Us.append(u)
        Hs.append(hv)
        Qs.append(qv)
        Fs.append(act.feasible)
        Ps.append(s[:3])
        Ws.append(w)
        if stop_if is not None and stop_if(x):
            break
        s = _step(s, t, float(u[0]), cfg.dt, params, pert, cfg.integrator)
    return build()


def _const_bound(b) -> float:
    if callable(b):
        raise ValueError("perturbation needs constant model-error bounds")
    return float(b)


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class DemoConfig:
    n_rollouts: int = 20
    ce_max: float = 1.0
    theta_max: float = 0.5
    safe_bound: float = 1.0
    seed: int = 0


def sample_initial_conditions(n: int, ce_max: float, theta_max: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-ce_max, ce_max, n), rng.uniform(-theta_max, theta_max, n)])


def collect_demos(
    track: Track,
    cfg: RolloutConfig,
    meas: MeasurementModel,
    n_rollouts: int,
    sys: SystemModel,
    params: Optional[VehicleParams] = None,
    initial=None,
    safe_bound: float = 1.0,
    seed: int = 0,
) -> tuple[list[DemoRecord], dict]:
    """Roll out the expert from ``initial`` ``(c_e, theta_e)`` pairs and keep
    every step of rollouts that stay within ``|c_e| <= safe_bound``."""
    params = params or VehicleParams()
    if initial is None:
        initial = np.zeros((n_rollouts, 2))
    initial = np.atleast_2d(np.asarray(initial, dtype=float))
    if len(initial) < n_rollouts:
        raise ValueError("not enough initial conditions")
    expert = ExpertController(params)
    records: list[DemoRecord] = []
    rejected = []
    starts = _spread_starts(track, n_rollouts)
    for r in range(n_rollouts):
        rc = RolloutConfig(dt=cfg.dt, horizon=cfg.horizon, integrator=cfg.integrator,
                           ce0=float(initial[r, 0]), theta_e0=float(initial[r, 1]),
                           v0=cfg.v0, d0=cfg.d0, start_index=starts[r],
                           perturbation=cfg.perturbation, seed=seed * 100_003 + r)
        tr = rollout(track, rc, expert, sys, meas, params,
                     stop_if=lambda x: abs(x[CE]) > safe_bound)
        if tr.length < rc.steps or tr.max_abs_ce > safe_bound:
            rejected.append(r)
            continue
        for k in range(tr.length):
            records.append(DemoRecord(u=tr.u[k].copy(), y=tr.y[k].copy(), t=float(tr.t[k]), w=float(tr.w[k])))
    if not records:
        raise CollectionFailed(f"all {n_rollouts} rollouts left the safe set")
    return records, {"rejected": rejected, "accepted": n_rollouts - len(rejected)}


def _spread_starts(track: Track, n: int) -> list[int]:
    """Start indices on straight pieces, cycling through them so demos see
    both straights and curves early on."""
    straight = [i for i in range(track.n_pieces) if track.curvature[i] == 0]
    if not straight:
        return [0] * n
    return [straight[(r * 7) % len(straight)] for r in range(n)]


# ---------------------------------------------------------------------------
# comparisons


def compare_metric(trace_rocbf: RolloutTrace, trace_expert: RolloutTrace) -> float:
    return trace_rocbf.max_abs_ce - trace_expert.max_abs_ce


def grid_points(ce_max: float, theta_max: float, n_ce: int, n_theta: int) -> np.ndarray:
    ces = np.linspace(-ce_max, ce_max, n_ce) if n_ce > 1 else np.zeros(1)
    ths = np.linspace(-theta_max, theta_max, n_theta) if n_theta > 1 else np.zeros(1)
    return np.array([(c, th) for c in ces for th in ths])


def compare_grid(track, base: RolloutConfig, points, rocbf: RocbfController, sys, meas,
                 params: Optional[VehicleParams] = None) -> np.ndarray:
    """Rows ``(c_e0, theta_e0, metric, max|c_e| rocbf, max|c_e| expert, min h)``."""
    params = params or VehicleParams()
    expert = ExpertController(params)
    rows = []
    for r, (c0, t0) in enumerate(np.asarray(points, dtype=float)):
        cfg = RolloutConfig(base.dt, base.horizon, base.integrator, float(c0), float(t0), base.v0, base.d0,
                            base.start_index, base.perturbation, base.seed * 100_003 + r)
        tr_r = rollout(track, cfg, rocbf, sys, meas, params)
        tr_e = rollout(track, cfg, expert, sys, meas, params, barrier=(rocbf.bar, rocbf.consts))
        rows.append((c0, t0, compare_metric(tr_r, tr_e), tr_r.max_abs_ce, tr_e.max_abs_ce, tr_r.min_h))
    return np.array(rows)


def save_grid(path, rows: np.ndarray) -> None:
    lines = ["# rocbf-grid v1", "c_e0 theta_e0 metric max_ce_rocbf max_ce_expert min_h_rocbf"]
    lines += [" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(rows)]
    Path(path).write_text("\n".join(lines) + "\n")
