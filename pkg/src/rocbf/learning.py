"""Hinge-relaxed training of the barrier weights.

With the feature map frozen, ``h`` and ``grad h`` are linear in ``theta`` and the
relaxed objective

    ||theta||^2 + lambda_s sum [gamma_safe - h(x_i)]_+
                + lambda_u sum [h(x_i) + gamma_unsafe]_+
                + lambda_d sum [gamma_dyn - q(u_i, y_i, t_i)]_+

is convex. Every data-dependent quantity is precomputed once in
``TrainingProblem`` so that an iteration is a handful of matrix products.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .barrier import RffBarrier, RobustnessConsts, feature_jacobian, features
from .datasets import DatasetBundle
from .models import MeasurementModel, SystemModel

log = logging.getLogger(__name__)

FAMILIES = ("safe", "unsafe", "dyn")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, theta: np.ndarray, iteration: int):
        super().__init__(message)
        self.theta = theta
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    gamma_safe: float = 0.05
    gamma_unsafe: float = 0.05
    gamma_dyn: float = 0.01
    lambda_s: float = 100.0
    lambda_u: float = 100.0
    lambda_d: float = 100.0
    optimizer: str = "adam"
    lr: float = 0.01
    # step size is lr / (1 + iteration / lr_decay); 0 disables decay
    lr_decay: float = 2000.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    max_iters: int = 20000
    batch_size: Optional[int] = None
    tol: float = 1e-10
    patience: int = 200
    seed: int = 0
    # replace <B2, u_i> by ||B2|| (unit input ball); only valid without uncertainty
    sup_over_unit_ball: bool = False

    def __post_init__(self):
        if min(self.gamma_safe, self.gamma_unsafe, self.gamma_dyn) <= 0:
            raise ValueError("margins gamma_* must be positive")
        if min(self.lambda_s, self.lambda_u, self.lambda_d) < 0:
            raise ValueError("lambda_* must be nonnegative")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    final_loss: float
    violations: dict
    worst_margin: dict
    sizes: dict
    iterations: int = 0
    wall_time: float = 0.0
    loss_trace: list = field(default_factory=list, repr=False)

    @property
    def violation_fraction(self) -> float:
        total = sum(self.sizes.values())
        return sum(self.violations.values()) / total if total else 0.0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("loss_trace")
        d["violation_fraction"] = self.violation_fraction
        return d


class TrainingProblem:
    """Linearised data terms for a fixed feature map.

    For demonstration ``i`` with ``x_i = xhat(y_i)``:
    ``q_i(theta) = c_i . theta - r_i ||M_i theta|| + s ||P_i theta|| - p_i``
    where ``M_i = D phi(x_i)^T``, ``c_i = D phi(x_i) (F + G u_i) + a phi(x_i)``,
    ``r_i = dF + dG ||u_i||`` and ``p_i`` is the measurement penalty. The
    ``P_i`` term is only used in unit-ball supremum mode.
    """

    def __init__(
        self,
        bundle: DatasetBundle,
        sys: SystemModel,
        meas: MeasurementModel,
        bar: RffBarrier,
        consts: RobustnessConsts,
        cfg: TrainConfig,
    ):
        self.cfg = cfg
        self.ell = bar.ell
        self.Phi_s = features(bundle.z_safe_buffered.reshape(-1, bar.n), bar)
        self.Phi_u = features(bundle.z_unsafe.reshape(-1, bar.n), bar)
        N = len(bundle.z_dyn)
        self.C = np.zeros((N, bar.ell))
        self.M = np.zeros((N, bar.n, bar.ell))
        self.P = np.zeros((N, sys.m, bar.ell))
        self.r = np.zeros(N)
        self.pen = np.zeros(N)
        sup_mode = cfg.sup_over_unit_ball
        for i, rec in enumerate(bundle.z_dyn):
            x = meas.X(rec.y)
            u = np.atleast_1d(np.asarray(rec.u, dtype=float))
            J = feature_jacobian(x, bar)
            F, G = sys.F(x, rec.t, rec.w), sys.G(x, rec.t, rec.w)
            dF, dG, dX = sys.dF(x, rec.t), sys.dG(x, rec.t), meas.dX(rec.y)
            un = float(np.linalg.norm(u))
            if sup_mode:
                if dF or dG or dX:
                    raise ValueError("unit-ball supremum mode requires zero uncertainty bounds")
                self.C[i] = J @ F + bar.alpha_slope * features(x, bar)
                self.P[i] = G.T @ J.T
            else:
                self.C[i] = J @ (F + G @ u) + bar.alpha_slope * features(x, bar)
            self.M[i] = J.T
            self.r[i] = dF + dG * un
            self.pen[i] = (consts.lbar1 + (consts.lbar2 + consts.lbar3) * un) * dX
        self.sup_mode = sup_mode
        self.sizes = {"safe": len(self.Phi_s), "unsafe": len(self.Phi_u), "dyn": N}

    # -- values ------------------------------------------------------------
    def h_safe(self, theta):
        return self.Phi_s @ theta

    def h_unsafe(self, theta):
        return self.Phi_u @ theta

    def q_dyn(self, theta):
        if len(self.C) == 0:
            return np.zeros(0)
        q = self.C @ theta - self.r * np.linalg.norm(self.M @ theta, axis=1) - self.pen
        if self.sup_mode:
            q = q + np.linalg.norm(self.P @ theta, axis=1)
        return q

    def margins(self, theta) -> dict:
        c = self.cfg
        return {
            "safe": self.h_safe(theta) - c.gamma_safe,
            "unsafe": -c.gamma_unsafe - self.h_unsafe(theta),
            "dyn": self.q_dyn(theta) - c.gamma_dyn,
        }

    def loss(self, theta) -> float:
        c = self.cfg
        m = self.margins(theta)
        total = float(theta @ theta)
        for fam, lam in (("safe", c.lambda_s), ("unsafe", c.lambda_u), ("dyn", c.lambda_d)):
            total += lam * float(np.maximum(-m[fam], 0.0).sum())
        return total

    def subgradient(self, theta, idx: Optional[dict] = None) -> np.ndarray:
        """Subgradient of the loss; ``idx`` restricts each family to a batch
        whose contribution is rescaled to the full family size."""
        c = self.cfg
        g = 2.0 * theta

        def pick(fam, n):
            if idx is None:
                return slice(None), 1.0
            sel = idx[fam]
            return sel, (n / len(sel) if len(sel) else 0.0)

        sel, w = pick("safe", self.sizes["safe"])
        Phi = self.Phi_s[sel]
        act = Phi @ theta < c.gamma_safe
        g -= c.lambda_s * w * Phi[act].sum(axis=0)

        sel, w = pick("unsafe", self.sizes["unsafe"])
        Phi = self.Phi_u[sel]
        act = Phi @ theta > -c.gamma_unsafe
        g += c.lambda_u * w * Phi[act].sum(axis=0)

        if self.sizes["dyn"]:
            sel, w = pick("dyn", self.sizes["dyn"])
            C, M, r, pen = self.C[sel], self.M[sel], self.r[sel], self.pen[sel]
            Mt = M @ theta
            nrm = np.linalg.norm(Mt, axis=1)
            q = C @ theta - r * nrm - pen
            if self.sup_mode:
                P = self.P[sel]
                Pt = P @ theta
                pn = np.linalg.norm(Pt, axis=1)
                q = q + pn
            act = q < c.gamma_dyn
            if np.any(act):
                safe_n = np.where(nrm > 0, nrm, 1.0)
                unit = np.where((nrm > 0)[:, None], Mt / safe_n[:, None], 0.0)
                dq = C[act] - r[act, None] * np.einsum("inl,in->il", M[act], unit[act])
                if self.sup_mode:
                    safe_p = np.where(pn > 0, pn, 1.0)
                    punit = np.where((pn > 0)[:, None], Pt / safe_p[:, None], 0.0)
                    dq = dq + np.einsum("iml,im->il", P[act], punit[act])
                g -= c.lambda_d * w * dq.sum(axis=0)
        return g

    def check(self, theta) -> TrainReport:
        m = self.margins(theta)
        violations = {f: int((m[f] < 0).sum()) for f in FAMILIES}
        worst = {f: (float(m[f].min()) if m[f].size else None) for f in FAMILIES}
        return TrainReport(
            final_loss=self.loss(theta),
            violations=violations,
            worst_margin=worst,
            sizes=dict(self.sizes),
        )


def loss(theta, bundle, sys, meas, bar, consts, cfg) -> float:
    return TrainingProblem(bundle, sys, meas, bar, consts, cfg).loss(np.asarray(theta, dtype=float))


def loss_subgradient(theta, bundle, sys, meas, bar, consts, cfg) -> np.ndarray:
    return TrainingProblem(bundle, sys, meas, bar, consts, cfg).subgradient(np.asarray(theta, dtype=float))


def check_constraints(bar, bundle, sys, meas, consts, cfg) -> TrainReport:
    """Exact per-family violation counts and worst margins for ``bar.theta``."""
    return TrainingProblem(bundle, sys, meas, bar, consts, cfg).check(bar.theta)


def _batches(rng, sizes: dict, batch: int) -> dict:
    return {
        f: (rng.choice(n, size=min(batch, n), replace=False) if n else np.zeros(0, dtype=int))
        for f, n in sizes.items()
    }


def optimize(problem: TrainingProblem, theta0=None, cfg: Optional[TrainConfig] = None):
    """Run the first-order method; returns (best theta, loss trace, iterations)."""
    cfg = cfg or problem.cfg
    theta = np.zeros(problem.ell) if theta0 is None else np.array(theta0, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    cur = problem.loss(theta)
    best, best_theta = cur, theta.copy()
    trace = [cur]
    last_improvement_best = cur
    since = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        idx = _batches(rng, problem.sizes, cfg.batch_size) if cfg.batch_size else None
        g = problem.subgradient(theta, idx)
        lr = cfg.lr / (1.0 + it / cfg.lr_decay) if cfg.lr_decay else cfg.lr
        if cfg.optimizer == "adam":
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * g * g
            mh = m1 / (1 - cfg.beta1**it)
            vh = m2 / (1 - cfg.beta2**it)
            step = lr * mh / (np.sqrt(vh) + cfg.epsilon_adam)
        else:
            step = lr * g
        new = theta - step
        cur = problem.loss(new)
        if not np.isfinite(cur) or cur > 1e12:
            raise TrainingDiverged(f"loss {cur!r} at iteration {it}", theta, it)
        theta = new
        trace.append(cur)
        if cur < best:
            best, best_theta = cur, theta.copy()
        since += 1
        if since >= cfg.patience:
            if last_improvement_best - best < cfg.tol:
                break
            last_improvement_best = best
            since = 0
    return best_theta, trace, it


def train(bundle, sys, meas, bar_init: RffBarrier, consts, cfg: TrainConfig):
    """Fit ``theta`` for the frozen features of ``bar_init``.

    Returns the trained barrier (the lowest-loss iterate) and its report.
    """
    t0 = time.perf_counter()
    problem = TrainingProblem(bundle, sys, meas, bar_init, consts, cfg)
    theta, trace, iters = optimize(problem, np.zeros(bar_init.ell), cfg)
    report = problem.check(theta)
    report.iterations = iters
    report.wall_time = time.perf_counter() - t0
    report.loss_trace = trace
    log.info(
        "trained %d features in %d iterations: loss %.4g, violations %s",
        bar_init.ell, iters, report.final_loss, report.violations,
    )
    return bar_init.with_theta(theta), report
