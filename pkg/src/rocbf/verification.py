"""Lipschitz bounds for RFF barriers and the sampling-density conditions that
certify a trained barrier.

The deterministic bounds use the exact frequency matrix ``W``:

* ``Lip(h)      <= sqrt(2/l) ||W|| ||theta||_2``
* ``Lip(grad h) <= sqrt(2/l) ||theta||_inf ||W||^2``

Lipschitz constants of the composed function ``q`` and of ``B_1, B_2, B_3`` have
no closed form here; they are estimated from sampled difference quotients and
inflated by a safety factor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .barrier import RffBarrier, RobustnessConsts, b_terms_batch, eval_h, grad_h, q_batch
from .datasets import DatasetBundle, DemoRecord
from .linalg import spectral_norm
from .models import MeasurementModel, SystemModel

INFLATION = 1.5


@dataclass
class LipschitzBounds:
    lip_h: float
    lip_grad_h: float
    w_spectral: float
    empirical_lip_q: float = 0.0
    bnd_q: float = 0.0


@dataclass
class Condition:
    name: str
    threshold: float
    value: float
    passed: bool
    detail: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.threshold - self.value


@dataclass
class VerificationReport:
    cond_unsafe: Condition
    cond_safe: Condition
    cond_dyn: Condition
    lbar_checks: list[Condition]
    bounds: LipschitzBounds
    settings: dict = field(default_factory=dict)

    @property
    def conditions(self) -> list[Condition]:
        return [self.cond_unsafe, self.cond_safe, self.cond_dyn, *self.lbar_checks]

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.conditions)

    def to_dict(self) -> dict:
        return dict(
            overall=self.overall,
            conditions=[dict(asdict(c), margin=c.margin) for c in self.conditions],
            bounds=asdict(self.bounds),
            settings=self.settings,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")

    def table(self) -> str:
        rows = [f"{'condition':<26}{'threshold':>14}{'value':>14}{'margin':>14}  result"]
        for c in self.conditions:
            rows.append(
                f"{c.name:<26}{c.threshold:>14.6g}{c.value:>14.6g}{c.margin:>14.6g}  "
                f"{'pass' if c.passed else 'FAIL'}"
            )
        rows.append(f"overall: {'pass' if self.overall else 'FAIL'}")
        return "\n".join(rows)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# analytic bounds


def rff_lip_h_bound(bar: RffBarrier) -> float:
    return bar.scale * spectral_norm(bar.W) * float(np.linalg.norm(bar.theta))


def rff_lip_grad_h_bound(bar: RffBarrier) -> float:
    return bar.scale * float(np.max(np.abs(bar.theta))) * spectral_norm(bar.W) ** 2


def rff_lip_h_high_probability(bar: RffBarrier, delta: float = 0.05) -> float:
    """Order-wise bound holding with probability ``1 - delta`` over the draw of ``W``.

    Display only: it assumes isotropic Gaussian frequencies, while the
    deterministic bound uses the drawn ``W`` itself.
    """
    ell, n = bar.ell, bar.n
    return (
        np.sqrt(2 * bar.sigma2)
        * (1 + np.sqrt(n / ell) + np.sqrt(2.0 / ell * np.log(1.0 / delta)))
        * float(np.linalg.norm(bar.theta))
    )


# ---------------------------------------------------------------------------
# sampled estimates


def _ball(rng, center, radius, count):
    """``count`` points uniform in the Euclidean ball, from one Gaussian draw.

    The first ``d`` coordinates of a uniform point on the ``(d+2)``-sphere are
    uniform in the ``d``-ball, so a single draw keeps sample prefixes nested.
    """
    center = np.asarray(center, dtype=float)
    d = center.shape[-1]
    g = rng.standard_normal((count, d + 2))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return center + radius * g[:, :d]


def _pairs_in_ball(center, radius, samples, seed):
    rng = np.random.default_rng(seed)
    d = np.asarray(center).shape[-1]
    g = rng.standard_normal((samples, 2, d + 2))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    pts = np.asarray(center, dtype=float) + radius * g[:, :, :d]
    return pts[:, 0], pts[:, 1]


def _ratios(f1, f2, x1, x2) -> np.ndarray:
    df = np.asarray(f1) - np.asarray(f2)
    num = np.abs(df) if df.ndim == 1 else np.linalg.norm(df, axis=1)
    den = np.linalg.norm(x1 - x2, axis=1)
    ok = den > 0
    return num[ok] / den[ok]


def empirical_lip_h(bar: RffBarrier, lo, hi, pairs: int = 100_000, seed: int = 0, spread: float = 0.1):
    """Largest sampled ``|h(x1) - h(x2)| / ||x1 - x2||`` over a box, with
    ``x2`` within ``spread`` (relative to the box size) of ``x1``."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    x1 = rng.uniform(lo, hi, size=(pairs, bar.n))
    x2 = x1 + spread * (hi - lo) * rng.standard_normal((pairs, bar.n))
    return float(_ratios(eval_h(x1, bar), eval_h(x2, bar), x1, x2).max())


def empirical_lip_grad_h(bar, lo, hi, pairs: int = 100_000, seed: int = 0, spread: float = 0.1):
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    x1 = rng.uniform(lo, hi, size=(pairs, bar.n))
    x2 = x1 + spread * (hi - lo) * rng.standard_normal((pairs, bar.n))
    return float(_ratios(grad_h(x1, bar), grad_h(x2, bar), x1, x2).max())


def empirical_lip_q(
    bar: RffBarrier,
    sys: SystemModel,
    meas: MeasurementModel,
    consts: RobustnessConsts,
    demo: DemoRecord,
    radius: float,
    samples: int = 20_000,
    factor: float = INFLATION,
    seed: int = 0,
) -> float:
    """Inflated max difference quotient of ``y -> q(u_i, y, t_i)`` on a ball around ``y_i``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    y1, y2 = _pairs_in_ball(demo.y, radius, samples, seed)
    q1 = q_batch(demo.u, y1, demo.t, sys, meas, bar, consts, demo.w)
    q2 = q_batch(demo.u, y2, demo.t, sys, meas, bar, consts, demo.w)
    r = _ratios(q1, q2, y1, y2)
    return factor * float(r.max()) if r.size else 0.0


def bound_q_time_variation(
    bar, sys, meas, consts, demo: DemoRecord, radius: float, samples: int = 64, horizon: float = 30.0, seed: int = 0
) -> float:
    """Spread of ``q(u_i, y, .)`` over time (or over the exogenous signal range)
    for ``y`` sampled around ``y_i``; zero for time-invariant systems."""
    if sys.time_invariant:
        return 0.0
    rng = np.random.default_rng(seed)
    ys = np.vstack([np.asarray(demo.y, float)[None], _ball(rng, demo.y, radius, 7)])
    if sys.exo_range is not None:
        lo, hi = sys.exo_range
        grid = np.concatenate([[lo, hi], rng.uniform(lo, hi, samples)])
        # one batched call: every output paired with every signal value
        Y = np.tile(ys, (len(grid), 1))
        W = np.repeat(grid, len(ys))
        vals = q_batch(demo.u, Y, demo.t, sys, meas, bar, consts, W).reshape(len(grid), len(ys))
    else:
        grid = np.concatenate([[0.0, horizon], rng.uniform(0.0, horizon, samples)])
        vals = np.array([q_batch(demo.u, ys, t, sys, meas, bar, consts) for t in grid])
    return float((vals.max(axis=0) - vals.min(axis=0)).max())


# ---------------------------------------------------------------------------
# conditions


def check_prop1(bundle: DatasetBundle, lip_h: float, gamma_unsafe: float) -> Condition:
    """Unsafe-net density: ``eps_N < gamma_unsafe / Lip_h`` (strict)."""
    threshold = np.inf if lip_h == 0 else gamma_unsafe / lip_h
    return Condition("unsafe net (eps_N)", float(threshold), float(bundle.eps_n), bool(bundle.eps_n < threshold),
                     {"lip_h": lip_h, "gamma_unsafe": gamma_unsafe})


def check_prop2(bundle: DatasetBundle, lip_h: float, gamma_safe: float) -> Condition:
    """Safe-net density: ``eps <= gamma_safe / Lip_h``."""
    threshold = np.inf if lip_h == 0 else gamma_safe / lip_h
    return Condition("safe net (eps)", float(threshold), float(bundle.eps), bool(bundle.eps <= threshold),
                     {"lip_h": lip_h, "gamma_safe": gamma_safe})


def output_net_threshold(gamma_dyn: float, bnd_q: float, lip_q: float) -> float:
    """``(gamma_dyn - Bnd_q) / Lip_q``; ``-inf`` when the numerator is not
    positive (no radius works) and ``inf`` when ``q`` is constant."""
    num = gamma_dyn - bnd_q
    if num <= 0:
        return -np.inf
    if lip_q == 0:
        return np.inf
    return num / lip_q


def check_prop3(
    bar, bundle: DatasetBundle, sys, meas, consts, gamma_dyn: float,
    samples: int = 20_000, factor: float = INFLATION, horizon: float = 30.0, seed: int = 0,
    demos: Optional[list] = None,
) -> Condition:
    """Output-net density per demonstration:
    ``eps_bar <= (gamma_dyn - Bnd_q) / Lip_q``, required for every demonstration."""
    demos = bundle.z_dyn if demos is None else demos
    eps_bar = bundle.eps_bar
    worst_thr, worst_i = np.inf, -1
    n_fail = 0
    lip_max = 0.0
    bnd_max = 0.0
    for i, rec in enumerate(demos):
        lip = empirical_lip_q(bar, sys, meas, consts, rec, eps_bar, samples, factor, seed + i)
        bnd = bound_q_time_variation(bar, sys, meas, consts, rec, eps_bar, horizon=horizon, seed=seed + i)
        lip_max, bnd_max = max(lip_max, lip), max(bnd_max, bnd)
        thr = output_net_threshold(gamma_dyn, bnd, lip)
        if not eps_bar <= thr:
            n_fail += 1
        if thr < worst_thr:
            worst_thr, worst_i = thr, i
    detail = dict(n_demos=len(demos), n_failed=n_fail, worst_demo=worst_i,
                  max_lip_q=lip_max, max_bnd_q=bnd_max, samples=samples, inflation=factor)
    if bnd_max >= gamma_dyn:
        detail["diagnostic"] = "time-variation bound Bnd_q reaches gamma_dyn"
    return Condition("output net (eps_bar)", float(worst_thr), float(eps_bar), n_fail == 0, detail)


def ball_domain_sampler(centers, radius: float) -> Callable:
    """Sampler over the union of balls of ``radius`` around ``centers``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))

    def sample(rng, count):
        c = centers[rng.integers(0, len(centers), size=count)]
        return c, radius

    return sample


def empirical_lip_b(
    bar, sys, sampler: Callable, pairs: int = 20_000, factor: float = INFLATION, seed: int = 0
) -> tuple[float, float, float]:
    """Inflated sampled Lipschitz constants of ``B_1``, ``B_2`` and ``B_3``.

    Both points of a pair are drawn from the same ball of the domain; the
    exogenous signal (if any) is drawn once per batch from its range.
    """
    rng = np.random.default_rng(seed)
    centers, radius = sampler(rng, pairs)
    d = centers.shape[1]
    g = rng.standard_normal((pairs, 2, d + 2))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    x1 = centers + radius * g[:, 0, :d]
    x2 = centers + radius * g[:, 1, :d]
    w = None
    if sys.exo_range is not None:
        w = rng.uniform(*sys.exo_range, size=pairs)
    a1, a2, a3 = b_terms_batch(x1, 0.0, sys, bar, w)
    c1, c2, c3 = b_terms_batch(x2, 0.0, sys, bar, w)
    out = []
    for p, q in ((a1, c1), (a2, c2), (a3, c3)):
        r = _ratios(p, q, x1, x2)
        out.append(factor * float(r.max()) if r.size else 0.0)
    return tuple(out)


def check_lbar(bar, sys, sampler, consts: RobustnessConsts, pairs: int = 20_000,
               factor: float = INFLATION, seed: int = 0) -> list[Condition]:
    """``Lbar_j >= Lip_{B_j}`` on the enlarged domain, for j = 1, 2, 3."""
    est = empirical_lip_b(bar, sys, sampler, pairs, factor, seed)
    lbars = (consts.lbar1, consts.lbar2, consts.lbar3)
    # threshold/value orientation keeps margin = threshold - value >= 0 on pass
    return [
        Condition(f"Lbar{j + 1} >= Lip_B{j + 1}", float(lb), float(e), bool(lb >= e), {"pairs": pairs})
        for j, (lb, e) in enumerate(zip(lbars, est))
    ]


def verify(
    bar: RffBarrier,
    bundle: DatasetBundle,
    sys: SystemModel,
    meas: MeasurementModel,
    consts: RobustnessConsts,
    gamma_safe: float,
    gamma_unsafe: float,
    gamma_dyn: float,
    q_samples: int = 20_000,
    b_pairs: int = 20_000,
    factor: float = INFLATION,
    horizon: float = 30.0,
    seed: int = 0,
) -> VerificationReport:
    """Run every validity check and collect the results."""
    w_norm = spectral_norm(bar.W)
    lip_h = rff_lip_h_bound(bar)
    lip_gh = rff_lip_grad_h_bound(bar)
    c1 = check_prop1(bundle, lip_h, gamma_unsafe)
    c2 = check_prop2(bundle, lip_h, gamma_safe)
    c3 = check_prop3(bar, bundle, sys, meas, consts, gamma_dyn, q_samples, factor, horizon, seed)
    dx = meas.delta_x_max if meas.delta_x_max is not None else max(meas.dX(r.y) for r in bundle.z_dyn)
    sampler = ball_domain_sampler(bundle.z_safe, bundle.eps + 2 * dx)
    lb = check_lbar(bar, sys, sampler, consts, b_pairs, factor, seed)
    bounds = LipschitzBounds(
        lip_h=lip_h,
        lip_grad_h=lip_gh,
        w_spectral=w_norm,
        empirical_lip_q=c3.detail["max_lip_q"],
        bnd_q=c3.detail["max_bnd_q"],
    )
    settings = dict(
        q_samples=q_samples, b_pairs=b_pairs, inflation=factor, seed=seed,
        lip_h_high_probability=rff_lip_h_high_probability(bar),
        eps=bundle.eps, eps_n=bundle.eps_n, eps_bar=bundle.eps_bar,
    )
    return VerificationReport(c1, c2, c3, lb, bounds, settings)
