"""Stage functions that turn a configuration dict into artifacts.

Each stage is a plain function so the CLI, the tests and notebooks share one
code path. Seeds for every random draw derive from ``cfg["seed"]``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .barrier import RffBarrier, RobustnessConsts
from .controller import InputSet
from .datasets import BpdConfig, DatasetBundle, DemoRecord, build_bundle
from .learning import TrainConfig, TrainReport, train
from .models import MeasurementModel, SyntheticMeasurement, SystemModel, VehicleParams, cruise_equilibrium, lane_system
from .sim import (
    ExpertController,
    RocbfController,
    RolloutConfig,
    RolloutTrace,
    Track,
    collect_demos,
    compare_grid,
    grid_points,
    rollout,
    sample_initial_conditions,
    track_from_config,
)
from .verification import VerificationReport, verify

log = logging.getLogger(__name__)

# offsets that give each stage its own random stream
SEED_DEMOS = 0
SEED_DATA = 1
SEED_FEATURES = 2
SEED_TRAIN = 3
SEED_VERIFY = 4
SEED_EVAL = 5


@dataclass
class LaneSetup:
    params: VehicleParams
    sys: SystemModel
    meas: MeasurementModel
    track: Track
    v0: float
    d0: float


def setup(cfg: dict) -> LaneSetup:
    params = VehicleParams.from_dict(cfg["vehicle"])
    m = cfg["model"]
    exo = m.get("exo_range")
    sys = lane_system(params, m["delta_f"], m["delta_g"], exo_range=tuple(exo) if exo else None)
    ms = cfg["measurement"]
    meas = SyntheticMeasurement(n_extra=ms["n_extra"], amplitude=ms["amplitude"], delta_x=ms["delta_x"]).model()
    track = track_from_config(cfg["track"])
    v0, d0 = cruise_equilibrium(params) if cfg["simulation"]["start"] == "cruise" else (0.0, 0.0)
    return LaneSetup(params, sys, meas, track, v0, d0)


def _rollout_cfg(cfg: dict, env: LaneSetup, horizon: Optional[float] = None, **kw) -> RolloutConfig:
    s = cfg["simulation"]
    return RolloutConfig(
        dt=s["dt"],
        horizon=s["horizon"] if horizon is None else horizon,
        integrator=s["integrator"],
        v0=env.v0,
        d0=env.d0,
        perturbation=s["perturbation"],
        **kw,
    )


def stage_collect(cfg: dict, env: LaneSetup) -> tuple[list[DemoRecord], dict]:
    d = cfg["demos"]
    seed = cfg["seed"] * 10 + SEED_DEMOS
    n = int(d["n_rollouts"])
    ics = sample_initial_conditions(n, d["ce_max"], d["theta_max"], seed)
    base = _rollout_cfg(cfg, env, horizon=d.get("horizon") or cfg["simulation"]["horizon"])
    records, info = collect_demos(env.track, base, env.meas, n, env.sys, env.params, ics, d["safe_bound"], seed)
    log.info("collected %d records from %d accepted rollouts", len(records), info["accepted"])
    return records, info


def stage_datasets(cfg: dict, env: LaneSetup, records: list[DemoRecord]) -> DatasetBundle:
    d, tr = cfg["datasets"], cfg["training"]
    bpd = BpdConfig(k=int(d["k"]), eta=d["eta"], fraction=None if d["eta"] is not None else d["fraction"])
    bundle = build_bundle(
        records, env.meas, bpd, tr["gamma_safe"], tr["gamma_unsafe"], d["l_h"],
        sigma_layer=d["sigma_layer"], augment_copies=int(d["augment_copies"]), coords=d["coords"],
        thin_cell=d["thin_cell"], max_points=d.get("max_points"), seed=cfg["seed"] * 10 + SEED_DATA,
    )
    log.info("datasets: %d dyn, %d safe (%d buffered), %d unsafe",
             len(bundle.z_dyn), len(bundle.z_safe), len(bundle.z_safe_buffered), len(bundle.z_unsafe))
    return bundle


def consts_from(cfg: dict) -> RobustnessConsts:
    c = cfg["consts"]
    return RobustnessConsts(c["lbar1"], c["lbar2"], c["lbar3"])


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["training"])
    return TrainConfig(seed=cfg["seed"] * 10 + SEED_TRAIN, **t)


def stage_train(cfg: dict, env: LaneSetup, bundle: DatasetBundle) -> tuple[RffBarrier, RobustnessConsts, TrainReport]:
    b = cfg["barrier"]
    bar0 = RffBarrier.sample(
        env.sys.n, int(b["ell"]), b["sigma2"], b["alpha_slope"],
        seed=cfg["seed"] * 10 + SEED_FEATURES, freq_scale=b["freq_scale"],
    )
    consts = consts_from(cfg)
    bar, report = train(bundle, env.sys, env.meas, bar0, consts, train_config(cfg))
    return bar, consts, report


def stage_verify(cfg: dict, env: LaneSetup, bar, consts, bundle) -> VerificationReport:
    v, t = cfg["verification"], cfg["training"]
    return verify(
        bar, bundle, env.sys, env.meas, consts, t["gamma_safe"], t["gamma_unsafe"], t["gamma_dyn"],
        q_samples=int(v["q_samples"]), b_pairs=int(v["b_pairs"]), factor=v["inflation"],
        horizon=v["horizon"], seed=cfg["seed"] * 10 + SEED_VERIFY,
    )


def input_set(env: LaneSetup) -> InputSet:
    u = env.params.u_max
    return InputSet.box([-u], [u])


@dataclass
class Evaluation:
    rows: list = field(default_factory=list)
    h_tolerance: float = 0.02
    safe_bound: float = 1.0
    wall_time: float = 0.0

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def successes(self) -> int:
        return sum(r["success"] for r in self.rows)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    def to_dict(self) -> dict:
        return dict(n=self.n, successes=self.successes, success_rate=self.success_rate,
                    h_tolerance=self.h_tolerance, safe_bound=self.safe_bound,
                    wall_time=self.wall_time, rollouts=self.rows)


def evaluation_points(cfg: dict) -> np.ndarray:
    e = cfg["evaluation"]
    return sample_initial_conditions(int(e["n_rollouts"]), e["ce_max"], e["theta_max"],
                                     cfg["seed"] * 10 + SEED_EVAL)


def stage_evaluate(cfg: dict, env: LaneSetup, bar, consts, keep_traces: int = 0):
    """Closed-loop safe-controller rollouts from random initial conditions.

    A rollout succeeds when ``min_t h >= -h_tolerance`` and ``max_t |c_e|``
    stays within the safe bound. Returns the evaluation and the first
    ``keep_traces`` traces.
    """
    e = cfg["evaluation"]
    t0 = time.perf_counter()
    ctrl = RocbfController(bar, consts, env.sys, env.meas, input_set(env))
    pts = evaluation_points(cfg)
    rng = np.random.default_rng(cfg["seed"] * 10 + SEED_EVAL + 1)
    starts = rng.integers(0, env.track.n_pieces, size=len(pts))
    ev = Evaluation(h_tolerance=e["h_tolerance"], safe_bound=e["safe_bound"])
    traces: list[RolloutTrace] = []
    for r, ((c0, th0), st) in enumerate(zip(pts, starts)):
        rc = _rollout_cfg(cfg, env, ce0=float(c0), theta_e0=float(th0), start_index=int(st),
                          seed=cfg["seed"] * 100_003 + 7919 * (r + 1))
        tr = rollout(env.track, rc, ctrl, env.sys, env.meas, env.params)
        ok = tr.min_h >= -e["h_tolerance"] and tr.max_abs_ce <= e["safe_bound"]
        ev.rows.append(dict(ce0=float(c0), theta_e0=float(th0), start_index=int(st), h0=float(tr.h[0]),
                            success=bool(ok), **tr.summary()))
        if r < keep_traces:
            traces.append(tr)
    ev.wall_time = time.perf_counter() - t0
    log.info("evaluation: %d/%d rollouts safe", ev.successes, ev.n)
    return ev, traces


def stage_compare(cfg: dict, env: LaneSetup, bar, consts) -> np.ndarray:
    c = cfg["compare"]
    pts = grid_points(c["ce_max"], c["theta_max"], int(c["n_ce"]), int(c["n_theta"]))
    ctrl = RocbfController(bar, consts, env.sys, env.meas, input_set(env))
    base = _rollout_cfg(cfg, env, seed=cfg["seed"])
    return compare_grid(env.track, base, pts, ctrl, env.sys, env.meas, env.params)


def expert_trace(cfg: dict, env: LaneSetup, ce0: float, theta_e0: float, barrier=None, seed: int = 0):
    rc = _rollout_cfg(cfg, env, ce0=ce0, theta_e0=theta_e0, seed=seed)
    return rollout(env.track, rc, ExpertController(env.params), env.sys, env.meas, env.params, barrier=barrier)
