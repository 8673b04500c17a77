import math

import numpy as np
import pytest

from conftest import linear_system, random_barrier
from rocbf.barrier import RffBarrier, RobustnessConsts, eval_h, eval_q, features
from rocbf.datasets import DatasetBundle, DemoRecord
from rocbf.learning import (
    TrainConfig,
    TrainingProblem,
    check_constraints,
    loss,
    loss_subgradient,
    optimize,
    train,
)
from rocbf.models import MeasurementModel, identity_measurement


def make_bundle(safe, unsafe, demos):
    safe = np.asarray(safe, float)
    return DatasetBundle(z_dyn=list(demos), z_safe=safe, z_unsafe=np.asarray(unsafe, float),
                         z_safe_buffered=safe, eps=0.1, eps_n=0.1, sigma_layer=0.05, eps_bar=0.1)


def noisy_identity(n, delta):
    return MeasurementModel(n=n, p=n, xhat=lambda y: np.array(y, float), delta_x=delta,
                            y_true=lambda x: np.array(x, float), lip_y_bound=1.0, delta_x_max=delta)


def random_instance(rng, n=2, m=1, ell=12, n_safe=8, n_unsafe=6, n_dyn=7):
    sys = linear_system(rng.normal(size=(n, n)), rng.normal(size=(n, m)), 0.1, 0.1)
    meas = noisy_identity(n, 0.1)
    bar = random_barrier(rng, n=n, ell=ell)
    demos = [DemoRecord(rng.normal(size=m), rng.normal(size=n), 0.0) for _ in range(n_dyn)]
    bundle = make_bundle(rng.normal(size=(n_safe, n)), rng.normal(size=(n_unsafe, n)) * 2, demos)
    return bundle, sys, meas, bar


def reference_loss(theta, bundle, sys, meas, bar, consts, cfg):
    """Straight transcription of the relaxed objective, one point at a time."""
    b = bar.with_theta(theta)
    total = sum(t * t for t in theta)
    for x in bundle.z_safe_buffered:
        total += cfg.lambda_s * max(0.0, cfg.gamma_safe - eval_h(x, b))
    for x in bundle.z_unsafe:
        total += cfg.lambda_u * max(0.0, eval_h(x, b) + cfg.gamma_unsafe)
    for r in bundle.z_dyn:
        total += cfg.lambda_d * max(0.0, cfg.gamma_dyn - eval_q(r.u, r.y, r.t, sys, meas, b, consts, r.w))
    return total


def test_empty_datasets_leave_ridge(rng):
    bundle = make_bundle(np.zeros((0, 2)), np.zeros((0, 2)), [])
    sys = linear_system(np.eye(2), np.ones((2, 1)))
    bar = random_barrier(rng, n=2, ell=9)
    theta = rng.normal(size=9)
    assert loss(theta, bundle, sys, identity_measurement(2), bar, RobustnessConsts(), TrainConfig()) == pytest.approx(theta @ theta)


def test_zero_weights_pay_every_margin(rng):
    bundle, sys, meas, bar = random_instance(rng)
    cfg = TrainConfig()
    consts = RobustnessConsts()
    # q at theta=0 is minus the measurement penalty (1 + |u|) * 0.1
    pen = sum((1.0 + np.linalg.norm(r.u)) * 0.1 for r in bundle.z_dyn)
    expected = (cfg.lambda_s * cfg.gamma_safe * 8 + cfg.lambda_u * cfg.gamma_unsafe * 6
                + cfg.lambda_d * (cfg.gamma_dyn * 7 + pen))
    assert loss(np.zeros(bar.ell), bundle, sys, meas, bar, consts, cfg) == pytest.approx(expected, rel=1e-14)


def test_loss_matches_reference(rng):
    for _ in range(10):
        bundle, sys, meas, bar = random_instance(rng)
        cfg = TrainConfig(lambda_s=rng.uniform(1, 50), lambda_u=rng.uniform(1, 50), lambda_d=rng.uniform(1, 50))
        consts = RobustnessConsts(*rng.uniform(0.1, 2, 3))
        theta = rng.normal(size=bar.ell) * 0.3
        got = loss(theta, bundle, sys, meas, bar, consts, cfg)
        assert got == pytest.approx(reference_loss(theta, bundle, sys, meas, bar, consts, cfg), abs=1e-12 * max(1, abs(got)))


def test_subgradient_inactive_hinges_is_ridge(rng):
    # zero frequencies make h constant; with h well above gamma_safe no hinge is active
    ell = 9
    bar = RffBarrier(np.zeros((ell, 2)), np.zeros(ell), np.zeros(ell))
    bundle = make_bundle(rng.normal(size=(8, 2)), np.zeros((0, 2)), [])
    sys = linear_system(np.eye(2), np.ones((2, 1)))
    theta = np.ones(ell)
    g = loss_subgradient(theta, bundle, sys, identity_measurement(2), bar, RobustnessConsts(), TrainConfig())
    np.testing.assert_array_equal(g, 2 * theta)


def test_subgradient_only_safe_active(rng):
    bundle, sys, meas, bar = random_instance(rng, n_dyn=0)
    bundle = make_bundle(bundle.z_safe, np.zeros((0, 2)), [])
    cfg = TrainConfig()
    g = loss_subgradient(np.zeros(bar.ell), bundle, sys, meas, bar, RobustnessConsts(), cfg)
    np.testing.assert_allclose(g, -cfg.lambda_s * features(bundle.z_safe, bar).sum(axis=0), atol=1e-12)


def test_subgradient_central_differences(rng):
    checked = 0
    for _ in range(30):
        bundle, sys, meas, bar = random_instance(rng)
        cfg = TrainConfig()
        consts = RobustnessConsts()
        prob = TrainingProblem(bundle, sys, meas, bar, consts, cfg)
        theta = rng.normal(size=bar.ell)
        m = prob.margins(theta)
        if min(np.abs(np.concatenate(list(m.values())))) < 1e-4:
            continue  # too close to a kink
        g = prob.subgradient(theta)
        fd = np.array([(prob.loss(theta + 1e-7 * e) - prob.loss(theta - 1e-7 * e)) / 2e-7 for e in np.eye(bar.ell)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
        checked += 1
    assert checked >= 20


def test_zero_lambdas_drive_weights_to_zero(rng):
    bundle, sys, meas, bar = random_instance(rng)
    cfg = TrainConfig(lambda_s=0, lambda_u=0, lambda_d=0, lr=0.05, max_iters=4000, lr_decay=0)
    prob = TrainingProblem(bundle, sys, meas, bar, RobustnessConsts(), cfg)
    theta, trace, _ = optimize(prob, rng.normal(size=bar.ell), cfg)
    assert np.linalg.norm(theta) < 1e-2
    assert trace[-1] < trace[0]


def test_one_dimensional_toy_separates():
    # single integrator x' = u, expert u = -x pushes inward
    sys = linear_system([[0.0]], [[1.0]])
    meas = identity_measurement(1)
    safe = np.linspace(-0.5, 0.5, 21)[:, None]
    unsafe = np.array([[-1.0], [1.0]])
    demos = [DemoRecord(-x.copy(), x.copy(), 0.0) for x in safe]
    bundle = make_bundle(safe, unsafe, demos)
    bar0 = RffBarrier.sample(1, 60, sigma2=4.0, seed=0)
    cfg = TrainConfig(lr=0.05, max_iters=5000)
    bar, report = train(bundle, sys, meas, bar0, RobustnessConsts(), cfg)
    assert np.all(eval_h(safe, bar) > 0)
    assert np.all(eval_h(unsafe, bar) < 0)
    assert report.violations == {"safe": 0, "unsafe": 0, "dyn": 0}


def test_check_constraints_zero_weights(rng):
    bundle, sys, meas, bar = random_instance(rng)
    cfg = TrainConfig()
    prob = TrainingProblem(bundle, sys, meas, bar, RobustnessConsts(), cfg)
    m = prob.margins(np.zeros(bar.ell))
    np.testing.assert_allclose(m["safe"], -cfg.gamma_safe)
    np.testing.assert_allclose(m["unsafe"], -cfg.gamma_unsafe)
    rep = check_constraints(bar.with_theta(np.zeros(bar.ell)), bundle, sys, meas, RobustnessConsts(), cfg)
    assert rep.violations == {"safe": 8, "unsafe": 6, "dyn": 7}
    assert rep.violation_fraction == 1.0


def test_check_constraints_known_signs():
    # h = cos x1 + cos x2 - 1.4 from three features: a constant and one per axis
    ell = 3
    s = math.sqrt(2 / ell)
    W = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    bar = RffBarrier(W, np.zeros(3), np.array([-1.4, 1.0, 1.0]) / s)
    ang = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    rad = np.linspace(0, 0.5, 6)
    safe = np.array([[r * math.cos(a), r * math.sin(a)] for r in rad for a in ang])
    unsafe = 1.5 * np.column_stack([np.cos(ang), np.sin(ang)])
    bundle = make_bundle(safe, unsafe, [])
    sys = linear_system(np.zeros((2, 2)), np.eye(2))
    rep = check_constraints(bar, bundle, sys, identity_measurement(2), RobustnessConsts(), TrainConfig())
    assert rep.violations["safe"] == 0 and rep.violations["unsafe"] == 0


def test_check_constraints_permutation_invariant(rng):
    bundle, sys, meas, bar = random_instance(rng, n_safe=30, n_unsafe=30, n_dyn=30)
    bar = bar.with_theta(rng.normal(size=bar.ell) * 0.2)
    cfg = TrainConfig()
    rep = check_constraints(bar, bundle, sys, meas, RobustnessConsts(), cfg)
    p = rng.permutation(30)
    shuffled = make_bundle(bundle.z_safe[p], bundle.z_unsafe[p], [bundle.z_dyn[i] for i in p])
    rep2 = check_constraints(bar, shuffled, sys, meas, RobustnessConsts(), cfg)
    assert rep.violations == rep2.violations
    assert rep.final_loss == pytest.approx(rep2.final_loss, rel=1e-12)


def test_minibatch_training_runs(rng):
    bundle, sys, meas, bar = random_instance(rng, n_safe=40, n_unsafe=40, n_dyn=40)
    cfg = TrainConfig(batch_size=10, max_iters=200, seed=4)
    _, rep = train(bundle, sys, meas, bar, RobustnessConsts(), cfg)
    _, rep2 = train(bundle, sys, meas, bar, RobustnessConsts(), cfg)
    assert rep.final_loss == rep2.final_loss


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma_safe=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
