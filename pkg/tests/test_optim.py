import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from famseg.optim import (
    Optimizer,
    Phase,
    Schedule,
    adam_step,
    adamw_step,
    alternate_train,
    decay_lr,
    lr_fit,
    sgd_step,
)
from famseg.tensor import Tensor


def test_sgd_single_step():
    theta, _ = sgd_step(np.array(1.0), np.array(2.0), 0.1)
    assert theta == 0.8


def test_sgd_zero_gradient_is_fixed_point():
    theta = np.array([1.5, -2.0])
    new, _ = sgd_step(theta, np.zeros(2), 0.3)
    assert np.array_equal(new, theta)


def test_sgd_geometric_decay_on_half_square():
    theta = np.array(1.0)
    for k in range(1, 21):
        theta, _ = sgd_step(theta, theta, 0.1)  # grad of 0.5 * theta^2
        assert abs(theta - 0.9**k) <= 1e-12


def test_sgd_momentum_buffer():
    theta, buf = sgd_step(np.array(1.0), np.array(1.0), 0.1, momentum=0.9)
    assert buf == 1.0 and theta == 0.9
    theta, buf = sgd_step(theta, np.array(1.0), 0.1, momentum=0.9, buf=buf)
    assert buf == pytest.approx(1.9) and theta == pytest.approx(0.71)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        sgd_step(np.zeros(3), np.zeros(2), 0.1)
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros((3, 1)), np.zeros(3), np.zeros(3), 1, 0.1)


def test_adam_first_step():
    theta, m, v = adam_step(np.array(0.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.001)
    assert theta == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)
    assert m == pytest.approx(0.1) and v == pytest.approx(0.001)


def test_adam_zero_gradient_never_moves():
    theta, m, v = np.array([0.3, -1.0]), np.zeros(2), np.zeros(2)
    for t in range(1, 50):
        new, m, v = adam_step(theta, np.zeros(2), m, v, t, 0.01)
        assert np.array_equal(new, theta)


def test_adam_constant_gradient_step_tends_to_lr():
    theta, m, v, lr = np.array(0.0), np.array(0.0), np.array(0.0), 0.01
    for t in range(1, 101):
        new, m, v = adam_step(theta, np.array(3.0), m, v, t, lr)
        step = abs(new - theta)
        theta = new
    assert step == pytest.approx(lr, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), lr=st.floats(1e-4, 1.0))
def test_adam_displacement_is_bounded(seed, lr):
    rng = np.random.default_rng(seed)
    theta, m, v = rng.normal(size=5), np.zeros(5), np.zeros(5)
    for t in range(1, 40):
        g = rng.normal(size=5) * 10.0 ** rng.uniform(-4, 4)
        new, m, v = adam_step(theta, g, m, v, t, lr)
        assert np.all(np.abs(new - theta) <= 10 * lr)
        theta = new


def test_adamw_pure_decay_single_step():
    theta, _, _ = adamw_step(np.array(1.0), np.array(0.0), np.array(0.0), np.array(0.0), 1, 0.1, 0.01)
    assert theta == 0.999


def test_adamw_pure_decay_is_geometric():
    theta0, lr, wd = np.array([2.0, -0.5]), 0.1, 0.01
    theta, m, v = theta0.copy(), np.zeros(2), np.zeros(2)
    for k in range(1, 31):
        theta, m, v = adamw_step(theta, np.zeros(2), m, v, k, lr, wd)
        np.testing.assert_allclose(theta, (1 - lr * wd) ** k * theta0, rtol=1e-14, atol=0)


def test_adamw_without_decay_equals_adam(rng):
    theta, m, v = rng.normal(size=4), np.zeros(4), np.zeros(4)
    a = (theta, m, v)
    b = (theta, m, v)
    for t in range(1, 12):
        g = rng.normal(size=4)
        a = adam_step(a[0], g, a[1], a[2], t, 0.01)
        b = adamw_step(b[0], g, b[1], b[2], t, 0.01, 0.0)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


def test_adamw_is_not_adam_with_l2():
    # loss = 0.5 * (100 * t0^2 + 0.01 * t1^2): very unequal gradient scales
    scale = np.array([100.0, 0.01])
    lr, wd = 0.01, 0.1
    wa = la = np.array([1.0, 1.0])
    ma = va = mb = vb = np.zeros(2)
    for t in range(1, 11):
        wa, ma, va = adamw_step(wa, scale * wa, ma, va, t, lr, wd)
        la, mb, vb = adam_step(la, scale * la + wd * la, mb, vb, t, lr)
    assert np.max(np.abs(wa - la)) >= 1e-6


# learning-rate policy -------------------------------------------------------------

CONSTS = dict(init_lr=0.01, min_lr=0.0001, lr_limit_max=0.001, lr_limit_min=0.0001)


def test_lr_fit_reference_constants():
    assert lr_fit(64, **CONSTS) == (0.001, 0.00001)
    assert lr_fit(8, **CONSTS) == (0.001, 0.00001)


def test_lr_fit_clamps():
    assert lr_fit(6400, **CONSTS)[0] == 0.001
    hi, lo = lr_fit(1e-9, **CONSTS)
    assert hi == 0.0001 and lo == 0.0001 / 100


def test_lr_fit_monotone_and_bounded():
    sizes = np.geomspace(0.01, 10000, 20)
    fits = [lr_fit(b, **CONSTS) for b in sizes]
    for (h0, l0), (h1, l1) in zip(fits, fits[1:]):
        assert h1 >= h0 and l1 >= l0
    for h, l in fits:
        assert 0.0001 <= h <= 0.001
        assert 0.000001 <= l <= 0.00001


def test_lr_fit_rejects_nonpositive():
    with pytest.raises(ValueError):
        lr_fit(0, **CONSTS)


def test_cosine_decay_endpoints():
    assert decay_lr("cosine", 0, 20, 1e-3, 1e-5) == 1e-3
    assert decay_lr("cosine", 10, 20, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-15)
    lrs = [decay_lr("cosine", e, 20, 1e-3, 1e-5) for e in range(20)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_step_decay_drops_tenfold_at_milestones():
    lrs = [decay_lr("step", e, 20, 1.0, 0.0) for e in range(20)]
    assert lrs[11] == 1.0 and lrs[12] == pytest.approx(0.1)
    assert lrs[16] == pytest.approx(0.1) and lrs[17] == pytest.approx(0.01)


def test_decay_errors():
    with pytest.raises(ValueError):
        decay_lr("cosine", 20, 20, 1.0, 0.1)
    with pytest.raises(ValueError):
        decay_lr("linear", 0, 20, 1.0, 0.1)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Phase("lbfgs", 3)
    with pytest.raises(ValueError):
        Phase("sgd", 0)
    with pytest.raises(ValueError):
        Schedule(phases=())
    with pytest.raises(ValueError):
        Schedule(init_lr=1e-5, min_lr=1e-4)


def test_adadelta_rate_moves_without_global_lr(rng):
    p = Tensor(np.array([1.0, -1.0]))
    opt = Optimizer([p], "adadelta", lr=123.0)
    for _ in range(5):
        opt.step([p.data.copy()])
    assert np.all(np.abs(p.data) < 1.0)


# alternation -----------------------------------------------------------------------


def bowl(dim=10, seed=0):
    rng = np.random.default_rng(seed)
    curv = np.geomspace(0.1, 10.0, dim)
    target = rng.normal(size=dim)

    def loss_and_grad(param):
        def f(_batch):
            r = param.data - target
            return 0.5 * float(np.sum(curv * r * r)), [curv * r]
        return f

    return target, loss_and_grad


def run_bowl(schedule, steps_per_epoch=20):
    target, lg = bowl()
    p = Tensor(np.zeros_like(target))
    log = alternate_train(schedule, [p], lg(p), lambda e: range(steps_per_epoch))
    return p, log, lg(p)(None)[0]


def test_alternation_tag_flip_and_lr_reseed():
    sched = Schedule()
    _, log, _ = run_bowl(sched, 1)
    assert [r["optimizer"] for r in log] == ["adamw"] * 15 + ["sgd"] * 5
    assert [r["epoch"] for r in log] == list(range(20))
    assert log[15]["lr"] == sched.fitted_range()[0]


def test_single_phase_is_plain_training():
    sched = Schedule(phases=(Phase("sgd", 4),))
    _, log, _ = run_bowl(sched, 3)
    assert {r["optimizer"] for r in log} == {"sgd"} and len(log) == 4


def test_phase_switch_resets_moments_and_keeps_params():
    sched = Schedule(phases=(Phase("adam", 2), Phase("sgd", 2)))
    _, lg = bowl()
    p = Tensor(np.zeros(10))
    seen = {}

    def on_epoch(epoch, rec, opt):
        seen[epoch] = (opt, p.data.copy(), opt.state.t)

    def batches(epoch):
        if epoch == 2:  # first SGD epoch: inspect before any step
            opt = sched.make_optimizer(1, [p])
            assert opt.state.t == 0 and np.all(opt.state.m[0] == 0)
            assert np.array_equal(p.data, seen[1][1])
        return range(3)

    alternate_train(sched, [p], lg(p), batches, on_epoch)
    assert seen[1][0] is not seen[2][0]
    assert seen[2][2] == 3  # fresh counter: only this phase's steps
    assert np.all(seen[2][0].state.m[0] == 0)


def bowl_runs(steps_per_epoch=20):
    base = dict(init_lr=0.5, min_lr=0.005, lr_limit_max=0.05, lr_limit_min=0.0005)
    alt = run_bowl(Schedule(phases=(Phase("adamw", 15), Phase("sgd", 5)), **base), steps_per_epoch)[2]
    adamw = run_bowl(Schedule(phases=(Phase("adamw", 20),), **base), steps_per_epoch)[2]
    sgd = run_bowl(Schedule(phases=(Phase("sgd", 20),), **base), steps_per_epoch)[2]
    return alt, adamw, sgd


def test_alternation_on_quadratic_bowl_beats_pure_adamw():
    alt, adamw, _ = bowl_runs()
    assert alt < adamw


def test_alternation_on_quadratic_bowl_within_5_percent_of_best():
    alt, adamw, sgd = bowl_runs()
    assert alt <= 1.05 * min(adamw, sgd)


def test_resume_restores_optimizer_once():
    sched = Schedule(phases=(Phase("adamw", 3), Phase("sgd", 2)))
    _, lg = bowl()
    p = Tensor(np.zeros(10))
    calls = []
    log = alternate_train(sched, [p], lg(p), lambda e: range(2), start_epoch=1, restore=calls.append)
    assert len(calls) == 1 and calls[0].kind == "adamw"
    assert [r["epoch"] for r in log] == [1, 2, 3, 4]


def test_optimizer_state_round_trip(rng):
    p = Tensor(rng.normal(size=(3, 2)))
    opt = Optimizer([p], "sgd", lr=0.1, momentum=0.9)
    opt.step([rng.normal(size=(3, 2))])
    arrays = opt.state_arrays()
    q = Tensor(p.data.copy())
    opt2 = Optimizer([q], "sgd", lr=0.1, momentum=0.9)
    opt2.load_state_arrays(arrays, opt.state.t)
    g = rng.normal(size=(3, 2))
    opt.step([g])
    opt2.step([g])
    assert np.array_equal(p.data, q.data)
    assert math.isfinite(float(p.data.sum()))
