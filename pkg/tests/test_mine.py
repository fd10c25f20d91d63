import numpy as np
import pytest

from backdoor_mesa.mine import (MiEstimator, NoiseSpec, entropy_proxy, gaussian_mi, gaussian_pairs,
                                train_on_pairs)
from backdoor_mesa.networks import GeneratorNet
from backdoor_mesa.numeric import ContractError, finite_difference_check


def test_gaussian_closed_form():
    assert gaussian_mi(0.9) == pytest.approx(0.830366, abs=1e-6)
    assert gaussian_mi(0.0) == 0.0


def test_constant_statistics_give_zero():
    est = MiEstimator.create(2, 3, 4, rng=np.random.default_rng(0))
    for k in est.stats.params:
        est.stats.params[k][...] = 0.0
    rng = np.random.default_rng(1)
    x, z, zm = rng.standard_normal((10, 2)), rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    assert est.estimate(x, z, zm) == 0.0


def test_shift_invariance():
    # adding c to T shifts both DV terms by c
    est = MiEstimator.create(2, 3, 8, rng=np.random.default_rng(2))
    rng = np.random.default_rng(3)
    x, z, zm = rng.standard_normal((32, 2)), rng.standard_normal((32, 3)), rng.standard_normal((32, 3))
    before = est.estimate(x, z, zm)
    est.stats.params["b2"] += 5.0
    assert est.estimate(x, z, zm) == pytest.approx(before, abs=1e-12)


def test_dv_gradient_fd():
    est = MiEstimator.create(2, 3, 8, rng=np.random.default_rng(4))
    rng = np.random.default_rng(5)
    x, z, zm = rng.standard_normal((16, 2)), rng.standard_normal((16, 3)), rng.standard_normal((16, 3))
    grads = est.dv_param_grads(x, z, zm)
    err = finite_difference_check(lambda: est.estimate(x, z, zm), est.stats.params, grads, rng=rng)
    assert err < 1e-4


def test_input_gradient_fd():
    est = MiEstimator.create(2, 3, 8, rng=np.random.default_rng(6))
    rng = np.random.default_rng(7)
    box = {"x": rng.standard_normal((16, 2))}
    z, zm = rng.standard_normal((16, 3)), rng.standard_normal((16, 3))
    _, dx = est.step(box["x"], z, zm, need_input_grad=True, update=False)
    err = finite_difference_check(lambda: est.estimate(box["x"], z, zm), box, {"x": dx}, rng=rng)
    assert err < 1e-4


def test_step_without_update_is_pure():
    est = MiEstimator.create(2, 3, 8, rng=np.random.default_rng(8))
    snap = {k: v.copy() for k, v in est.stats.params.items()}
    rng = np.random.default_rng(9)
    est.step(rng.standard_normal((8, 2)), rng.standard_normal((8, 3)), rng.standard_normal((8, 3)), update=False)
    assert all(np.array_equal(snap[k], est.stats.params[k]) for k in snap)
    assert est.ema is None


def test_mismatched_batches_rejected():
    est = MiEstimator.create(2, 3, 4, rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        est.estimate(np.zeros((4, 2)), np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(ContractError):
        MiEstimator(est.stats, ema_decay=1.0)
    with pytest.raises(ContractError):
        NoiseSpec(4, "cauchy")


def test_correlated_gaussian_converges():
    est = MiEstimator.create(1, 1, 64, 1e-3, np.random.default_rng(0))
    value, trace = train_on_pairs(est, gaussian_pairs(0.9), 1500, 256, np.random.default_rng(100))
    true = gaussian_mi(0.9)
    assert true - 0.15 <= value <= true + 0.05
    assert np.mean(trace[-100:]) > np.mean(trace[:100])


def test_independent_pairs_near_zero():
    est = MiEstimator.create(1, 1, 32, 1e-3, np.random.default_rng(1))
    value, _ = train_on_pairs(est, gaussian_pairs(0.0), 500, 256, np.random.default_rng(101))
    assert abs(value) < 0.05


def test_collapsed_generator_scores_below_spread_one():
    noise = NoiseSpec(2, "uniform")
    spread = GeneratorNet(2, 16, -np.ones(2), np.ones(2), np.random.default_rng(0))
    collapsed = GeneratorNet(2, 16, -np.ones(2), np.ones(2), np.random.default_rng(0))
    collapsed.params["W3"][...] = 0.0  # output independent of the noise
    vals = []
    for gen in (collapsed, spread):
        est = MiEstimator.create(2, 2, 32, 1e-3, np.random.default_rng(2))
        vals.append(entropy_proxy(est, gen, noise, 256, np.random.default_rng(3), train_steps=300,
                                  eval_batches=4))
    assert abs(vals[0]) < 0.05
    assert vals[1] > vals[0] + 0.5
