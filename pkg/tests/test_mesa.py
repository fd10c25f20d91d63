import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from backdoor_mesa.mesa import (AnalyticLink, EmptyDistributionError, MesaConfig, SubModel, TriggerEnsemble,
                                ensemble_weights, fit_submodel, hinge_loss, load_ensemble, loss_and_grads,
                                save_ensemble)
from backdoor_mesa.mine import MiEstimator
from backdoor_mesa.networks import GeneratorNet
from backdoor_mesa.numeric import ContractError, RngStream, finite_difference_check
from backdoor_mesa.oracle import SyntheticProblem
from backdoor_mesa.testbed import ConstantTestingFn


def sub(beta, active=True, mi=0.0, seed=0, dim=3):
    gen = GeneratorNet(4, 8, np.zeros(dim), np.ones(dim), np.random.default_rng(seed))
    return SubModel(beta, gen, mi, beta + 0.05 if active else beta - 0.05, active, seed)


def test_hinge_examples():
    assert hinge_loss(0.8, [0.5, 0.9]) == pytest.approx(0.15)
    assert hinge_loss(0.5, [0.7, 1.0]) == 0.0
    assert hinge_loss(1.0, [0.0]) == 1.0


def test_config_validation():
    with pytest.raises(ContractError):
        MesaConfig(thresholds=(0.5, 0.5))
    with pytest.raises(ContractError):
        MesaConfig(thresholds=(1.2,))
    with pytest.raises(ContractError):
        MesaConfig(alpha=-1.0)
    assert MesaConfig.staircase(4).thresholds == (0.25, 0.5, 0.75, 1.0)


def test_uniform_weights_skip_inactive():
    w = ensemble_weights([sub(0.5), sub(0.8, active=False), sub(0.9)])
    assert np.array_equal(w, [0.5, 0.0, 0.5])


def test_analytic_weights_two_submodels():
    # identity link: gamma_i proportional to e^{h_i}; h = (0, ln 2) gives (1/3, 2/3)
    subs = [sub(0.3, mi=0.0), sub(0.6, mi=float(np.log(2.0)))]
    w = ensemble_weights(subs, AnalyticLink.identity())
    assert np.allclose(w, [1 / 3, 2 / 3], atol=1e-12)


def test_affine_link_slope_cancels():
    subs = [sub(0.3, mi=0.2), sub(0.6, mi=1.1)]
    a = ensemble_weights(subs, AnalyticLink.affine(0.5, w_max=2.0))
    b = ensemble_weights(subs, AnalyticLink.identity())
    assert np.allclose(a, b, atol=1e-12)


def test_explicit_mix_weights():
    w = ensemble_weights([sub(0.5), sub(0.8), sub(0.9)], [4, 3, 3])
    assert np.allclose(w, [0.4, 0.3, 0.3], atol=1e-15)
    w = ensemble_weights([sub(0.5), sub(0.8, active=False), sub(0.9)], [4, 3, 3])
    assert np.allclose(w, [4 / 7, 0.0, 3 / 7], atol=1e-15)


def test_all_inactive_raises():
    with pytest.raises(EmptyDistributionError):
        ensemble_weights([sub(0.5, active=False), sub(0.9, active=False)])


def test_non_increasing_link_rejected():
    bad = AnalyticLink(lambda u: -np.asarray(u), lambda u: -np.ones(np.shape(u)), lambda v: -np.asarray(v))
    with pytest.raises(ContractError):
        ensemble_weights([sub(0.5)], bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(-30, 30)), min_size=1, max_size=12))
def test_weights_are_a_simplex(spec):
    subs = [sub(0.05 + 0.9 * i / len(spec), active=a, mi=h) for i, (a, h) in enumerate(spec)]
    if not any(a for a, _ in spec):
        with pytest.raises(EmptyDistributionError):
            ensemble_weights(subs)
        return
    for mode in ("uniform", AnalyticLink.identity()):
        w = ensemble_weights(subs, mode)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= 0)
        assert all(w[i] == 0 for i, (a, _) in enumerate(spec) if not a)


def test_sampling_law_chi_square():
    subs = [sub(0.5, seed=1), sub(0.8, seed=2), sub(0.9, seed=3)]
    ens = TriggerEnsemble(subs, [0.4, 0.3, 0.3])
    x, idx = ens.sample(10_000, np.random.default_rng(11), return_index=True)
    counts = np.bincount(idx, minlength=3)
    p = stats.chisquare(counts, 10_000 * ens.weights).pvalue
    assert p > 0.01
    assert x.shape == (10_000, 3) and np.all((x >= 0) & (x <= 1))


def test_ensemble_rejects_weight_on_inactive():
    with pytest.raises(ContractError):
        TriggerEnsemble([sub(0.5), sub(0.9, active=False)], [0.5, 0.5])
    with pytest.raises(ContractError):
        TriggerEnsemble([sub(0.5)], [0.9])


def test_save_load_round_trip(tmp_path):
    ens = TriggerEnsemble([sub(0.5, seed=4), sub(0.8, active=False, seed=5)], [1.0, 0.0])
    save_ensemble(ens, tmp_path / "e", config_hash="abc")
    back = load_ensemble(tmp_path / "e")
    assert np.array_equal(back.weights, ens.weights)
    a = ens.sample(64, np.random.default_rng(0))
    b = back.sample(64, np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert [s.active for s in back.submodels] == [True, False]


def test_composed_loss_gradient_fd():
    prob = SyntheticProblem.single_box((1.5,), (2.5,), edge=0.3)
    rng = np.random.default_rng(0)
    gen = GeneratorNet(4, 8, prob.low, prob.high, rng)
    est = MiEstimator.create(1, 4, 8, 1e-3, rng)
    z, zm = rng.standard_normal((2, 16, 4))

    def loss():
        return loss_and_grads(gen, est, prob, 0.9, 0.5, z, zm, np.random.default_rng(1))[0]

    _, grads = loss_and_grads(gen, est, prob, 0.9, 0.5, z, zm, np.random.default_rng(1))
    assert finite_difference_check(loss, gen.params, grads, rng=rng) < 1e-4


def small_cfg(**kw):
    base = dict(thresholds=(0.5,), epochs=5, steps_per_epoch=4, batch_size=32, noise_dim=4, gen_hidden=16,
                stats_hidden=16, eval_samples=64, mi_batch=64, mi_eval_batches=1)
    base.update(kw)
    return MesaConfig(**base)


def test_constant_one_is_always_active():
    F = ConstantTestingFn(1.0, 3)
    s = fit_submodel(small_cfg(), 0.9, F, RngStream(0, 1), np.zeros(3), np.ones(3))
    assert s.active and s.mean_F == 1.0


def test_constant_zero_is_never_active():
    F = ConstantTestingFn(0.0, 3)
    s = fit_submodel(small_cfg(), 0.1, F, RngStream(0, 1), np.zeros(3), np.ones(3))
    assert not s.active
    with pytest.raises(EmptyDistributionError):
        ensemble_weights([s])


def test_fit_is_deterministic():
    F = ConstantTestingFn(1.0, 3)
    a = fit_submodel(small_cfg(), 0.5, F, RngStream(3, 2), np.zeros(3), np.ones(3))
    b = fit_submodel(small_cfg(), 0.5, F, RngStream(3, 2), np.zeros(3), np.ones(3))
    for k in a.generator.params:
        assert np.array_equal(a.generator.params[k], b.generator.params[k])
    assert a.mi_estimate == b.mi_estimate


def test_bounds_must_match_trigger_size():
    with pytest.raises(ContractError):
        fit_submodel(small_cfg(), 0.5, ConstantTestingFn(1.0, 3), RngStream(0, 0), np.zeros(2), np.ones(2))
