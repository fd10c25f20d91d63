from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backdoor_mesa.mesa import AnalyticLink, SubModel, ensemble_weights
from backdoor_mesa.networks import GeneratorNet
from backdoor_mesa.numeric import ContractError, RngStream, finite_difference_check
from backdoor_mesa.oracle import (Box, GridDensity, SyntheticProblem, check_uniformity, exp_link, oracle_config,
                                  run_oracle_mesa, staircase_bruteforce, staircase_counts, staircase_max_gap)


def test_two_box_layout():
    p = SyntheticProblem.two_boxes(gap=0.15)
    a, b = p.boxes
    assert a.density == pytest.approx(0.65) and b.density == pytest.approx(0.35)
    assert b.low[0] - a.high[0] == pytest.approx(0.15)
    assert p.w_max == pytest.approx(0.65)


def test_truth_masses_exact():
    p = SyntheticProblem.two_boxes(gap=0.15)
    t = p.truth(64)
    assert t.mass.sum() == pytest.approx(1.0, abs=1e-12)
    centers = p.grid(64).centers()[:, 0]
    left = centers < (p.boxes[0].high[0] + p.boxes[1].low[0]) / 2
    assert t.mass[left].sum() == pytest.approx(0.5, abs=1e-9)


def test_plane_truth_and_link():
    p = SyntheticProblem.plane()
    assert p.truth(64).mass.sum() == pytest.approx(1.0, abs=1e-9)
    assert p.min_slope > 0
    vals = p.exact_F(p.grid(64).centers())
    assert vals.min() >= 0 and vals.max() <= 1.0 + 1e-12


def test_box_validation():
    with pytest.raises(ContractError):
        SyntheticProblem([0.0], [1.0], [Box((0.5,), (1.5,), 1.0)])
    with pytest.raises(ContractError):
        SyntheticProblem([0.0], [1.0], [Box((0.1,), (0.5,), 0.7)])


def test_smooth_gradient_fd():
    p = SyntheticProblem.plane()
    rng = np.random.default_rng(0)
    box = {"x": rng.uniform(0, 1, (20, 2))}
    w = rng.standard_normal(20)
    _, g = p.value_and_grad(box["x"])
    err = finite_difference_check(lambda: float(w @ p(box["x"])), box, {"x": g * w[:, None]}, rng=rng)
    assert err < 1e-4


@pytest.mark.parametrize("n", [5, 10, 50])
def test_staircase_within_one_over_n(n):
    p = SyntheticProblem.plane()
    f = p.exact_F(p.grid(64).centers()).reshape(64, 64)
    s = staircase_bruteforce(f, n)
    assert s.shape == (64, 64)
    assert staircase_max_gap(f, n) <= Fraction(1, n)


def test_staircase_edge_values():
    # F exactly on a level is not above it; float 0.2 lies just above 1/5
    assert staircase_counts([0.0, 0.25, 0.2500001, 1.0], 4).tolist() == [0, 0, 1, 3]
    assert staircase_counts([0.2], 5).tolist() == [1]
    assert staircase_max_gap(np.zeros((64, 64)), 10) == 0
    assert np.all(staircase_bruteforce(np.zeros((64, 64)), 10) == 0)
    with pytest.raises(ContractError):
        staircase_counts([0.5], 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.integers(1, 60))
def test_staircase_property(values, n):
    assert staircase_max_gap(values, n) <= Fraction(1, n)


def test_grid_density_validity():
    spec = SyntheticProblem.two_boxes().grid(16)
    with pytest.raises(ContractError):
        GridDensity(spec, np.full(16, 0.1))
    d = GridDensity.from_samples(spec, np.random.default_rng(0).uniform(0, 2, 5000))
    assert d.mass.sum() == pytest.approx(1.0) and np.all(d.mass >= 0)
    assert d.tv(d) == 0.0


def _sub(beta, mi):
    gen = GeneratorNet(2, 4, [0.0], [1.0], np.random.default_rng(0))
    return SubModel(beta, gen, mi, beta, True)


def test_affine_gives_same_weights_as_identity():
    subs = [_sub(0.2, 0.1), _sub(0.5, 0.7)]
    assert np.allclose(ensemble_weights(subs, AnalyticLink.affine(0.5, 2.0)),
                       ensemble_weights(subs, AnalyticLink.identity()), atol=1e-12)


def test_exp_link_weights_favour_flat_levels():
    # g' falls with u, so higher levels get more weight at equal entropy
    link = exp_link(3.0)
    subs = [_sub(0.2, 0.0), _sub(0.8, 0.0)]
    w = ensemble_weights(subs, link)
    assert w[1] > w[0]
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_level_zero_covers_support():
    p = SyntheticProblem.two_boxes(gap=0.15)
    mask = p.level_mask(0.0, 64)
    centers = p.grid(64).centers()[:, 0]
    outside = (centers < p.boxes[0].low[0]) | (centers > p.boxes[1].high[0])
    assert not mask[outside].any()
    assert np.isneginf(p.log_volume(0.9))


@pytest.mark.slow
def test_single_box_uniform_and_collapse_ordering():
    p = SyntheticProblem.single_box((1.5,), (2.5,))
    cfg = oracle_config()
    fitted = {}
    for alpha in (0.1, 0.0):
        from backdoor_mesa.mesa import fit_submodel
        fitted[alpha] = fit_submodel(cfg, 0.5, p, RngStream(0, 1), p.low, p.high, alpha=alpha)
    u = check_uniformity(fitted[0.1], p, np.random.default_rng(0))
    u0 = check_uniformity(fitted[0.0], p, np.random.default_rng(0))
    assert u.tv <= 0.2 and u.outside_mass <= 0.1
    assert u0.tv > u.tv


@pytest.mark.slow
def test_oracle_run_reports_failures_and_masses():
    p = SyntheticProblem.two_boxes(gap=0.15)
    res = run_oracle_mesa(p, RngStream(1, 0), n_levels=4, cfg=oracle_config(epochs=10), n_samples=20_000)
    assert len(res.rows()) == 4
    assert abs(res.weights.sum() - 1.0) <= 1e-12
    assert 0.0 <= res.tv <= 1.0
    assert sum(res.box_mass) <= 1.0 + 1e-9
