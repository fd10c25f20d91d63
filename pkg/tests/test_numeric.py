import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backdoor_mesa.numeric import (ContractError, OptimizerState, RngStream, adam, all_finite,
                                   finite_difference_check, make_rng, pca_project, sample_gaussian, sample_noise,
                                   sgd, stream_id)


def test_stream_determinism_and_independence():
    a = RngStream(7, 3).generator().standard_normal(64)
    b = RngStream(7, 3).generator().standard_normal(64)
    c = RngStream(7, 4).generator().standard_normal(64)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # 64 pairs of independent normals: correlation ~ N(0, 1/64)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.5


def test_stream_id_is_stable():
    assert stream_id("submodel", 2) == stream_id("submodel", 2)
    assert stream_id("submodel", 2) != stream_id("submodel", 3)
    assert 0 <= stream_id("x") < 2**63
    assert RngStream(1, 5).child("a") == RngStream(1, 5).child("a")


def test_gaussian_shape_and_moments():
    rng = make_rng(0, "moments")
    assert sample_gaussian(rng, [2, 3]).shape == (2, 3)
    x = sample_gaussian(make_rng(0, "moments"), [100_000])
    # CLT: std error of the mean is 1/sqrt(1e5) ~ 0.0032; of the variance ~ sqrt(2/1e5) ~ 0.0045
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05
    with pytest.raises(ContractError):
        sample_gaussian(rng, [])


def test_uniform_noise_range():
    x = sample_noise(make_rng(1), (10_000, 2), "uniform")
    assert x.min() >= -1.0 and x.max() <= 1.0
    with pytest.raises(ContractError):
        sample_noise(make_rng(1), (3,), "laplace")


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 1.0])}
    sgd(lr=0.1, momentum=0.0).step(p, g)
    assert np.allclose(p["w"], [1.0 - 0.05, -2.0 - 0.1], atol=0, rtol=1e-15)


def test_sgd_momentum_accumulates():
    p = {"w": np.zeros(1)}
    opt = sgd(lr=1.0, momentum=0.9)
    opt.step(p, {"w": np.ones(1)})
    opt.step(p, {"w": np.ones(1)})
    assert p["w"][0] == pytest.approx(-(1.0 + 1.9))
    assert opt.t == 2


def test_adam_first_step_magnitude():
    # bias-corrected step 1: update = lr * g / (|g| + eps) ~ lr * sign(g)
    p = {"w": np.array([0.0, 0.0, 0.0])}
    opt = adam(lr=2e-4)
    opt.step(p, {"w": np.array([3.0, -0.01, 1e3])})
    assert np.allclose(np.abs(p["w"]), 2e-4, rtol=1e-5)
    assert np.all(np.sign(p["w"]) == [-1, 1, -1])


def test_zero_gradient_leaves_params():
    for opt in (sgd(0.1), adam(0.1)):
        p = {"w": np.array([1.5, -0.5])}
        opt.step(p, {"w": np.zeros(2)})
        assert np.array_equal(p["w"], [1.5, -0.5])


def test_optimizer_shape_mismatch():
    with pytest.raises(ContractError):
        sgd().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ContractError):
        sgd().step({"w": np.zeros(2)}, {"v": np.zeros(2)})
    with pytest.raises(ContractError):
        OptimizerState(kind="rmsprop", lr=0.1)


def test_fd_check_quadratic_exact():
    p = {"x": np.array([3.0])}
    err = finite_difference_check(lambda: float(p["x"][0] ** 2), p, {"x": np.array([6.0])}, epsilon=1e-5)
    assert err < 1e-8


def test_fd_check_detects_scaled_gradient():
    p = {"x": np.array([3.0])}
    err = finite_difference_check(lambda: float(p["x"][0] ** 2), p, {"x": np.array([12.0])})
    assert err == pytest.approx(0.5, rel=1e-6)


def test_fd_check_kink_mode():
    # relu(x0) + 2 * x1 with x0 a hair above the kink
    p = {"x": np.array([3e-6, 1.0])}
    relu = lambda: float(max(p["x"][0], 0.0) + 2.0 * p["x"][1])
    right = {"x": np.array([1.0, 2.0])}
    assert finite_difference_check(relu, p, right) > 0.1
    info = {}
    assert finite_difference_check(relu, p, right, skip_kinks=True, stats=info) < 1e-8
    assert info == {"checked": 1, "kinks": 1}
    # a wrong gradient on the smooth coordinate is still reported
    wrong = {"x": np.array([1.0, 3.0])}
    assert finite_difference_check(relu, p, wrong, skip_kinks=True) > 0.3


def test_fd_check_rejects_non_finite():
    p = {"x": np.array([1.0])}
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda: float("nan"), p, {"x": np.array([0.0])})


def test_pca_line_and_orthonormality():
    rng = make_rng(3)
    t = rng.standard_normal(200)
    direction = np.array([1.0, 2.0, -2.0]) / 3.0
    pts = np.outer(t, direction) + 5.0
    coords, comps = pca_project(pts, 2)
    assert abs(abs(comps[0] @ direction) - 1.0) < 1e-10
    assert coords[:, 1].var() < 1e-20
    assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-10)


def test_pca_matches_full_svd_up_to_sign():
    x = make_rng(4).standard_normal((2000, 27)) * np.linspace(0.2, 3.0, 27)
    coords, comps = pca_project(x, 2)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=True)
    ref = xc @ vt[:2].T
    for j in range(2):
        assert min(np.abs(coords[:, j] - ref[:, j]).max(), np.abs(coords[:, j] + ref[:, j]).max()) < 1e-9


def test_pca_needs_enough_rows():
    with pytest.raises(ContractError):
        pca_project(np.zeros((1, 4)), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_pca_properties(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    k = min(2, d)
    coords, comps = pca_project(x, k)
    assert np.allclose(comps @ comps.T, np.eye(k), atol=1e-10)
    assert np.allclose(coords, (x - x.mean(axis=0)) @ comps.T, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 0.99), st.integers(0, 1000))
def test_sgd_updates_stay_finite(lr, momentum, seed):
    rng = np.random.default_rng(seed)
    p = {"w": rng.standard_normal(5)}
    opt = sgd(lr, momentum)
    for _ in range(5):
        opt.step(p, {"w": rng.standard_normal(5)})
    assert all_finite(p)
