import numpy as np
import pytest

from backdoor_mesa.numeric import ContractError, finite_difference_check
from backdoor_mesa.testbed import (AttackSpec, TestingFn, apply_trigger, canonical_bw_masks, generate_dataset,
                                   inject_backdoor, make_poisoner, measure_asr, split_defense_pool, stamp,
                                   train_victim, trigger_catalog, trigger_locations)


def test_dataset_deterministic_and_balanced():
    a, _ = generate_dataset(3, n_train=200, n_test=50)
    b, _ = generate_dataset(3, n_train=200, n_test=50)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=10)
    assert counts.max() - counts.min() <= 1
    assert a.images.shape == (200, 16, 16, 3)
    with pytest.raises(ContractError):
        generate_dataset(0, n_classes=1)


def test_victim_accuracy_and_chance(small_data, small_victim):
    train, test = small_data
    assert small_victim[1].clean_accuracy >= 0.95
    _, rep = train_victim(train, test, epochs=0, rng=np.random.default_rng(0))
    # untrained: near chance 1/10, and the floor warning fires
    assert rep.clean_accuracy < 0.3
    assert "below floor" in rep.warning


def test_apply_fixed_origin_changes_only_patch():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((16, 16, 3))
    trig = rng.standard_normal((3, 3, 3))
    out = apply_trigger(img, trig, ("fixed", 0, 0))
    assert np.array_equal(out[:3, :3], trig)
    mask = np.ones((16, 16), dtype=bool)
    mask[:3, :3] = False
    assert np.array_equal(out[mask], img[mask])
    assert np.count_nonzero(out != img) == 27


def test_apply_idempotent_when_patch_matches():
    img = np.random.default_rng(1).standard_normal((16, 16, 3))
    out = apply_trigger(img, img[5:8, 9:12].copy(), ("fixed", 5, 9))
    assert np.array_equal(out, img)


def test_apply_out_of_bounds_and_bad_rule():
    img = np.zeros((16, 16, 3))
    with pytest.raises(ContractError):
        apply_trigger(img, np.ones((3, 3, 3)), ("fixed", 14, 0))
    with pytest.raises(ContractError):
        apply_trigger(img, np.ones((3, 3, 3)), "diagonal")


def test_random_locations_cover_grid():
    # 196 offsets; 1e4 draws miss a given one with prob (195/196)^1e4 ~ 7e-23
    rows, cols = trigger_locations("random", 10_000, (16, 16, 3), (3, 3, 3), np.random.default_rng(2))
    seen = set(zip(rows.tolist(), cols.tolist()))
    assert len(seen) == 14 * 14
    assert rows.max() == 13 and cols.max() == 13


def test_random_stamp_changes_nothing_outside():
    rng = np.random.default_rng(3)
    imgs = rng.standard_normal((50, 16, 16, 3))
    rows, cols = trigger_locations("random", 50, (16, 16, 3), (3, 3, 3), rng)
    out = stamp(imgs, np.full((3, 3, 3), 9.0), rows, cols)
    for i in range(50):
        m = np.ones((16, 16), dtype=bool)
        m[rows[i]:rows[i] + 3, cols[i]:cols[i] + 3] = False
        assert np.array_equal(out[i][m], imgs[i][m])
        assert np.all(out[i][~m] == 9.0)


def test_catalog_shape(small_data):
    train, _ = small_data
    cat = trigger_catalog(train)
    assert len(cat) == 13
    assert [e.name for e in cat][4] == "checkerboard"
    low, high = train.pixel_bounds()
    for e in cat[:8]:
        flat = e.trigger.reshape(-1)
        assert np.all((flat == low) | (flat == high))
    assert len({e.trigger.tobytes() for e in cat}) == 13
    assert len(trigger_catalog(train, full_bw=True, n_random=0)) == 51


def test_canonical_masks_count():
    # 2^9 masks under the dihedral group and inversion
    assert len(canonical_bw_masks()) == 51


def test_poisoning_is_bernoulli():
    n, r = 4000, 0.05
    poison = make_poisoner(np.ones((3, 3, 3)), r, "random", 0)
    x = np.zeros((n, 16, 16, 3))
    y = np.full(n, 7)
    _, y2, k = poison(x, y, np.random.default_rng(4))
    sigma = np.sqrt(n * r * (1 - r))
    assert abs(k - n * r) <= 4 * sigma
    assert np.sum(y2 == 0) == k


def test_poisoner_keeps_labels_when_asked():
    poison = make_poisoner(np.ones((3, 3, 3)), 0.5, "random", None)
    y = np.arange(100) % 10
    x2, y2, k = poison(np.zeros((100, 16, 16, 3)), y, np.random.default_rng(5))
    assert np.array_equal(y2, y) and k > 0
    assert np.sum(np.any(x2 != 0, axis=(1, 2, 3))) == k


def test_asr_excludes_target_class(small_data, small_victim):
    train, test = small_data
    only_target = test.subset(np.flatnonzero(test.labels == 0))
    with pytest.raises(ContractError, match="no eligible images"):
        measure_asr(small_victim[0], only_target, np.zeros((3, 3, 3)), 0)
    base = measure_asr(small_victim[0], test, trigger_catalog(train)[9].trigger, 0)
    assert base < 0.1


def test_backdoor_reaches_gate(small_backdoor):
    model, rep, _ = small_backdoor
    assert rep.asr >= 0.9
    assert rep.clean_accuracy >= 0.94


def test_zero_ratio_is_clean_finetune(small_data, small_victim):
    train, test = small_data
    trig = trigger_catalog(train)[4].trigger
    bd, rep = inject_backdoor(small_victim[0], train, AttackSpec(trig, 0, 0.0), epochs=1,
                              rng=np.random.default_rng(0), eval_set=test)
    assert rep.poisoned == 0
    assert rep.asr < 0.1


def test_attack_spec_validation():
    with pytest.raises(ContractError):
        AttackSpec(np.zeros((3, 3, 3)), 0, 1.5)
    with pytest.raises(ContractError):
        AttackSpec(np.zeros(27), 0, 0.1)


def test_testing_fn_range_and_exclusion(small_data, small_backdoor):
    _, test = small_data
    model, _, entry = small_backdoor
    F = TestingFn(model, test, 0)
    assert np.all(F.images is not None) and len(F.images) == np.sum(test.labels != 0)
    vals = F(np.random.default_rng(0).uniform(-2, 2, (20, 27)), np.random.default_rng(1))
    assert np.all((vals >= 0) & (vals <= 1))
    assert F(entry.trigger.reshape(1, -1), np.random.default_rng(2), batch_images=256)[0] >= 0.9


def test_testing_fn_standard_error(small_data, small_backdoor):
    _, test = small_data
    model, _, entry = small_backdoor
    F = TestingFn(model, test, 0)
    # a half-strength trigger sits mid-range where the per-image spread is largest
    trig = 0.5 * entry.trigger.reshape(1, -1)
    rng = np.random.default_rng(3)
    vals = np.array([F(trig, rng, batch_images=128)[0] for _ in range(40)])
    assert vals.std(ddof=1) < 0.03


def test_testing_fn_gradient_fd(small_data, small_backdoor):
    _, test = small_data
    model, _, entry = small_backdoor
    F = TestingFn(model, test, 0, batch_images=4)
    rng = np.random.default_rng(4)
    trig = {"t": entry.trigger.reshape(1, -1) + 0.3 * rng.standard_normal((1, 27))}
    w = np.array([1.0])
    _, g = F.value_and_grad(trig["t"], np.random.default_rng(9))
    err = finite_difference_check(lambda: float(w @ F(trig["t"], np.random.default_rng(9))), trig, {"t": g},
                                  rng=rng)
    assert err < 1e-4


def test_defense_pool_split_disjoint(small_data):
    _, test = small_data
    a, b = split_defense_pool(test, 0.8, seed=1)
    assert len(a) == 400 and len(b) == 100
    assert not set(a.index.tolist()) & set(b.index.tolist())
