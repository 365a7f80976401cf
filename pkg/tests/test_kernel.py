import numpy as np
import pytest

from fedrecsim.kernel import AdamState, NumericError, ParamSet, ShapeError, adam_step, finite_diff_check


def one_scalar(value=0.0):
    return ParamSet({"w": np.array([value])})


def test_adam_first_step_matches_hand_computation():
    # m1 = 0.1 g, v1 = 0.001 g^2, bias-corrected m_hat = g, v_hat = g^2,
    # so the step is lr * g / (|g| + eps)
    ps = one_scalar(0.0)
    adam_step(ps, {"w": np.array([1.0])}, 0.001)
    expected = -0.001 * 1.0 / (1.0 + 1e-8)
    assert ps["w"][0] == pytest.approx(expected, abs=1e-15)
    assert ps.states["w"].step == 1


def test_adam_second_step_matches_hand_computation():
    ps = one_scalar(0.0)
    g1, g2, lr = 1.0, -0.5, 0.01
    adam_step(ps, {"w": np.array([g1])}, lr)
    adam_step(ps, {"w": np.array([g2])}, lr)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    p1 = -lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    p2 = p1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    assert ps["w"][0] == pytest.approx(p2, abs=1e-15)


def test_adam_zero_gradient_is_a_fixed_point(rng):
    ps = ParamSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)})
    before = {k: ps[k].copy() for k in ps.names()}
    adam_step(ps, {"a": np.zeros((3, 2)), "b": np.zeros(4)}, 0.1)
    change = sum(np.linalg.norm(ps[k] - before[k]) for k in before)
    assert change < 1e-12
    assert all(ps.states[k].step == 1 for k in before)


def test_adam_repeated_gradient_decreases_monotonically():
    ps = one_scalar(1.0)
    values = [1.0]
    for _ in range(5):
        adam_step(ps, {"w": np.array([2.0])}, 0.01)
        values.append(ps["w"][0])
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_missing_gradient_counts_as_zero():
    ps = ParamSet({"a": np.ones(2), "b": np.ones(2)})
    adam_step(ps, {"a": np.ones(2)}, 0.1)
    np.testing.assert_array_equal(ps["b"], np.ones(2))
    assert ps.states["b"].step == 1


def test_adam_shape_mismatch_names_parameter():
    ps = ParamSet({"weight": np.zeros((2, 2))})
    with pytest.raises(ShapeError, match="weight"):
        adam_step(ps, {"weight": np.zeros(3)}, 0.1)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        adam_step(one_scalar(), {"w": np.ones(1)}, 0.0)


def test_adam_deterministic(rng):
    p = rng.normal(size=5)
    g = rng.normal(size=5)
    a, b = ParamSet({"p": p.copy()}), ParamSet({"p": p.copy()})
    for _ in range(3):
        adam_step(a, {"p": g}, 0.01)
        adam_step(b, {"p": g}, 0.01)
    assert a["p"].tobytes() == b["p"].tobytes()


def test_paramset_fresh_copy_resets_state():
    ps = one_scalar(0.0)
    adam_step(ps, {"w": np.ones(1)}, 0.1)
    fresh = ps.fresh_copy()
    assert fresh.states["w"].step == 0
    np.testing.assert_array_equal(fresh["w"], ps["w"])
    copy = ps.copy()
    assert copy.states["w"].step == 1
    copy["w"][0] = 5.0
    assert ps["w"][0] != 5.0


def test_adam_state_shapes_must_match():
    with pytest.raises(ShapeError):
        ParamSet({"w": np.zeros(3)}, {"w": AdamState.zeros_like(np.zeros(2))})


def test_finite_diff_exact_on_quadratic(rng):
    params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=4)}
    f = lambda p: float(sum((v**2).sum() for v in p.values()))  # noqa: E731
    err = finite_diff_check(f, params, {k: 2 * v for k, v in params.items()}, h=1e-4)
    assert err < 1e-6


def test_finite_diff_detects_corrupted_coordinate(rng):
    params = {"a": rng.normal(size=5) + 3.0}
    f = lambda p: float((p["a"] ** 2).sum())  # noqa: E731
    grad = 2 * params["a"]
    grad[2] *= 2.0
    assert finite_diff_check(f, params, {"a": grad}) > 0.1


def test_finite_diff_raises_on_nonfinite():
    f = lambda p: float(np.log(p["a"][0]))  # noqa: E731
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        finite_diff_check(f, {"a": np.array([0.0])}, {"a": np.array([1.0])})


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: 0.0, {"a": np.zeros(1)}, {"a": np.zeros(1)}, h=0.0)
