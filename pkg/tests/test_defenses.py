import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedrecsim.checks import clip_mass_check, hics_bookkeeping_check, random_update
from fedrecsim.defenses import (DefenseConfig, DefenseError, MemoryBank, clip_per_client, coordinate_median,
                                defense_dispatch, hics_round, item_krum, krum_select, make_defense, top_rows,
                                trimmed_mean)
from fedrecsim.updates import GradientUpdate, sum_updates

from oracles import brute_krum, brute_median, brute_trimmed


def up(ids, rows, uploader=0, theta=None):
    return GradientUpdate(ids, np.asarray(rows, dtype=float), theta or {}, uploader)


# --- per-client clipping ------------------------------------------------------

def test_clip_scales_joint_norm():
    u = up([0, 1], [[3.0, 0.0], [0.0, 4.0]])  # joint norm 5
    c = clip_per_client(u, 1.0)
    np.testing.assert_allclose(c.item_grads, [[0.6, 0.0], [0.0, 0.8]])
    same = clip_per_client(u, 5.0)
    np.testing.assert_array_equal(same.item_grads, u.item_grads)


def test_clip_per_row_and_theta_passthrough():
    th = {"W0": np.full((2, 2), 7.0)}
    c = clip_per_client(up([0, 1], [[3.0, 4.0], [0.3, 0.4]], theta=th), 1.0, per_row=True)
    np.testing.assert_allclose(c.item_grads, [[0.6, 0.8], [0.3, 0.4]])
    np.testing.assert_array_equal(c.theta["W0"], th["W0"])


def test_clip_zero_update_and_bad_bound():
    c = clip_per_client(up([2], [[0.0, 0.0]]), 1.0)
    np.testing.assert_array_equal(c.item_grads, [[0.0, 0.0]])
    with pytest.raises(DefenseError):
        clip_per_client(up([2], [[1.0, 0.0]]), 0.0)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, (3, 2), elements=finite), min_size=1, max_size=20),
       st.floats(1e-3, 1e3))
def test_clipped_sum_obeys_mass_bound(row_sets, rho):
    ups = [up([0, 4, 7], rows, uploader=c) for c, rows in enumerate(row_sets)]
    summed = sum_updates([clip_per_client(u, rho) for u in ups], 8, 2, {})
    assert np.linalg.norm(summed.items) <= rho * len(ups) * (1 + 1e-12) + 1e-9


def test_clip_mass_check_passes():
    assert clip_mass_check().ok


# --- HiCS ---------------------------------------------------------------------

def test_hics_zero_uploads_release_nothing():
    res = hics_round([up([], np.zeros((0, 3)))], MemoryBank.zeros(10, 3), DefenseConfig())
    assert np.all(res.released == 0) and np.all(res.bank.W == 0)


def test_hics_releases_ceil_fraction_of_rows():
    rng = np.random.default_rng(0)
    ups = [random_update(rng, 25, 3, c) for c in range(4)]
    res = hics_round(ups, MemoryBank.zeros(25, 3), DefenseConfig(clip=1.0, sparsity=0.1))
    assert res.selected.size == math.ceil(0.1 * 25)
    assert np.count_nonzero(np.any(res.bank.W[res.selected] != 0, axis=1)) == 0


def test_hics_hand_example():
    # one client, rows of norm 3 and 4; rho=10 leaves them unclipped, half the rows released
    cfg = DefenseConfig(clip=10.0, sparsity=0.5)
    res = hics_round([up([0, 1], [[3.0, 0.0], [0.0, 4.0]])], MemoryBank.zeros(4, 2), cfg)
    assert res.selected.tolist() == [0, 1]
    assert res.mean_selected_norm == pytest.approx(3.5)
    np.testing.assert_allclose(res.released[0], [3.0, 0.0])
    np.testing.assert_allclose(res.released[1], [0.0, 3.5])


def test_hics_without_sparsity_clip_or_adaptive_is_a_plain_sum():
    rng = np.random.default_rng(3)
    cfg = DefenseConfig(clip=float("inf"), sparsity=1.0, adaptive_clip=False)
    ups = [random_update(rng, 15, 3, c, theta_like={"W0": np.zeros((2, 2))}) for c in range(5)]
    res = hics_round(ups, MemoryBank.zeros(15, 3), cfg)
    plain = sum_updates(ups, 15, 3, {"W0": np.zeros((2, 2))})
    np.testing.assert_allclose(res.released, plain.items, atol=1e-12)
    np.testing.assert_allclose(res.theta["W0"], plain.theta["W0"], atol=1e-12)


def test_hics_bookkeeping_over_thirty_rounds():
    assert all(r.ok for r in hics_bookkeeping_check(rounds=30))


def test_defense_objects_keep_bank_between_rounds():
    d = make_defense("hics", DefenseConfig(clip=10.0, sparsity=0.25), 4, 1)
    d([up([0, 1, 2, 3], [[4.0], [3.0], [2.0], [1.0]])], {})
    np.testing.assert_allclose(d.bank.W[:, 0], [0.0, 3.0, 2.0, 1.0])
    su = make_defense("l2-clip-su", DefenseConfig(), 4, 1)
    assert su.cfg.adaptive_clip is False


def test_top_rows_ties_by_smaller_id():
    W = np.array([[1.0], [2.0], [2.0], [0.5]])
    assert top_rows(W, 2).tolist() == [1, 2]
    assert top_rows(np.ones((4, 1)), 2).tolist() == [0, 1]


# --- robust aggregators against independent oracles ---------------------------

def test_krum_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(150):
        n, d = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        rows = rng.normal(size=(n, d))
        np.testing.assert_allclose(krum_select(rows), brute_krum(rows.tolist()), atol=1e-12, rtol=0)


def test_item_krum_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(120):
        ups = [random_update(rng, 6, 2, c) for c in range(int(rng.integers(1, 6)))]
        got = item_krum(ups, 6, 2, scale=True)
        for i in range(6):
            rows = [u.item_grads[list(u.item_ids).index(i)].tolist() for u in ups if i in u.item_ids]
            want = np.zeros(2) if not rows else np.asarray(brute_krum(rows)) * len(rows)
            np.testing.assert_allclose(got[i], want, atol=1e-12, rtol=0)


def test_median_and_trimmed_mean_match_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(150):
        n = int(rng.integers(1, 9))
        vals = rng.normal(size=(n, 3, 2))
        vals[rng.random(vals.shape) < 0.2] = 0.0  # ties
        med = coordinate_median(vals)
        b = int(rng.integers(0, (n - 1) // 2 + 1))
        tm = trimmed_mean(vals, b)
        for i, j in itertools.product(range(3), range(2)):
            col = vals[:, i, j].tolist()
            assert abs(med[i, j] - brute_median(col)) <= 1e-12
            assert abs(tm[i, j] - brute_trimmed(col, b)) <= 1e-12


def test_median_example_and_permutation_invariance():
    vals = np.array([[1.0], [5.0], [2.0], [100.0]])
    assert coordinate_median(vals)[0] == 3.5
    assert trimmed_mean(vals, 1)[0] == 3.5
    rng = np.random.default_rng(0)
    ups = [random_update(rng, 8, 2, c, theta_like={"b0": np.zeros(3)}) for c in range(5)]
    for name in ("median", "trimmed-mean", "item-krum", "l2-clip", "none"):
        d1 = make_defense(name, DefenseConfig(clip=0.5), 8, 2)
        d2 = make_defense(name, DefenseConfig(clip=0.5), 8, 2)
        a = d1(ups, {"b0": np.zeros(3)})
        b = d2(ups[::-1], {"b0": np.zeros(3)})
        np.testing.assert_allclose(a.items, b.items, atol=1e-12)
        np.testing.assert_allclose(a.theta["b0"], b.theta["b0"], atol=1e-12)


def test_trimmed_mean_needs_enough_clients():
    with pytest.raises(DefenseError):
        trimmed_mean(np.zeros((2, 1)), 1)


def test_median_scales_by_participant_count():
    ups = [up([0], [[1.0]], 0), up([0], [[2.0]], 1), up([], np.zeros((0, 1)), 2)]
    g = make_defense("median", DefenseConfig(), 2, 1)(ups, {})
    assert g.items[0, 0] == pytest.approx(1.0 * 3)
    g2 = make_defense("median", DefenseConfig(contributors_only=True), 2, 1)(ups, {})
    assert g2.items[0, 0] == pytest.approx(1.5 * 2)


def test_dispatch_reuses_state_and_rejects_unknown():
    cfg = DefenseConfig(clip=10.0, sparsity=0.5)
    u = [up([0, 1], [[1.0], [2.0]])]
    _, state = defense_dispatch("hics", u, None, cfg, 2, 1, {})
    _, again = defense_dispatch("hics", u, state, cfg, 2, 1, {})
    assert again is state
    _, other = defense_dispatch("median", u, state, cfg, 2, 1, {})
    assert other.name == "median"
    with pytest.raises(DefenseError):
        make_defense("foolsgold", cfg, 2, 1)


@pytest.mark.parametrize("kw", [{"clip": 0.0}, {"sparsity": 0.0}, {"sparsity": 1.5}, {"trim": -1}, {"norm_ord": 1}])
def test_defense_config_validation(kw):
    with pytest.raises(DefenseError):
        DefenseConfig(**kw)


def test_clip_examples_norm_two_and_point_three():
    two = up([0, 3], [[1.0, 1.0], [1.0, 1.0]])  # joint norm 2
    np.testing.assert_allclose(clip_per_client(two, 1.0).item_grads, 0.5 * two.item_grads)
    small = up([1], [[0.3, 0.0]])
    np.testing.assert_array_equal(clip_per_client(small, 1.0).item_grads, small.item_grads)


def test_adaptive_clip_leaves_rows_below_the_mean_alone():
    cfg = DefenseConfig(clip=100.0, sparsity=1.0)
    res = hics_round([up([0, 1, 2], [[1.0], [2.0], [6.0]])], MemoryBank.zeros(3, 1), cfg)
    assert res.mean_selected_norm == pytest.approx(3.0)
    np.testing.assert_allclose(res.released[:, 0], [1.0, 2.0, 3.0])


def test_krum_identical_rows_and_outlier():
    same = np.tile([0.5, -1.0], (4, 1))
    np.testing.assert_array_equal(krum_select(same), [0.5, -1.0])
    with_outlier = np.vstack([same, [[50.0, 50.0]]])
    np.testing.assert_array_equal(krum_select(with_outlier), [0.5, -1.0])


def test_median_and_trim_small_examples():
    vals = np.array([[1.0], [2.0], [100.0]])
    assert coordinate_median(vals)[0] == 2.0
    assert trimmed_mean(vals, 1)[0] == 2.0
    flat = np.full((5, 2), 0.7)
    np.testing.assert_allclose(coordinate_median(flat), [0.7, 0.7])
    np.testing.assert_allclose(trimmed_mean(flat, 2), [0.7, 0.7])


def test_none_defense_is_a_plain_sum(rng):
    ups = [random_update(rng, 9, 2, c) for c in range(3)]
    g = make_defense("none", DefenseConfig(), 9, 2)(ups, {})
    np.testing.assert_allclose(g.items, sum_updates(ups, 9, 2, {}).items)
