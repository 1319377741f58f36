import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctsdm.geometry import Sinogram
from ctsdm.sampling import (
    MaskTrajectory,
    StepSchedule,
    build_schedule,
    build_trajectory,
    degrade,
    exponential_counts,
    fixed_select,
    grouped_random_order,
    grouped_random_select,
    nearest_step,
    partition_groups,
    random_select,
    select,
    trajectory_from_measured,
)


def _circular_max_gap(mask, v):
    m = np.sort(mask)
    return int(np.max(np.diff(np.append(m, m[0] + v))))


class TestSchedule:
    def test_boundaries(self):
        s = build_schedule(488, 100, 23)
        assert s.counts[0] == 488 and s.counts[100] == 23
        assert len(s.counts) == 101

    def test_midpoint(self):
        assert build_schedule(488, 100, 23).counts[50] == 106

    def test_small_repair(self):
        c = np.array(build_schedule(10, 9, 1).counts)
        assert c[0] == 10 and c[-1] == 1
        assert np.all(np.diff(c) <= -1)

    def test_desk_counts(self):
        s = build_schedule(180, 50, 9)
        assert s.counts[0] == 180 and s.counts[-1] == 9
        assert np.all(np.diff(s.counts) < 0)

    def test_geometric_ratio_close_to_analytic(self):
        v, T, k_min = 488, 100, 23
        raw = exponential_counts(v, T, k_min)
        ratio = (k_min / v) ** (1 / T)
        assert np.abs(raw[1:] - raw[:-1] * ratio).max() <= 1.0
        # repair never moves a count by more than the room needed for one view per step
        c = np.array(build_schedule(v, T, k_min).counts)
        slack = np.maximum(0, k_min + (T - np.arange(T + 1)) - raw)
        assert np.all(np.abs(c - raw) <= slack + 1)

    @pytest.mark.parametrize("args", [(10, 10, 1), (10, 0, 1), (10, 3, 10), (10, 3, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_serialization_round_trip(self):
        s = build_schedule(180, 50, 9)
        d = s.to_dict(seed=4)
        assert d["seed"] == 4 and d["counts"] == list(s.counts)
        assert StepSchedule.from_dict(d) == s
        with pytest.raises(ValueError):
            StepSchedule.from_dict({**d, "counts": d["counts"][::-1]})

    def test_nearest_step_ties_toward_larger_t(self):
        s = StepSchedule(10, 2, 2, (10, 6, 2))
        assert nearest_step(s, 4) == 2
        assert nearest_step(s, 8) == 1

    @settings(max_examples=60, deadline=None)
    @given(v=st.integers(2, 600), data=st.data())
    def test_properties(self, v, data):
        k_min = data.draw(st.integers(1, v - 1))
        T = data.draw(st.integers(1, v - k_min))
        c = np.array(build_schedule(v, T, k_min).counts)
        assert c[0] == v and c[-1] == k_min
        assert np.all(np.diff(c) < 0)
        assert c.min() >= k_min and c.max() <= v


class TestPartition:
    def test_paper_partition(self):
        p = partition_groups(488, 8)
        assert [g.size for g in p.groups] == [61] * 8
        np.testing.assert_array_equal(p.groups[0], np.arange(0, 488, 8))

    def test_single_group(self):
        p = partition_groups(5, 1)
        np.testing.assert_array_equal(p.groups[0], np.arange(5))

    @pytest.mark.parametrize("c", [0, 11])
    def test_invalid(self, c):
        with pytest.raises(ValueError):
            partition_groups(10, c)

    @settings(max_examples=60, deadline=None)
    @given(v=st.integers(1, 500), data=st.data())
    def test_disjoint_cover(self, v, data):
        c = data.draw(st.integers(1, v))
        p = partition_groups(v, c)
        allv = np.concatenate(p.groups)
        np.testing.assert_array_equal(np.sort(allv), np.arange(v))
        sizes = {g.size for g in p.groups}
        assert sizes <= {v // c, -(-v // c)}
        for g in p.groups:
            if g.size > 1:
                assert set(np.diff(g)) == {c}

    def test_angular_coverage_after_whole_groups(self):
        p = partition_groups(488, 8)
        for m in range(1, 9):
            mask = np.concatenate(p.groups[:m])
            assert _circular_max_gap(mask, 488) <= 8


class TestSelection:
    def test_whole_groups_are_deterministic(self):
        p = partition_groups(488, 8)
        expected = np.sort(np.concatenate(p.groups[:2]))
        for seed in range(5):
            np.testing.assert_array_equal(grouped_random_select(122, p, seed), expected)

    def test_partial_group(self):
        p = partition_groups(488, 8)
        m = grouped_random_select(100, p, np.random.default_rng(3))
        assert m.size == 100
        assert np.isin(p.groups[0], m).all()
        rest = np.setdiff1d(m, p.groups[0])
        assert rest.size == 39 and np.isin(rest, p.groups[1]).all()

    def test_full_count(self):
        p = partition_groups(488, 8)
        np.testing.assert_array_equal(grouped_random_select(488, p, 9), np.arange(488))

    def test_multiples_equal_comb_unions(self):
        p = partition_groups(488, 8)
        for j in range(1, 9):
            np.testing.assert_array_equal(
                grouped_random_select(61 * j, p, j), np.sort(np.concatenate(p.groups[:j]))
            )

    def test_fixed(self):
        np.testing.assert_array_equal(fixed_select(8, 8), np.arange(8))
        np.testing.assert_array_equal(fixed_select(4, 8), [0, 2, 4, 6])
        np.testing.assert_array_equal(fixed_select(1, 488), [0])

    @settings(max_examples=80, deadline=None)
    @given(v=st.integers(1, 600), data=st.data())
    def test_fixed_gap_bound(self, v, data):
        k = data.draw(st.integers(1, v))
        m = fixed_select(k, v)
        assert np.unique(m).size == k
        assert _circular_max_gap(m, v) <= -(-v // k) + 1

    def test_random(self):
        np.testing.assert_array_equal(random_select(488, 488, 1), np.arange(488))
        np.testing.assert_array_equal(random_select(60, 488, 5), random_select(60, 488, 5))
        assert not np.array_equal(random_select(60, 488, 5), random_select(60, 488, 6))

    @pytest.mark.parametrize("k", [0, 489])
    def test_out_of_range(self, k):
        p = partition_groups(488, 8)
        for strategy in ("grouped-random", "random", "fixed"):
            with pytest.raises(ValueError):
                select(strategy, k, p, 0)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            select("uniform", 5, partition_groups(10, 2), 0)

    def test_seeded_reproducibility(self):
        p = partition_groups(180, 8)
        for strategy in ("grouped-random", "random", "fixed"):
            a = select(strategy, 37, p, np.random.default_rng(11))
            b = select(strategy, 37, p, np.random.default_rng(11))
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=60, deadline=None)
    @given(v=st.integers(2, 300), data=st.data())
    def test_grouped_random_properties(self, v, data):
        c = data.draw(st.integers(1, v))
        k = data.draw(st.integers(1, v))
        seed = data.draw(st.integers(0, 2**32 - 1))
        p = partition_groups(v, c)
        m = grouped_random_select(k, p, seed)
        assert m.size == k and np.unique(m).size == k
        # every group before the partial one is taken whole
        sizes = np.cumsum([g.size for g in p.groups])
        full = int(np.searchsorted(sizes, k, side="right"))
        for g in p.groups[:full]:
            assert np.isin(g, m).all()


class TestTrajectory:
    @pytest.mark.parametrize("v,T,k_min", [(488, 100, 23), (180, 50, 9)])
    def test_nesting_exhaustive(self, v, T, k_min):
        sched = build_schedule(v, T, k_min)
        traj = build_trajectory(sched, partition_groups(v, 8), np.random.default_rng(0))
        np.testing.assert_array_equal(traj.masks[0], np.arange(v))
        assert traj.counts == list(sched.counts)
        for t in range(1, T + 1):
            assert set(traj.masks[t].tolist()) <= set(traj.masks[t - 1].tolist())
        assert traj.is_nested()

    def test_trajectory_masks_match_grouped_selection_shape(self):
        sched = build_schedule(488, 100, 23)
        p = partition_groups(488, 8)
        traj = build_trajectory(sched, p, np.random.default_rng(2))
        t = sched.counts.index(122) if 122 in sched.counts else None
        if t is not None:
            np.testing.assert_array_equal(traj.masks[t], np.sort(np.concatenate(p.groups[:2])))
        # the grouped order always starts with the first comb
        order = grouped_random_order(p, np.random.default_rng(2))
        np.testing.assert_array_equal(np.sort(order[:61]), p.groups[0])

    def test_schedule_partition_mismatch(self):
        with pytest.raises(ValueError):
            build_trajectory(build_schedule(180, 50, 9), partition_groups(100, 8), 0)

    def test_non_nested_detected(self):
        traj = MaskTrajectory((np.arange(4), np.array([0, 1]), np.array([2])))
        assert not traj.is_nested()

    def test_from_measured_full(self):
        sched = build_schedule(488, 100, 23)
        t, traj = trajectory_from_measured(np.arange(488), sched, partition_groups(488, 8), 0)
        assert t == 0
        np.testing.assert_array_equal(traj.masks[0], np.arange(488))

    def test_from_measured_equispaced(self):
        sched = build_schedule(488, 100, 23)
        measured = fixed_select(60, 488)
        t, traj = trajectory_from_measured(measured, sched, partition_groups(488, 8), 1)
        gaps = np.abs(np.array(sched.counts) - 60)
        assert gaps[t] == gaps.min()
        np.testing.assert_array_equal(traj.masks[t], measured)
        assert traj.is_nested()
        np.testing.assert_array_equal(traj.masks[0], np.arange(488))
        for s in range(t):
            assert traj.masks[s].size == sched.counts[s]

    def test_from_measured_minimum(self):
        sched = build_schedule(488, 100, 23)
        t, traj = trajectory_from_measured(fixed_select(23, 488), sched, partition_groups(488, 8), 0)
        assert t == 100

    def test_from_measured_off_schedule_count(self):
        sched = build_schedule(180, 50, 9)
        measured = np.sort(np.random.default_rng(0).choice(180, 44, replace=False))
        t, traj = trajectory_from_measured(measured, sched, partition_groups(180, 8), 0)
        np.testing.assert_array_equal(traj.masks[t], measured)
        assert traj.is_nested()
        assert all(np.isin(traj.masks[s], measured).all() for s in range(t, 51))

    def test_from_measured_rejects_empty(self):
        with pytest.raises(ValueError):
            trajectory_from_measured([], build_schedule(180, 50, 9), partition_groups(180, 8), 0)

    def test_from_measured_near_full_still_starts_above_zero(self):
        sched = build_schedule(180, 50, 9)
        measured = np.delete(np.arange(180), [5, 60, 120, 170])
        t, traj = trajectory_from_measured(measured, sched, partition_groups(180, 8), 0)
        assert t == 1
        np.testing.assert_array_equal(traj.masks[1], measured)
        np.testing.assert_array_equal(traj.masks[0], np.arange(180))

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 180), seed=st.integers(0, 10_000))
    def test_from_measured_always_nested(self, m, seed):
        sched = build_schedule(180, 50, 9)
        measured = np.sort(np.random.default_rng(seed).choice(180, m, replace=False))
        t, traj = trajectory_from_measured(measured, sched, partition_groups(180, 8), seed)
        assert traj.is_nested()
        np.testing.assert_array_equal(traj.masks[t], measured)
        np.testing.assert_array_equal(traj.masks[0], np.arange(180))


class TestDegrade:
    @pytest.fixture
    def setup(self):
        sched = build_schedule(40, 10, 4)
        traj = build_trajectory(sched, partition_groups(40, 4), np.random.default_rng(5))
        y = np.random.default_rng(6).random((40, 7)) + 0.1
        return traj, y

    def test_identity_at_zero(self, setup):
        traj, y = setup
        np.testing.assert_array_equal(degrade(y, traj, 0).values, y)

    def test_idempotent_composition(self, setup):
        traj, y = setup
        for t in range(11):
            for u in range(11):
                a = degrade(degrade(y, traj, t), traj, u).values
                np.testing.assert_array_equal(a, degrade(y, traj, max(t, u)).values)

    def test_rows_outside_mask_zero(self, setup):
        traj, y = setup
        out = degrade(Sinogram(y), traj, 7)
        off = np.setdiff1d(np.arange(40), traj.masks[7])
        assert np.all(out.values[off].sum(axis=1) == 0)
        np.testing.assert_array_equal(out.mask, traj.masks[7])

    def test_out_of_range(self, setup):
        traj, y = setup
        with pytest.raises(ValueError):
            degrade(y, traj, 11)
