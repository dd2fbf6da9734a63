import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from hbrl.belief import BeliefState
from hbrl.planner import (DIRECTIONS, LawnmowerState, PlannerSettings, candidate_paths, cell_weights,
                          path_coverage, pathmi_score, select_lawnmower_action, select_pathmi_action,
                          select_random_action, select_ucb_action)
from hbrl.world import GridSpec, OperationalRegion, footprint

GRID = GridSpec(300.0, 300.0, 10.0)
CENTER = np.array([150.0, 150.0])


def fresh_belief(n, staleness=0):
    b = BeliefState.prior(n)
    b.staleness[:] = staleness
    return b


def brute_scores(position, belief, s, d_max, radius, grid):
    """Independent PathMI scoring: explicit loops over waypoints and cells."""
    centers = grid.centers
    out = []
    for d in DIRECTIONS:
        seen = set()
        for step in range(1, s.horizon + 1):
            w = np.clip(position + step * d_max * d, 0, [grid.length_x, grid.length_y])
            for c in range(grid.n_cells):
                if np.hypot(*(centers[c] - w)) <= radius:
                    seen.add(c)
        total = 0.0
        for c in seen:
            xi = 1.0 / (1 + belief.obs_count[c])
            stale = min(belief.staleness[c] / s.staleness_norm, 1.0)
            total += (xi + s.staleness_weight * stale) * belief.variance[c]
        out.append(total)
    return out


class TestCandidatePaths:
    def test_east_offsets(self):
        paths = candidate_paths(CENTER, PlannerSettings(horizon=5), 15.0, GRID)
        np.testing.assert_allclose(paths[0].waypoints[:, 0] - CENTER[0], [15, 30, 45, 60, 75])
        np.testing.assert_allclose(paths[0].waypoints[:, 1], CENTER[1])

    def test_corner_clip(self):
        paths = candidate_paths([0.0, 0.0], PlannerSettings(), 15.0, GRID)
        sw = paths[7]
        assert tuple(sw.direction) == (-1, -1)
        assert not np.any(sw.waypoints)

    def test_eight_distinct(self):
        paths = candidate_paths(CENTER, PlannerSettings(horizon=3), 15.0, GRID)
        assert len(paths) == 8
        assert len({tuple(p.direction) for p in paths}) == 8
        assert all(len(p.waypoints) == 3 for p in paths)

    def test_diagonals_literal_or_normalized(self):
        literal = candidate_paths(CENTER, PlannerSettings(horizon=1), 10.0, GRID)[4]
        norm = candidate_paths(CENTER, PlannerSettings(horizon=1, normalize_diagonals=True), 10.0, GRID)[4]
        np.testing.assert_allclose(literal.waypoints[0] - CENTER, [10, 10])
        np.testing.assert_allclose(np.linalg.norm(norm.waypoints[0] - CENTER), 10.0)

    @hsettings(max_examples=50, deadline=None)
    @given(x=st.floats(0, 300), y=st.floats(0, 300), horizon=st.integers(1, 9), d_max=st.floats(1, 80))
    def test_waypoints_inside_area(self, x, y, horizon, d_max):
        for p in candidate_paths([x, y], PlannerSettings(horizon=horizon), d_max, GRID):
            assert p.waypoints.shape == (horizon, 2)
            assert np.all(p.waypoints >= 0) and np.all(p.waypoints <= 300)


class TestCoverage:
    def test_single_waypoint(self):
        path = candidate_paths(CENTER, PlannerSettings(horizon=1), 15.0, GRID)[2]
        np.testing.assert_array_equal(path_coverage(path, 40.0, GRID), footprint(path.waypoints[0], 40.0, GRID))

    def test_union_smaller_than_sum(self):
        path = candidate_paths(CENTER, PlannerSettings(horizon=5), 15.0, GRID)[0]
        cells = path_coverage(path, 40.0, GRID)
        assert len(cells) < sum(len(footprint(w, 40.0, GRID)) for w in path.waypoints)
        assert len(np.unique(cells)) == len(cells)

    def test_brute_force_union(self, rng):
        grid = GridSpec(300.0, 300.0, 10.0)
        centers = grid.centers
        for _ in range(5):
            p = rng.uniform(0, 300, 2)
            path = candidate_paths(p, PlannerSettings(horizon=4), rng.uniform(5, 40), grid)[rng.integers(8)]
            r = rng.uniform(5, 50)
            want = [c for c in range(grid.n_cells) if any(np.hypot(*(centers[c] - w)) <= r for w in path.waypoints)]
            np.testing.assert_array_equal(path_coverage(path, r, grid), want)


class TestScore:
    def test_unvisited_stale(self):
        s = PlannerSettings(staleness_norm=100.0)
        b = fresh_belief(GRID.n_cells, staleness=100)
        cells = np.arange(37)
        assert pathmi_score(cells, b, s) == pytest.approx(37 * 1.1)

    def test_saturated_vanishes(self):
        s = PlannerSettings()
        b = fresh_belief(GRID.n_cells)
        b.obs_count[:] = 10**12
        assert pathmi_score(np.arange(50), b, s) == pytest.approx(0.0, abs=1e-9)

    def test_single_observation_halves_novelty(self):
        s = PlannerSettings()
        b = fresh_belief(4)
        b.obs_count[1] = 1
        w = cell_weights(b, s)
        assert w[1] == pytest.approx(w[0] / 2)

    def test_staleness_saturates(self):
        s = PlannerSettings(staleness_norm=10.0)
        b = fresh_belief(3)
        b.staleness[:] = [5, 10, 500]
        w = cell_weights(b, s)
        assert w[0] == pytest.approx(1.05) and w[1] == pytest.approx(1.1) and w[2] == pytest.approx(1.1)

    @hsettings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), cell=st.integers(0, 99), bump=st.floats(0, 1))
    def test_monotone_in_variance(self, seed, cell, bump):
        rng = np.random.default_rng(seed)
        s = PlannerSettings()
        b = fresh_belief(100)
        b.variance = rng.uniform(0.01, 1, 100)
        b.obs_count = rng.integers(0, 5, 100)
        b.staleness = rng.integers(0, 300, 100)
        cells = np.unique(rng.integers(0, 100, 30))
        before = pathmi_score(cells, b, s)
        b.variance[cell] += bump
        assert pathmi_score(cells, b, s) >= before


class TestPathmiAction:
    def test_east_half_variance(self):
        b = fresh_belief(GRID.n_cells)
        b.variance[:] = 0.01
        b.variance[GRID.centers[:, 0] > 150] = 1.0
        s = PlannerSettings()
        scores = brute_scores(CENTER, b, s, 15.0, 30.0, GRID)
        assert int(np.argmax(scores)) in (0, 4, 6)
        a = select_pathmi_action(CENTER, b, s, 15.0, 30.0, GRID)
        np.testing.assert_allclose(a, DIRECTIONS[int(np.argmax(scores))] / np.linalg.norm(
            DIRECTIONS[int(np.argmax(scores))]))
        assert a[0] > 0

    def test_matches_brute_force(self, rng):
        s = PlannerSettings(horizon=3, staleness_norm=50.0)
        for _ in range(5):
            b = fresh_belief(GRID.n_cells)
            b.variance = rng.uniform(0.01, 1, GRID.n_cells)
            b.obs_count = rng.integers(0, 4, GRID.n_cells)
            b.staleness = rng.integers(0, 80, GRID.n_cells)
            p = rng.uniform(0, 300, 2)
            scores = brute_scores(p, b, s, 20.0, 25.0, GRID)
            k = int(np.argmax(scores))
            target = np.clip(p + 20.0 * DIRECTIONS[k], 0, 300)
            delta = target - p
            want = np.clip(delta / max(np.linalg.norm(delta), 1e-6), -1, 1)
            np.testing.assert_allclose(select_pathmi_action(p, b, s, 20.0, 25.0, GRID), want, atol=1e-12)

    def test_tie_breaks_to_east(self):
        grid = GridSpec(10000.0, 10000.0, 100.0)
        b = fresh_belief(grid.n_cells)
        a = select_pathmi_action([5000.0, 5000.0], b, PlannerSettings(horizon=1), 1000.0, 150.0, grid)
        np.testing.assert_allclose(a, [1.0, 0.0])

    def test_degenerate_corner(self):
        grid = GridSpec(10.0, 10.0, 10.0)
        a = select_pathmi_action([0.0, 0.0], fresh_belief(1), PlannerSettings(horizon=1), 15.0, 5.0, grid)
        assert np.all(np.abs(a) <= 1.0)
        # every candidate covers the single cell, so E wins and moves 10 m
        np.testing.assert_allclose(a, [1.0, 0.0])
        stuck = select_pathmi_action([10.0, 10.0], fresh_belief(1), PlannerSettings(horizon=1), 15.0, 5.0,
                                     GridSpec(10.0, 10.0, 10.0))
        np.testing.assert_array_equal(stuck, [0.0, 0.0])

    def test_greedy_reduction(self, rng):
        s = PlannerSettings(horizon=1, staleness_weight=0.0)
        for _ in range(5):
            b = fresh_belief(GRID.n_cells)
            b.variance = rng.uniform(0.01, 1, GRID.n_cells)
            p = rng.uniform(0, 300, 2)
            sums = [b.variance[footprint(np.clip(p + 15.0 * d, 0, 300), 30.0, GRID)].sum() for d in DIRECTIONS]
            k = int(np.argmax(sums))
            a = select_pathmi_action(p, b, s, 15.0, 30.0, GRID)
            target = np.clip(p + 15.0 * DIRECTIONS[k], 0, 300)
            np.testing.assert_allclose(a, (target - p) / max(np.linalg.norm(target - p), 1e-6), atol=1e-12)

    @hsettings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), factor=st.floats(0.01, 100))
    def test_scale_invariance(self, seed, factor):
        rng = np.random.default_rng(seed)
        s = PlannerSettings(horizon=2)
        b = fresh_belief(GRID.n_cells)
        b.variance = rng.uniform(0.01, 1, GRID.n_cells)
        p = rng.uniform(0, 300, 2)
        a = select_pathmi_action(p, b, s, 15.0, 30.0, GRID)
        b.variance = b.variance * factor
        np.testing.assert_array_equal(select_pathmi_action(p, b, s, 15.0, 30.0, GRID), a)

    def test_stateless(self, rng):
        s = PlannerSettings()
        b = fresh_belief(GRID.n_cells)
        b.variance = rng.uniform(0.01, 1, GRID.n_cells)
        first = select_pathmi_action(CENTER, b, s, 15.0, 30.0, GRID)
        select_pathmi_action([20.0, 280.0], b, s, 15.0, 30.0, GRID)
        np.testing.assert_array_equal(select_pathmi_action(CENTER, b, s, 15.0, 30.0, GRID), first)

    def test_mask_excludes_cells(self):
        b = fresh_belief(GRID.n_cells)
        mask = GRID.centers[:, 1] < 150
        a = select_pathmi_action(CENTER, b, PlannerSettings(), 15.0, 30.0, GRID, mask=mask)
        assert a[1] < 0


class TestUcb:
    def test_uniform_tie(self):
        grid = GridSpec(10000.0, 10000.0, 100.0)
        a = select_ucb_action([5000.0, 5000.0], fresh_belief(grid.n_cells), PlannerSettings(), 500.0, 150.0, grid)
        np.testing.assert_allclose(a, [1.0, 0.0])

    def test_kappa_zero_follows_intensity(self):
        b = fresh_belief(GRID.n_cells)
        b.variance = np.where(GRID.centers[:, 0] > 150, 1.0, 0.01)
        b.log_intensity = np.where(GRID.centers[:, 1] > 150, 1.0, 0.0)
        a = select_ucb_action(CENTER, b, PlannerSettings(ucb_kappa=0.0), 20.0, 30.0, GRID)
        assert a[1] > 0 and a[0] == 0.0

    def test_variance_lobe(self):
        b = fresh_belief(GRID.n_cells)
        b.variance[:] = 0.01
        lobe = np.hypot(*(GRID.centers - [60.0, 60.0]).T) < 50
        b.variance[lobe] = 1.0
        s = PlannerSettings()
        scores = []
        for d in DIRECTIONS:
            t = np.clip(CENTER + 40.0 * d, 0, 300)
            cells = footprint(t, 50.0, GRID)
            scores.append(sum(np.exp(b.log_intensity[c]) + 2.0 * np.sqrt(b.variance[c]) for c in cells))
        k = int(np.argmax(scores))
        assert tuple(DIRECTIONS[k]) == (-1, -1)
        a = select_ucb_action(CENTER, b, s, 40.0, 50.0, GRID)
        np.testing.assert_allclose(a, [-np.sqrt(0.5), -np.sqrt(0.5)])


class TestLawnmower:
    def region(self):
        return OperationalRegion(0, 0, 20, 0, 20)  # 200 x 200 m on GRID

    def test_first_leg_east(self):
        st_ = LawnmowerState.for_region(self.region(), GRID, 20.0, position=[20.0, 20.0])
        np.testing.assert_array_equal(select_lawnmower_action(st_, [20.0, 20.0], 15.0), [1.0, 0.0])

    def test_serpentine_turn(self):
        st_ = LawnmowerState.for_region(self.region(), GRID, 20.0, position=[20.0, 20.0])
        assert st_.lane_spacing == 40.0 and st_.x1 == 180.0
        a = select_lawnmower_action(st_, [180.0, 20.0], 15.0)
        assert a[0] == 0 and a[1] > 0
        # the lane change ends exactly on the next lane, then the leg runs west
        p = np.array([180.0, 20.0])
        for _ in range(3):
            p = p + 15.0 * select_lawnmower_action(st_, p, 15.0)
        assert p[1] == pytest.approx(60.0)
        np.testing.assert_array_equal(select_lawnmower_action(st_, p, 15.0), [-1.0, 0.0])

    def test_cycle_restarts(self):
        st_ = LawnmowerState.for_region(self.region(), GRID, 20.0, position=[20.0, 20.0])
        p = np.array([20.0, 20.0])
        lanes = []
        for _ in range(400):
            p = np.clip(p + 15.0 * select_lawnmower_action(st_, p, 15.0), 0, 300)
            lanes.append(st_.lane)
        assert max(lanes) == st_.n_lanes - 1
        assert lanes.count(0) > 0 and 0 in lanes[lanes.index(st_.n_lanes - 1):]

    def test_sweep_covers_region(self):
        region = self.region()
        st_ = LawnmowerState.for_region(region, GRID, 20.0, position=[20.0, 20.0])
        p = np.array([20.0, 20.0])
        seen = np.zeros(GRID.n_cells, bool)
        for _ in range(200):
            p = np.clip(p + 15.0 * select_lawnmower_action(st_, p, 15.0), 0, 300)
            seen[footprint(p, 20.0, GRID)] = True
        assert seen[region.mask(GRID)].mean() > 0.9

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            st_ = LawnmowerState.for_region(self.region(), GRID, 20.0, position=[20.0, 20.0])
            p = np.array([20.0, 20.0])
            path = []
            for _ in range(50):
                p = p + 15.0 * select_lawnmower_action(st_, p, 15.0)
                path.append(p.copy())
            runs.append(np.array(path))
        np.testing.assert_array_equal(*runs)


class TestRandom:
    def test_frequencies(self):
        rng = np.random.default_rng(7)
        draws = np.array([select_random_action(rng) for _ in range(100_000)])
        units = DIRECTIONS / np.linalg.norm(DIRECTIONS, axis=1, keepdims=True)
        idx = np.argmin(np.linalg.norm(draws[:, None, :] - units[None], axis=2), axis=1)
        freq = np.bincount(idx, minlength=8) / len(idx)
        np.testing.assert_allclose(freq, 0.125, atol=0.005)
        assert np.all(np.abs(draws) <= 1.0)

    def test_seeded(self):
        a = [select_random_action(np.random.default_rng(3)) for _ in range(2)]
        np.testing.assert_array_equal(*a)
