import math

import numpy as np
import pytest

from latentune import gp, turbo
from latentune.params import Bounds, CostSample, InvalidConfig, ParamVector, Phase


def make_objective(fn, stability_threshold=100.0):
    """Wrap a plain unit-box function into the CostSample callback."""

    def objective(u):
        cost = float(fn(np.asarray(u)))
        return CostSample(
            theta=ParamVector(np.asarray(u, dtype=float)),
            cost=cost,
            phase=Phase.PHASE1,
            iteration=0,
            seed=0,
            env_id="test",
            stable=cost < stability_threshold,
        )

    return objective


def sphere_at(center):
    center = np.asarray(center)
    return lambda u: float(np.sum((u - center) ** 2))


class TestInit:
    def test_region_count_matches_config(self):
        state = turbo.init(dim=4, m=10, seed=0)
        assert len(state.regions) == 10

    def test_single_region_still_valid(self):
        state = turbo.init(dim=3, m=1, seed=0)
        assert len(state.regions) == 1
        assert len(state.pending_points()) == state.config.n_init_per_region

    def test_fixed_seed_reproduces_design(self):
        a = turbo.init(dim=5, m=3, seed=42)
        b = turbo.init(dim=5, m=3, seed=42)
        for (ra, pa), (rb, pb) in zip(a.pending_points(), b.pending_points()):
            assert ra == rb
            np.testing.assert_array_equal(pa, pb)

    def test_designs_are_space_filling(self):
        # Latin hypercube property: one point per 1/n slab per dimension
        rng = np.random.default_rng(0)
        design = turbo.latin_hypercube(16, 3, rng)
        for j in range(3):
            strata = np.floor(design[:, j] * 16).astype(int)
            assert sorted(strata) == list(range(16))

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            turbo.init(dim=3, m=0)
        with pytest.raises(InvalidConfig):
            turbo.init(dim=3, m=2, n_init_per_region=1)


def drive_init(state, fn):
    obj = make_objective(fn)
    for _, point in state.pending_points():
        s = obj(point)
        turbo.observe(state, point, s.cost, sample=s)


class TestSuggestObserve:
    def test_single_candidate_inside_its_region_box(self):
        state = turbo.init(dim=2, m=3, seed=1)
        drive_init(state, sphere_at([0.4, 0.6]))
        cands = turbo.suggest(state, batch=1)
        assert len(cands) == 1
        point = cands[0]
        region_id, is_init = state.issued[point.tobytes()]
        assert not is_init
        region = state.regions[region_id]
        lo, hi = turbo._region_box(region)
        assert np.all(point >= lo) and np.all(point <= hi)
        assert np.all(point >= 0) and np.all(point <= 1)

    def test_identical_regions_tie_break_to_lowest_index(self):
        state = turbo.init(dim=2, m=3, seed=5)
        drive_init(state, sphere_at([0.5, 0.5]))
        # clone region 0's data and hyperparameters into the others
        r0 = state.regions[0]
        for r in state.regions[1:]:
            r.xs = [x.copy() for x in r0.xs]
            r.ys = list(r0.ys)
            r.params = r0.params
            r.center = r0.center.copy()
            r.length = r0.length
            r.best_cost = r0.best_cost
        cands = turbo.suggest(state, batch=1)
        region_id, _ = state.issued[cands[0].tobytes()]
        assert region_id == 0

    def test_suggest_requires_pending_evaluated(self):
        state = turbo.init(dim=2, m=1, seed=0)
        with pytest.raises(InvalidConfig):
            turbo.suggest(state, batch=1)

    def test_success_doubles_length_capped(self):
        state = turbo.init(dim=2, m=1, seed=3)
        drive_init(state, sphere_at([0.5, 0.5]))
        region = state.regions[0]
        length0 = region.length
        tau = state.config.success_tolerance
        # feed successive strict improvements through suggested candidates
        for k in range(tau):
            cands = turbo.suggest(state, batch=1)
            turbo.observe(state, cands[0], region.best_cost - 1e-3)
        assert region.length == pytest.approx(min(2 * length0, state.config.length_max))

    def test_failure_halves_length(self):
        state = turbo.init(dim=2, m=1, seed=3)
        drive_init(state, sphere_at([0.5, 0.5]))
        region = state.regions[0]
        length0 = region.length
        tau = state.config.failure_tolerance
        for _ in range(tau):
            cands = turbo.suggest(state, batch=1)
            turbo.observe(state, cands[0], region.best_cost + 1.0)
        assert region.length == pytest.approx(0.5 * length0)

    def test_collapse_triggers_restart_with_fresh_design(self):
        cfg = turbo.TurboConfig(m=1, length_init=0.8, length_min=0.5)
        state = turbo.init(dim=2, m=1, seed=7, config=cfg)
        drive_init(state, sphere_at([0.5, 0.5]))
        region = state.regions[0]
        tau = state.config.failure_tolerance
        # one halving drops 0.8 below length_min=0.5 -> restart
        for _ in range(tau):
            cands = turbo.suggest(state, batch=1)
            turbo.observe(state, cands[0], region.best_cost + 1.0)
        assert region.restarts == 1
        assert region.length == cfg.length_init
        assert region.xs == [] and len(region.pending) == state.config.n_init_per_region

    def test_retire_when_restarts_disabled(self):
        cfg = turbo.TurboConfig(m=1, length_init=0.8, length_min=0.5, restarts_enabled=False)
        state = turbo.init(dim=2, m=1, seed=7, config=cfg)
        drive_init(state, sphere_at([0.5, 0.5]))
        region = state.regions[0]
        for _ in range(state.config.failure_tolerance):
            cands = turbo.suggest(state, batch=1)
            turbo.observe(state, cands[0], region.best_cost + 1.0)
        assert region.dead
        with pytest.raises(turbo.NoActiveRegions):
            turbo.suggest(state, batch=1)

    def test_unknown_candidate_rejected(self):
        state = turbo.init(dim=2, m=1, seed=0)
        with pytest.raises(turbo.UnknownCandidate):
            turbo.observe(state, np.array([0.25, 0.25]), 1.0)

    def test_suggest_concentrates_near_optimum(self):
        # Monte-Carlo oracle: after 20 evaluations on a quadratic bowl the
        # suggested candidates should sit closer to the optimum than uniform
        # random points do
        optimum = np.array([0.3, 0.7])
        wins = 0
        for seed in range(10):
            cfg = turbo.TurboConfig(m=1, n_init_per_region=20, seed=seed)
            state = turbo.init(dim=2, m=1, seed=seed, config=cfg)
            drive_init(state, sphere_at(optimum))
            cands = turbo.suggest(state, batch=8)
            d_sugg = np.mean([np.linalg.norm(c - optimum) for c in cands])
            rng = np.random.default_rng(seed + 1000)
            d_unif = np.mean(
                np.linalg.norm(rng.uniform(size=(8, 2)) - optimum, axis=1)
            )
            wins += d_sugg < d_unif
        assert wins >= 6  # median strictly better


class TestRun:
    def test_budget_equal_to_initial_design(self):
        cfg = turbo.TurboConfig(m=2, n_init_per_region=4, seed=0)
        fn = sphere_at([0.2, 0.9])
        best, trace, buffer = turbo.run(make_objective(fn), dim=2, budget=8, config=cfg)
        assert len(trace) == 8
        assert len(buffer) == 8
        assert best.cost == min(s.cost for s in buffer)

    def test_trace_is_monotone_and_exact_length(self):
        cfg = turbo.TurboConfig(m=2, n_init_per_region=4, batch=3, seed=1)
        best, trace, buffer = turbo.run(
            make_objective(sphere_at([0.5, 0.5])), dim=2, budget=30, config=cfg
        )
        assert len(trace) == 30
        bests = [row.best_cost_so_far for row in trace]
        assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
        assert [row.iteration for row in trace] == list(range(1, 31))

    def test_budget_below_design_rejected(self):
        cfg = turbo.TurboConfig(m=3, n_init_per_region=5)
        with pytest.raises(InvalidConfig):
            turbo.run(make_objective(sphere_at([0.5, 0.5])), dim=2, budget=10, config=cfg)

    def test_one_dim_mono_region_finds_optimum(self):
        finals = []
        for seed in range(10):
            cfg = turbo.TurboConfig(m=1, n_init_per_region=4, seed=seed)
            best, trace, _ = turbo.run(
                make_objective(lambda u: (u[0] - 0.37) ** 2),
                dim=1,
                budget=50,
                config=cfg,
            )
            finals.append(abs(best.theta.values[0] - 0.37))
        assert np.median(finals) < 1e-2

    def test_beats_random_search_on_small_problem(self):
        fn = sphere_at([0.15, 0.85, 0.4])
        turbo_best, random_best = [], []
        for seed in range(5):
            cfg = turbo.TurboConfig(m=2, n_init_per_region=6, batch=2, seed=seed)
            best, _, _ = turbo.run(make_objective(fn), dim=3, budget=80, config=cfg)
            turbo_best.append(best.cost)
            rng = np.random.default_rng(seed)
            random_best.append(min(fn(rng.uniform(size=3)) for _ in range(80)))
        assert np.median(turbo_best) < np.median(random_best)

    def test_fully_deterministic(self):
        cfg = turbo.TurboConfig(m=2, n_init_per_region=4, batch=2, seed=9)
        fn = sphere_at([0.6, 0.3])
        r1 = turbo.run(make_objective(fn), dim=2, budget=24, config=cfg)
        cfg2 = turbo.TurboConfig(m=2, n_init_per_region=4, batch=2, seed=9)
        r2 = turbo.run(make_objective(fn), dim=2, budget=24, config=cfg2)
        for a, b in zip(r1[1], r2[1]):
            assert (a.iteration, a.eval_cost, a.best_cost_so_far, a.region_id, a.side_length) == (
                b.iteration,
                b.eval_cost,
                b.best_cost_so_far,
                b.region_id,
                b.side_length,
            )
        for sa, sb in zip(r1[2], r2[2]):
            assert np.array_equal(sa.theta.values, sb.theta.values)
            assert sa.cost == sb.cost

    def test_length_never_exceeds_max(self):
        cfg = turbo.TurboConfig(m=1, n_init_per_region=4, seed=2, success_tolerance=1)
        state = turbo.init(dim=2, m=1, seed=2, config=cfg)
        drive_init(state, sphere_at([0.5, 0.5]))
        region = state.regions[0]
        for k in range(6):
            cands = turbo.suggest(state, batch=1)
            turbo.observe(state, cands[0], region.best_cost - 1.0 / (k + 1))
        assert region.length <= cfg.length_max

    def test_evaluation_error_carries_theta(self):
        def bad(u):
            raise RuntimeError("boom")

        cfg = turbo.TurboConfig(m=1, n_init_per_region=2, seed=0)
        with pytest.raises(turbo.EvaluationError) as exc:
            turbo.run(bad, dim=2, budget=4, config=cfg)
        assert exc.value.theta.shape == (2,)

    def test_trace_csv_round_trip(self, tmp_path):
        cfg = turbo.TurboConfig(m=1, n_init_per_region=4, seed=0)
        _, trace, _ = turbo.run(
            make_objective(sphere_at([0.5, 0.5])), dim=2, budget=10, config=cfg
        )
        path = tmp_path / "trace.csv"
        turbo.write_trace_csv(trace, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,eval_cost,best_cost_so_far,region_id,side_length"
        assert len(lines) == 11
        cells = lines[1].split(",")
        assert float(cells[1]) == trace[0].eval_cost  # full-precision round trip


class TestUnitObjective:
    def test_denormalizes_and_tags(self):
        bounds = Bounds(np.array([-2.0, 0.0]), np.array([2.0, 10.0]))
        calls = []

        def env_eval(theta):
            calls.append(theta.values.copy())
            return float(np.sum(theta.values**2))

        obj = turbo.unit_objective(env_eval, bounds, "env-x", Phase.PHASE1, seed=4)
        s = obj(np.array([0.5, 0.1]))
        np.testing.assert_allclose(calls[0], [0.0, 1.0])
        assert s.env_id == "env-x"
        assert s.stable == (s.cost < 100.0)
