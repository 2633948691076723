import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentune.params import (
    Bounds,
    CostSample,
    DimensionMismatch,
    EmptyResult,
    InvalidConfig,
    OutOfBounds,
    OutOfUnitBox,
    ParamVector,
    Phase,
    ReplayBuffer,
    Space,
    denormalize,
    filter_stable,
    normalize,
)


def make_sample(theta, cost, phase=Phase.PHASE1, iteration=0, seed=0, env_id="env"):
    return CostSample(
        theta=ParamVector(np.asarray(theta, dtype=float)),
        cost=cost,
        phase=phase,
        iteration=iteration,
        seed=seed,
        env_id=env_id,
        stable=cost < 100.0,
    )


class TestBounds:
    def test_rejects_zero_width_dimension(self):
        with pytest.raises(InvalidConfig):
            Bounds(np.array([0.0, 1.0]), np.array([1.0, 1.0]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Bounds(np.array([0.0]), np.array([1.0, 2.0]))

    def test_immutable(self):
        b = Bounds(np.array([0.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            b.lower[0] = 5.0


class TestNormalize:
    def test_lower_maps_to_zeros(self):
        b = Bounds(np.array([-2.0, 3.0]), np.array([5.0, 9.0]))
        u = normalize(ParamVector(b.lower.copy()), b)
        assert u.space is Space.UNIT
        np.testing.assert_array_equal(u.values, np.zeros(2))

    def test_upper_maps_to_ones(self):
        b = Bounds(np.array([-2.0, 3.0]), np.array([5.0, 9.0]))
        u = normalize(ParamVector(b.upper.copy()), b)
        np.testing.assert_array_equal(u.values, np.ones(2))

    def test_hand_evaluated_affine_map(self):
        # (1-0)/(2-0) = 0.5 and (1-0)/(4-0) = 0.25
        b = Bounds(np.array([0.0, 0.0]), np.array([2.0, 4.0]))
        u = normalize(ParamVector(np.array([1.0, 1.0])), b)
        np.testing.assert_allclose(u.values, [0.5, 0.25], rtol=0, atol=0)

    def test_out_of_bounds_is_an_error_not_a_clamp(self):
        b = Bounds(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        with pytest.raises(OutOfBounds) as exc:
            normalize(ParamVector(np.array([0.5, 1.5])), b)
        assert exc.value.index == 1

    def test_dimension_mismatch(self):
        b = Bounds(np.array([0.0]), np.array([1.0]))
        with pytest.raises(DimensionMismatch):
            normalize(ParamVector(np.array([0.5, 0.5])), b)


class TestDenormalize:
    def test_midpoint_symmetry(self):
        b = Bounds(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        v = denormalize(ParamVector(np.array([0.5, 0.5]), Space.UNIT), b)
        np.testing.assert_array_equal(v.values, [0.0, 0.0])

    def test_hand_evaluated_corners(self):
        # u=1 on [0,1] -> 1; u=0 on [3,5] -> 3
        b = Bounds(np.array([0.0, 3.0]), np.array([1.0, 5.0]))
        v = denormalize(ParamVector(np.array([1.0, 0.0]), Space.UNIT), b)
        np.testing.assert_allclose(v.values, [1.0, 3.0], rtol=0, atol=0)

    def test_rejects_out_of_unit_box(self):
        b = Bounds(np.array([0.0]), np.array([1.0]))
        # the ORIGINAL tag skips the constructor range check, denormalize catches it
        with pytest.raises(OutOfUnitBox):
            denormalize(ParamVector(np.array([1.5])), b)
        # constructing a UNIT vector out of range raises immediately
        with pytest.raises(OutOfUnitBox):
            ParamVector(np.array([1.5]), Space.UNIT)


# box scales typical of controller-gain spaces; extreme offset/width ratios
# lose digits to cancellation and are rejected at Bounds construction anyway
bounded_boxes = st.integers(min_value=1, max_value=8).flatmap(
    lambda d: st.tuples(
        st.lists(
            st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
            min_size=d,
            max_size=d,
        ),
        st.lists(
            st.floats(min_value=0.5, max_value=1e3, allow_nan=False),
            min_size=d,
            max_size=d,
        ),
        st.lists(
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            min_size=d,
            max_size=d,
        ),
    )
)


@given(bounded_boxes)
@settings(max_examples=200, deadline=None)
def test_round_trip_identity(data):
    lows, widths, fracs = data
    lo = np.array(lows)
    hi = lo + np.array(widths)
    b = Bounds(lo, hi)
    theta = ParamVector(lo + np.array(fracs) * (hi - lo))
    back = denormalize(normalize(theta, b), b)
    np.testing.assert_allclose(back.values, theta.values, rtol=1e-12, atol=1e-12)
    u = ParamVector(np.array(fracs), Space.UNIT)
    u_back = normalize(denormalize(u, b), b)
    np.testing.assert_allclose(u_back.values, u.values, rtol=1e-12, atol=1e-12)


class TestFilterStable:
    def test_strict_inequality_at_threshold(self):
        buf = ReplayBuffer(d=1)
        for c in [100.0, 99.99, 6.17]:
            buf.append(make_sample([0.0], c))
        kept = filter_stable(buf, 100.0)
        assert len(kept) == 2
        assert [s.stable for s in buf] == [False, True, True]

    def test_zero_threshold_is_empty(self):
        buf = ReplayBuffer(d=1)
        for c in [0.0, 1.0]:
            buf.append(make_sample([0.0], c))
        with pytest.raises(EmptyResult):
            filter_stable(buf, 0.0)

    def test_empty_buffer_rejected(self):
        with pytest.raises(EmptyResult):
            filter_stable(ReplayBuffer(d=1), 100.0)

    def test_count_matches_independent_rescan(self, tmp_path):
        # Oracle: re-read the serialized JSONL and count cost < threshold by hand.
        rng = np.random.default_rng(7)
        buf = ReplayBuffer(d=3)
        for i in range(5000):
            buf.append(make_sample(rng.uniform(size=3), float(rng.uniform(0, 200)), iteration=i))
        path = tmp_path / "buf.jsonl"
        buf.save(path)
        threshold = 100.0
        with open(path) as fh:
            oracle_count = sum(
                1 for line in fh if json.loads(line)["cost"] < threshold
            )
        assert len(filter_stable(buf, threshold)) == oracle_count

    @given(st.lists(st.floats(min_value=0, max_value=1000, allow_nan=False), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_threshold(self, costs):
        buf = ReplayBuffer(d=1)
        for c in costs:
            buf.append(make_sample([0.0], c))

        def count(th):
            try:
                return len(filter_stable(buf, th))
            except EmptyResult:
                return 0

        thresholds = sorted([0.0, 1.0, 10.0, 100.0, 1000.0, 1001.0])
        counts = [count(t) for t in thresholds]
        assert counts == sorted(counts)


class TestReplayBuffer:
    def test_dimension_enforced(self):
        buf = ReplayBuffer(d=2)
        with pytest.raises(DimensionMismatch):
            buf.append(make_sample([0.0], 1.0))

    def test_env_consistency_within_phase(self):
        buf = ReplayBuffer(d=1)
        buf.append(make_sample([0.0], 1.0, env_id="a"))
        with pytest.raises(InvalidConfig):
            buf.append(make_sample([0.0], 1.0, env_id="b"))
        # a different phase may use a different env (task generalization)
        buf.append(make_sample([0.0], 1.0, phase=Phase.PHASE3, env_id="b"))

    def test_cost_must_be_finite_nonnegative(self):
        with pytest.raises(InvalidConfig):
            make_sample([0.0], -1.0)
        with pytest.raises(InvalidConfig):
            make_sample([0.0], float("nan"))

    @given(
        st.lists(
            st.tuples(
                st.lists(st.floats(min_value=-1e12, max_value=1e12, allow_nan=False), min_size=2, max_size=2),
                st.floats(min_value=0, max_value=1e12, allow_nan=False),
            ),
            min_size=1,
            max_size=20,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_jsonl_round_trip_bit_identical(self, rows):
        import tempfile

        buf = ReplayBuffer(d=2)
        for i, (theta, cost) in enumerate(rows):
            buf.append(make_sample(theta, cost, iteration=i))
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/buf.jsonl"
            buf.save(path)
            loaded = ReplayBuffer.load(path)
        assert len(loaded) == len(buf)
        for a, b in zip(buf, loaded):
            assert a.cost == b.cost  # exact, not approximate
            assert np.array_equal(a.theta.values, b.theta.values)
            assert (a.phase, a.iteration, a.seed, a.env_id, a.stable) == (
                b.phase,
                b.iteration,
                b.seed,
                b.env_id,
                b.stable,
            )
