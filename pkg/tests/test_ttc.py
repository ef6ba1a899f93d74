import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avrisk.ttc import DEFAULT_CAP, VehicleState, instantaneous_ttc, ttc_arrays, ttc_by_stepping


def random_pair(rng):
    ego = VehicleState(s=0.0, lane_offset=rng.uniform(-1, 1), v=rng.uniform(10, 30),
                       v_lat=rng.uniform(-1, 1))
    other = VehicleState(s=rng.uniform(-60, 120), lane_offset=rng.uniform(-6, 6), v=rng.uniform(0, 35),
                         v_lat=rng.uniform(-1.5, 1.5), length=rng.uniform(3.5, 6), width=rng.uniform(1.5, 2.5))
    return ego, other


def test_worked_example():
    ego = VehicleState(s=0.0, lane_offset=0.0, v=30.0, length=4.0)
    lead = VehicleState(s=50.0, lane_offset=0.0, v=20.0, length=4.0)
    assert instantaneous_ttc(ego, lead) == 4.6
    assert ttc_by_stepping(ego, lead) == pytest.approx(4.6, abs=1e-2)


def test_faster_lead_is_capped():
    ego = VehicleState(0.0, 0.0, 20.0)
    lead = VehicleState(30.0, 0.0, 25.0)
    assert instantaneous_ttc(ego, lead) == DEFAULT_CAP


def test_overlap_is_zero():
    a = VehicleState(0.0, 0.0, 20.0)
    b = VehicleState(2.0, 0.5, 10.0)
    assert instantaneous_ttc(a, b) == 0.0


def test_touching_boxes_do_not_overlap():
    a = VehicleState(0.0, 0.0, 20.0, length=4.0)
    b = VehicleState(4.0, 0.0, 20.0, length=4.0)
    assert instantaneous_ttc(a, b) == DEFAULT_CAP


def test_lateral_cut_in():
    ego = VehicleState(0.0, 0.0, 20.0, width=2.0)
    other = VehicleState(0.0, 3.5, 20.0, v_lat=-1.0, width=2.0)
    # lateral gap 3.5 closes to the 2.0 half-width sum after 1.5 s
    assert instantaneous_ttc(ego, other) == pytest.approx(1.5, abs=1e-12)


def test_oracle_agreement_on_random_pairs():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        ego, other = random_pair(rng)
        exact, stepped = instantaneous_ttc(ego, other), ttc_by_stepping(ego, other)
        if exact == DEFAULT_CAP or stepped == DEFAULT_CAP:
            assert abs(exact - stepped) <= 1e-2 or (exact >= DEFAULT_CAP - 1e-2 and stepped >= DEFAULT_CAP - 1e-2)
        worst = max(worst, abs(exact - stepped))
    assert worst <= 1e-2


finite = st.floats(-50, 50, allow_nan=False)


@given(finite, finite, finite, finite, finite, finite, finite)
@settings(max_examples=200, deadline=None)
def test_symmetry_and_translation(s1, y1, v0, v1, w1, shift, y0):
    a = VehicleState(0.0, y0 / 10, v0, 0.0)
    b = VehicleState(s1, y1 / 10, v1, w1 / 25)
    t = instantaneous_ttc(a, b)
    assert 0.0 <= t <= DEFAULT_CAP
    assert instantaneous_ttc(b, a) == pytest.approx(t, abs=1e-9)
    a2 = VehicleState(a.s + shift, a.lane_offset, a.v, a.v_lat)
    b2 = VehicleState(b.s + shift, b.lane_offset, b.v, b.v_lat)
    assert instantaneous_ttc(a2, b2) == pytest.approx(t, abs=1e-9)


def test_vectorised_matches_scalar():
    rng = np.random.default_rng(5)
    pairs = [random_pair(rng) for _ in range(50)]
    rows0 = np.array([p[0].as_row() for p in pairs]).T
    rows1 = np.array([p[1].as_row() for p in pairs]).T
    vec = ttc_arrays(*rows0, *rows1)
    assert np.array_equal(vec, [instantaneous_ttc(*p) for p in pairs])


def test_invalid_state():
    with pytest.raises(ValueError):
        VehicleState(0.0, 0.0, 1.0, length=0.0)
    with pytest.raises(ValueError):
        VehicleState(0.0, 0.0, float("nan"))
