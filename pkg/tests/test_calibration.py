from __future__ import annotations

import numpy as np
import pytest

from riskloop.calibration import (CalibrationState, calibrate,
                                  maybe_update_temperature, record_observation)


class TestCalibrate:
    def test_fixed_point_at_half(self):
        for temperature in (0.5, 1.0, 1.7, 2.0):
            assert calibrate(0.5, temperature) == pytest.approx(0.5)

    def test_hand_values(self):
        # sigma(0.3) and sigma(0.6) evaluated by hand
        assert calibrate(0.8, 1.0) == pytest.approx(0.574443, abs=1e-6)
        assert calibrate(0.8, 0.5) == pytest.approx(0.645656, abs=1e-6)

    def test_monotone_in_u(self):
        rng = np.random.default_rng(2)
        for temperature in (0.5, 1.0, 2.0):
            values = sorted(rng.random(50))
            mapped = [calibrate(v, temperature) for v in values]
            assert all(a < b for a, b in zip(mapped, mapped[1:])
                       if abs(a - b) > 0)  # strictly increasing off ties
            for u1, u2 in zip(values, values[1:]):
                if u1 < u2:
                    assert calibrate(u1, temperature) < calibrate(u2, temperature)

    def test_smaller_temperature_sharpens(self):
        for u in (0.6, 0.8, 0.99):
            assert calibrate(u, 0.5) > calibrate(u, 1.5)
        for u in (0.01, 0.2, 0.4):
            assert calibrate(u, 0.5) < calibrate(u, 1.5)

    def test_temperature_range_enforced(self):
        with pytest.raises(ValueError):
            calibrate(0.5, 0.4)
        with pytest.raises(ValueError):
            calibrate(0.5, 2.5)


class TestObservationWindow:
    def test_append(self):
        state = CalibrationState()
        record_observation(state, 0.2, True)
        assert len(state.observations) == 1
        assert state.since_update == 1

    def test_fifo_eviction_at_capacity(self):
        state = CalibrationState(capacity=200)
        for i in range(200):
            record_observation(state, 0.0, True)
        record_observation(state, 1.0, False)
        assert len(state.observations) == 200
        assert state.observations[-1] == (1.0, False)
        assert state.observations[0] == (0.0, True)

    def test_counter_reaches_interval(self):
        state = CalibrationState(update_interval=20)
        for _ in range(20):
            record_observation(state, 0.5, True)
        assert state.since_update == 20


class TestTemperatureUpdate:
    def _filled(self, temperature, observations):
        state = CalibrationState(temperature=temperature)
        for u, passed in observations:
            record_observation(state, u, passed)
        state.since_update = state.update_interval
        return state

    def test_overconfidence_raises_temperature(self):
        observations = [(0.1, i % 2 == 0) for i in range(10)]  # Acc_low = 0.5
        state, updated = maybe_update_temperature(self._filled(1.0, observations))
        assert updated and state.temperature == pytest.approx(1.1)

    def test_underconfidence_lowers_temperature(self):
        observations = [(0.9, i != 0) for i in range(10)]  # Acc_high = 0.9
        state, updated = maybe_update_temperature(self._filled(1.0, observations))
        assert updated and state.temperature == pytest.approx(0.9)

    def test_upper_clamp(self):
        observations = [(0.1, False) for _ in range(10)]
        state, updated = maybe_update_temperature(self._filled(1.9, observations))
        assert updated and state.temperature == 2.0

    def test_no_op_before_interval(self):
        state = CalibrationState()
        record_observation(state, 0.1, False)
        state, updated = maybe_update_temperature(state)
        assert not updated and state.temperature == 1.0
        assert state.since_update == 1

    def test_small_buckets_ignored(self):
        observations = [(0.1, False)] * 4 + [(0.5, True)] * 16
        state, updated = maybe_update_temperature(self._filled(1.0, observations))
        assert not updated and state.temperature == 1.0

    def test_overconfidence_branch_takes_precedence(self):
        # both conditions hold; the overconfidence correction wins
        observations = [(0.1, False)] * 6 + [(0.9, True)] * 6
        state, updated = maybe_update_temperature(self._filled(1.0, observations))
        assert updated and state.temperature == pytest.approx(1.1)

    def test_counter_resets_even_without_update(self):
        observations = [(0.5, True)] * 20
        state, updated = maybe_update_temperature(self._filled(1.0, observations))
        assert not updated and state.since_update == 0

    def test_bounds_hold_under_fuzz(self):
        rng = np.random.default_rng(13)
        state = CalibrationState()
        for _ in range(10_000):
            record_observation(state, float(rng.random()), bool(rng.random() < 0.5))
            state, _ = maybe_update_temperature(state)
            assert 0.5 <= state.temperature <= 2.0
            assert state.since_update < state.update_interval
