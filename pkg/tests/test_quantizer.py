import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selquant.quantizer import (QuantizerSpec, dynamic_margin, quant_noise_cov,
                                quant_noise_variances, quantize)


class TestDynamicMargin:
    def test_direct_values(self):
        assert dynamic_margin(100.0, 0.0) == pytest.approx(60.0)
        assert dynamic_margin(0.0, 0.0) == 0.0
        assert dynamic_margin(100.0, 25.0) == pytest.approx(6 * np.sqrt(125.0))

    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            dynamic_margin(-1.0, 0.0)


class TestQuantize:
    def test_cell_center_is_fixed_point(self):
        spec = QuantizerSpec(bits=3, margin=60.0, center=5.0)
        for level in spec.levels:
            assert quantize(level, spec) == level

    def test_saturates_above_span(self):
        spec = QuantizerSpec(bits=3, margin=60.0, center=5.0)
        assert quantize(5.0 + 30.0 + 10.0, spec) == spec.levels[-1]
        assert quantize(5.0 - 30.0 - 10.0, spec) == spec.levels[0]

    def test_noise_variance_matches_uniform_model(self):
        # step well below the input spread keeps the Delta^2/12 model accurate
        spec = QuantizerSpec(bits=6, margin=12.0, center=0.0)
        rng = np.random.default_rng(99)
        v = rng.standard_normal(200_000)
        err = quantize(v, spec) - v
        assert abs(err.var() - spec.step**2 / 12.0) / (spec.step**2 / 12.0) < 0.05

    @given(st.floats(-100, 100), st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, a, b):
        spec = QuantizerSpec(bits=4, margin=40.0, center=-3.0)
        lo, hi = min(a, b), max(a, b)
        assert quantize(lo, spec) <= quantize(hi, spec)

    @given(st.floats(-200, 200))
    @settings(max_examples=200, deadline=None)
    def test_idempotent(self, v):
        spec = QuantizerSpec(bits=5, margin=70.0, center=1.5)
        once = quantize(v, spec)
        assert quantize(once, spec) == once

    @given(st.floats(-29.999, 29.999))
    @settings(max_examples=200, deadline=None)
    def test_in_span_error_bound(self, v):
        spec = QuantizerSpec(bits=4, margin=60.0, center=0.0)
        assert abs(quantize(v, spec) - v) <= spec.step / 2 + 1e-12

    def test_rejects_bits_outside_range(self):
        with pytest.raises(ValueError):
            QuantizerSpec(bits=0, margin=60.0)
        with pytest.raises(ValueError):
            QuantizerSpec(bits=9, margin=60.0)


class TestQuantNoise:
    def test_direct_entry(self):
        cov = quant_noise_cov([QuantizerSpec(bits=3, margin=60.0)])
        assert cov[0, 0] == pytest.approx(7.5**2 / 12.0)

    def test_extra_bit_quarters_the_noise(self):
        v3 = quant_noise_variances(60.0, 3)
        v4 = quant_noise_variances(60.0, 4)
        assert v3 / v4 == pytest.approx(4.0)

    def test_vanishing_step_gives_zero(self):
        assert quant_noise_variances(0.0, 5) == 0.0
        spec = QuantizerSpec(bits=1, margin=0.0, center=2.0)
        assert quantize(123.0, spec) == 2.0
