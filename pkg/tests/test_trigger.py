import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttattack.trigger import TriggerSpec, apply_trigger, patch_mask

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_patch_on_8x8_touches_16_pixels():
    spec = TriggerSpec("patch", dim=64, height=8, width=8, fraction=0.15)
    assert spec.patch_side == 2
    x = np.full(64, 0.3)
    assert np.count_nonzero(apply_trigger(x, spec) != x) == 16
    assert patch_mask(spec).sum() == 16


def test_patch_side_brute_force():
    for side in range(2, 20):
        for fraction in (0.1, 0.15, 0.25, 0.3, 0.5):
            spec = TriggerSpec("patch", dim=side * side, height=side, width=side, fraction=fraction)
            s = math.ceil(round(fraction * side, 9))
            # corner squares overlap once 2s exceeds the side
            expected = len({(r, c) for r0 in (0, side - s) for c0 in (0, side - s)
                            for r in range(r0, r0 + s) for c in range(c0, c0 + s)})
            assert patch_mask(spec).sum() == expected


def test_sig_zero_amplitude_is_identity():
    spec = TriggerSpec("sig", dim=16, height=4, width=4, amplitude=0.0)
    x = np.linspace(0, 1, 16)
    np.testing.assert_array_equal(apply_trigger(x, spec), x)


def test_sig_values_on_gray_image():
    w = 12
    spec = TriggerSpec("sig", dim=w * w, height=w, width=w, frequency=10, amplitude=16 / 255)
    out = apply_trigger(np.full(w * w, 0.5), spec).reshape(w, w)
    cols = np.clip(0.5 + 16 / 255 * np.sin(2 * np.pi * np.arange(w) * 10 / w), 0, 1)
    np.testing.assert_allclose(out, np.tile(cols, (w, 1)), atol=1e-15)


def test_non_square_dim_is_padded():
    spec = TriggerSpec.for_dim("patch", 10)
    assert (spec.height, spec.width) == (4, 4)
    assert apply_trigger(np.zeros(10), spec).shape == (10,)


@given(x=arrays(np.float64, (5, 16), elements=unit))
def test_patch_idempotent_and_in_range(x):
    spec = TriggerSpec.for_dim("patch", 16, fraction=0.25)
    once = apply_trigger(x, spec)
    np.testing.assert_array_equal(apply_trigger(once, spec), once)
    assert once.min() >= 0 and once.max() <= 1


@given(x=arrays(np.float64, (5, 25), elements=unit), amp=st.floats(0, 0.5))
def test_sig_bounded_by_amplitude(x, amp):
    spec = TriggerSpec.for_dim("sig", 25, amplitude=amp, frequency=3)
    out = apply_trigger(x, spec)
    assert np.max(np.abs(out - x)) <= amp + 1e-15
    assert out.min() >= 0 and out.max() <= 1


@given(x=arrays(np.float64, (6, 16), elements=unit), kind=st.sampled_from(["patch", "sig"]))
def test_trigger_commutes_with_batching(x, kind):
    spec = TriggerSpec.for_dim(kind, 16)
    rowwise = np.stack([apply_trigger(r, spec) for r in x])
    np.testing.assert_array_equal(apply_trigger(x, spec), rowwise)


def test_invalid_specs_and_geometry():
    with pytest.raises(ValueError):
        TriggerSpec("sig", dim=16, height=4, width=4, amplitude=-0.1)
    with pytest.raises(ValueError):
        TriggerSpec("sig", dim=16, height=4, width=4, frequency=2.5)
    with pytest.raises(ValueError):
        TriggerSpec("patch", dim=16, height=4, width=4, fraction=0.6)
    with pytest.raises(ValueError):
        TriggerSpec("patch", dim=17, height=4, width=4)
    with pytest.raises(ValueError):
        apply_trigger(np.zeros(9), TriggerSpec.for_dim("patch", 16))


def test_spec_dict_roundtrip():
    spec = TriggerSpec.for_dim("patch", 16, corners=("tl", "br"))
    assert TriggerSpec.from_dict(spec.to_dict()) == spec
