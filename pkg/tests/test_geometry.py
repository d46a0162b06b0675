import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advdepth.geometry import (
    CameraRig,
    disparity_to_depth,
    flip_merge,
    hflip,
    ramp_columns,
    warp,
)
from oracles import random_fractional_disparity, warp_oracle


def row(values):
    return torch.tensor(values, dtype=torch.float64).view(1, 1, 1, -1)


def const_disp(value, w, h=1):
    return torch.full((1, 1, h, w), value, dtype=torch.float64)


class TestWarpExamples:
    def test_zero_disparity_identity(self):
        out = warp(row([10, 20, 30, 40]), const_disp(0.0, 4), +1)
        assert out.flatten().tolist() == [10, 20, 30, 40]

    def test_one_pixel_shift_clamps_at_edge(self):
        out = warp(row([10, 20, 30, 40]), const_disp(0.25, 4), +1)
        assert out.flatten().tolist() == [20, 30, 40, 40]

    def test_half_pixel_interpolates(self):
        out = warp(row([10, 20, 30, 40]), const_disp(0.125, 4), +1)
        assert torch.allclose(out.flatten(), torch.tensor([15.0, 25, 35, 40], dtype=torch.float64))

    def test_negative_direction(self):
        out = warp(row([10, 20, 30, 40]), const_disp(0.25, 4), -1)
        assert out.flatten().tolist() == [10, 10, 20, 30]

    def test_left_right_roundtrip_on_interior(self):
        # shifting right by one pixel then back recovers all but the clamped column
        img = row([1.0, 2, 3, 4, 5, 6, 7, 8])
        d = const_disp(1 / 8, 8)
        back = warp(warp(img, d, +1), d, -1)
        assert back.flatten()[1:].tolist() == img.flatten()[1:].tolist()


class TestWarpErrors:
    def test_bad_direction(self):
        with pytest.raises(ValueError, match="direction"):
            warp(row([1, 2]), const_disp(0.0, 2), 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            warp(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 5))

    def test_non_finite_disparity(self):
        d = const_disp(0.0, 4)
        d[..., 1] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            warp(row([1, 2, 3, 4]), d)

    def test_multichannel_disparity_rejected(self):
        with pytest.raises(ValueError):
            warp(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4))


def test_warp_matches_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        img = rng.random((3, 6, 9))
        d = rng.uniform(0, 0.3, size=(6, 9))
        for direction in (1, -1):
            got = warp(torch.from_numpy(img)[None], torch.from_numpy(d)[None, None], direction)[0].numpy()
            np.testing.assert_allclose(got, warp_oracle(img, d, direction), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    img=arrays(np.float64, (2, 3, 5), elements=st.floats(-10, 10)),
)
def test_zero_disparity_is_identity_property(img):
    t = torch.from_numpy(img)[None]
    for direction in (1, -1):
        assert torch.equal(warp(t, torch.zeros(1, 1, 3, 5, dtype=torch.float64), direction), t)


@settings(max_examples=40, deadline=None)
@given(
    img=arrays(np.float64, (1, 2, 6), elements=st.floats(0, 1)),
    d=arrays(np.float64, (2, 6), elements=st.floats(0, 0.3)),
)
def test_warp_output_within_input_range(img, d):
    out = warp(torch.from_numpy(img)[None], torch.from_numpy(d)[None, None], 1)
    for i in range(2):
        assert out[0, 0, i].min() >= img[0, i].min() - 1e-12
        assert out[0, 0, i].max() <= img[0, i].max() + 1e-12


def test_warp_gradcheck_disparity_and_image():
    rng = np.random.default_rng(0)
    img = torch.from_numpy(rng.random((1, 2, 4, 4))).requires_grad_(True)
    d = torch.from_numpy(random_fractional_disparity(rng, (1, 1, 4, 4), 4, max_px=2)).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a, b: warp(a, b, 1), (img, d), eps=1e-6, atol=1e-6, rtol=1e-4)
    assert torch.autograd.gradcheck(lambda a, b: warp(a, b, -1), (img, d), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestDepth:
    rig = CameraRig(720.0, 0.54, 512)

    def test_example_value(self):
        assert float(disparity_to_depth(torch.tensor(0.05, dtype=torch.float64), self.rig)) == pytest.approx(15.1875)

    def test_cap_disparity(self):
        assert disparity_to_depth(np.array(0.0094921875), self.rig) == pytest.approx(80.0, abs=1e-9)

    def test_zero_disparity_finite(self):
        depth = disparity_to_depth(torch.zeros(3), self.rig)
        assert torch.isfinite(depth).all()
        assert float(depth[0]) == pytest.approx(720 * 0.54 / (1e-3 * 512))

    def test_numpy_and_torch_agree(self):
        d = np.linspace(0, 0.3, 11)
        np.testing.assert_allclose(disparity_to_depth(d, self.rig),
                                   disparity_to_depth(torch.from_numpy(d), self.rig).numpy())

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(1.001e-3, 1.0), b=st.floats(1.001e-3, 1.0))
    def test_strictly_decreasing(self, a, b):
        if a == b:
            return
        lo, hi = min(a, b), max(a, b)
        assert disparity_to_depth(np.array(lo), self.rig) > disparity_to_depth(np.array(hi), self.rig)

    def test_rig_validation(self):
        with pytest.raises(ValueError):
            CameraRig(0.0, 0.54, 512)
        with pytest.raises(ValueError):
            CameraRig(720.0, -1, 512)


class TestFlipMerge:
    def test_width_20(self):
        d = torch.full((1, 1, 2, 20), 0.2)
        out = flip_merge(d, torch.full_like(d, 0.4))
        assert torch.allclose(out[..., 19], torch.tensor(0.2))
        assert torch.allclose(out[..., 0], torch.tensor(0.4))
        assert torch.allclose(out[..., 1:19], torch.tensor(0.3))

    def test_width_40(self):
        d = torch.full((1, 1, 1, 40), 0.2)
        out = flip_merge(d, torch.full_like(d, 0.4))
        assert torch.allclose(out[..., 38:], torch.tensor(0.2))
        assert torch.allclose(out[..., :2], torch.tensor(0.4))
        assert torch.allclose(out[..., 2:38], torch.tensor(0.3))

    def test_ramp_columns(self):
        assert ramp_columns(20) == 1
        assert ramp_columns(40) == 2
        assert ramp_columns(512) == 26
        assert ramp_columns(10) == 0

    def test_inputs_not_modified(self):
        d = torch.full((1, 1, 1, 20), 0.2)
        f = torch.full_like(d, 0.4)
        flip_merge(d, f)
        assert torch.all(d == 0.2) and torch.all(f == 0.4)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            flip_merge(torch.zeros(1, 1, 2, 20), torch.zeros(1, 1, 2, 21))

    @settings(max_examples=40, deadline=None)
    @given(d=arrays(np.float32, (1, 1, 3, 25), elements=st.floats(0, 0.25, width=32)))
    def test_self_merge_identity(self, d):
        t = torch.from_numpy(d)
        assert torch.equal(flip_merge(t, t.clone()), t)

    def test_hflip_involution(self):
        t = torch.arange(12.0).view(1, 1, 3, 4)
        assert torch.equal(hflip(hflip(t)), t)
        assert hflip(t)[0, 0, 0].tolist() == [3, 2, 1, 0]
