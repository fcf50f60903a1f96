"""Trigger tests: total variation, flow projection, bilinear warping."""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stealthflip import autodiff as ad
from stealthflip import trigger as tg
from stealthflip.errors import DimensionError, FormatError, InputError


def naive_tv(flow):
    """Oracle: explicit double loop, each directed neighbor pair counted."""
    H, W, _ = flow.shape
    total = 0.0
    for r in range(H):
        for c in range(W):
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W:
                    du = flow[r, c, 0] - flow[rr, cc, 0]
                    dv = flow[r, c, 1] - flow[rr, cc, 1]
                    total += np.sqrt(du * du + dv * dv)
    return total


def naive_warp(images, trig):
    """Oracle: scalar loops for flow + noise + clip on a NHWC batch."""
    B, H, W, C = images.shape
    out = np.zeros_like(images)
    for b in range(B):
        for r in range(H):
            for c in range(W):
                u = r + trig.flow[r, c, 0]
                v = c + trig.flow[r, c, 1]
                u = min(max(u, 0.0), H - 1)
                v = min(max(v, 0.0), W - 1)
                u0 = min(int(np.floor(u)), H - 2) if H > 1 else 0
                v0 = min(int(np.floor(v)), W - 2) if W > 1 else 0
                u1, v1 = min(u0 + 1, H - 1), min(v0 + 1, W - 1)
                au, av = u - u0, v - v0
                for ch in range(C):
                    corners = [
                        (1 - au) * (1 - av) * (images[b, u0, v0, ch] + trig.noise[u0, v0, ch]),
                        (1 - au) * av * (images[b, u0, v1, ch] + trig.noise[u0, v1, ch]),
                        au * (1 - av) * (images[b, u1, v0, ch] + trig.noise[u1, v0, ch]),
                        au * av * (images[b, u1, v1, ch] + trig.noise[u1, v1, ch]),
                    ]
                    out[b, r, c, ch] = min(max(sum(corners), 0.0), 1.0)
    return out


class TestTotalVariation:
    def test_constant_flow_is_zero(self):
        assert tg.tv(np.full((5, 5, 2), 0.7)) == 0.0

    def test_matches_double_loop(self, rng):
        flow = rng.standard_normal((6, 7, 2)) * 0.3
        assert tg.tv(flow) == pytest.approx(naive_tv(flow), rel=1e-12)

    def test_two_pixel_example(self):
        # single horizontal pair differing by (3,4): |.|=5, counted twice
        flow = np.zeros((1, 2, 2))
        flow[0, 1] = (3.0, 4.0)
        assert tg.tv(flow) == pytest.approx(10.0, abs=1e-12)

    def test_tv_op_value_and_gradcheck(self, rng):
        flow = rng.standard_normal((4, 5, 2)) * 0.5
        g = ad.Graph()
        flow_t = ad.Tensor(flow, requires_grad=True)
        out = tg.tv_op(g, flow_t)
        assert out.data == pytest.approx(tg.tv(flow), rel=1e-9, abs=1e-9)
        report = ad.grad_check(tg.tv_op, [ad.Tensor(flow, requires_grad=True)],
                               tolerance=1e-4, seed=7)
        assert report.passed, str(report)

    def test_tv_op_flat_flow_has_zero_grad(self):
        g = ad.Graph()
        flow_t = ad.Tensor(np.zeros((3, 3, 2)), requires_grad=True)
        out = tg.tv_op(g, flow_t)
        g.backward(out)
        assert np.all(np.isfinite(flow_t.grad))
        np.testing.assert_array_equal(flow_t.grad, np.zeros((3, 3, 2)))


class TestProjections:
    def test_noise_clip(self):
        noise = np.array([[[-0.5], [0.02]], [[0.5], [0.0]]])
        out = tg.project_noise(noise, 0.04)
        np.testing.assert_array_equal(out, [[[-0.04], [0.02]], [[0.04], [0.0]]])

    def test_flow_within_budget_untouched(self, rng):
        flow = rng.standard_normal((4, 4, 2)) * 1e-4
        budget = tg.tv(flow) + 1.0
        np.testing.assert_array_equal(tg.project_flow(flow, budget), flow)

    def test_flow_rescale_hits_budget(self, rng):
        flow = rng.standard_normal((5, 5, 2))
        budget = 0.25
        out = tg.project_flow(flow, budget)
        assert tg.tv(out) == pytest.approx(budget, rel=1e-9)

    def test_flow_projection_idempotent(self, rng):
        flow = rng.standard_normal((5, 5, 2))
        once = tg.project_flow(flow, 0.1)
        twice = tg.project_flow(once, 0.1)
        np.testing.assert_allclose(twice, once, rtol=0, atol=1e-15)

    def test_zero_flow_stays_zero(self):
        out = tg.project_flow(np.zeros((3, 3, 2)), 0.01)
        np.testing.assert_array_equal(out, np.zeros((3, 3, 2)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 10.0))
    def test_flow_feasible_after_projection(self, seed, budget):
        flow = np.random.default_rng(seed).standard_normal((4, 6, 2)) * 3
        out = tg.project_flow(flow, budget)
        assert tg.tv(out) <= budget + 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.001, 0.5))
    def test_noise_feasible_after_projection(self, seed, budget):
        noise = np.random.default_rng(seed).standard_normal((4, 4, 1))
        out = tg.project_noise(noise, budget)
        assert np.max(np.abs(out)) <= budget


class TestWarpForward:
    def test_zero_trigger_is_identity(self, rng):
        x = rng.random((3, 6, 6, 1))
        trig = tg.zero_trigger(6, 6, 1)
        np.testing.assert_array_equal(tg.warp(x, trig), x)

    def test_unit_shift_on_two_pixels(self):
        # flow (0,1) everywhere on a 1x2 image: both pixels sample column 1
        x = np.array([[[[0.0], [1.0]]]])
        trig = tg.zero_trigger(1, 2, 1)
        trig.flow[..., 1] = 1.0
        out = tg.warp(x, trig)
        np.testing.assert_allclose(out, [[[[1.0], [1.0]]]], atol=1e-15)

    def test_half_shift_interpolates(self):
        x = np.array([[[[0.0], [1.0]]]])
        trig = tg.zero_trigger(1, 2, 1)
        trig.flow[..., 1] = 0.5
        out = tg.warp(x, trig)
        np.testing.assert_allclose(out[0, 0, 0, 0], 0.5, atol=1e-15)
        np.testing.assert_allclose(out[0, 0, 1, 0], 1.0, atol=1e-15)  # clamped

    def test_noise_only_adds_and_clips(self):
        x = np.array([[[[0.95], [0.2]]]])
        trig = tg.zero_trigger(1, 2, 1)
        trig.noise[:] = 0.1
        out = tg.warp(x, trig)
        np.testing.assert_allclose(out, [[[[1.0], [0.3]]]], atol=1e-15)

    def test_matches_scalar_oracle(self, rng):
        x = rng.random((2, 5, 4, 3))
        trig = tg.Trigger(noise=rng.uniform(-0.1, 0.1, (5, 4, 3)),
                          flow=rng.uniform(-1.5, 1.5, (5, 4, 2)),
                          noise_budget=0.1, flow_budget=100.0)
        np.testing.assert_allclose(tg.warp(x, trig), naive_warp(x, trig),
                                   rtol=0, atol=1e-12)

    def test_output_range(self, rng):
        x = rng.random((4, 8, 8, 1))
        trig = tg.Trigger(noise=rng.uniform(-0.2, 0.2, (8, 8, 1)),
                          flow=rng.uniform(-3, 3, (8, 8, 2)),
                          noise_budget=0.2, flow_budget=1e6)
        out = tg.warp(x, trig)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_warp_is_pure(self, rng):
        x = rng.random((2, 4, 4, 1))
        trig = tg.Trigger(noise=rng.uniform(-0.05, 0.05, (4, 4, 1)),
                          flow=rng.uniform(-0.5, 0.5, (4, 4, 2)),
                          noise_budget=0.05, flow_budget=1e6)
        x0, n0, f0 = x.copy(), trig.noise.copy(), trig.flow.copy()
        tg.warp(x, trig)
        np.testing.assert_array_equal(x, x0)
        np.testing.assert_array_equal(trig.noise, n0)
        np.testing.assert_array_equal(trig.flow, f0)


class TestWarpOp:
    def test_value_matches_pure_warp(self, rng):
        from stealthflip.quantized import nhwc_to_nchw

        x = rng.random((2, 5, 5, 2))
        noise = rng.uniform(-0.08, 0.08, (5, 5, 2))
        flow = rng.uniform(-1.0, 1.0, (5, 5, 2))
        trig = tg.Trigger(noise=noise, flow=flow, noise_budget=0.08,
                          flow_budget=1e6)
        g = ad.Graph()
        out = tg.warp_op(g, ad.Tensor(nhwc_to_nchw(x)),
                         ad.Tensor(noise, requires_grad=True),
                         ad.Tensor(flow, requires_grad=True))
        np.testing.assert_allclose(out.data, nhwc_to_nchw(tg.warp(x, trig)),
                                   rtol=0, atol=1e-12)

    def test_gradcheck_interior(self, rng):
        # keep samples away from clip/clamp kinks so differences are smooth
        x = rng.uniform(0.3, 0.7, (2, 1, 4, 4))
        noise = rng.uniform(-0.02, 0.02, (4, 4, 1))
        flow = rng.uniform(0.1, 0.4, (4, 4, 2))
        op = lambda g, n, f: tg.warp_op(g, ad.Tensor(x), n, f)
        report = ad.grad_check(
            op,
            [ad.Tensor(noise, requires_grad=True),
             ad.Tensor(flow, requires_grad=True)],
            tolerance=1e-4, seed=8)
        assert report.passed, str(report)

    def test_noise_grad_reaches_black_pixels(self):
        # exact-0.0 backgrounds must stay trainable through the final clip
        x = np.zeros((1, 1, 3, 3))
        g = ad.Graph()
        noise_t = ad.Tensor(np.zeros((3, 3, 1)), requires_grad=True)
        flow_t = ad.Tensor(np.zeros((3, 3, 2)), requires_grad=True)
        out = tg.warp_op(g, ad.Tensor(x), noise_t, flow_t)
        g.backward(out, seed=np.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(noise_t.grad, np.ones((3, 3, 1)), atol=1e-12)


class TestInitTrigger:
    def test_zero_steps_returns_zero_trigger(self, tiny_victim, tiny_splits):
        model, _ = tiny_victim
        x = tiny_splits.attacker.images[:8]
        trig = tg.init_trigger(model, x, target=3, steps=0, lr=0.01,
                               noise_budget=0.04, flow_budget=0.01)
        assert not trig.noise.any() and not trig.flow.any()

    def test_respects_budgets_and_reduces_loss(self, tiny_victim, tiny_splits):
        model, _ = tiny_victim
        x = tiny_splits.attacker.images[:16]
        target = 5
        trig = tg.init_trigger(model, x, target=target, steps=40, lr=0.01,
                               noise_budget=0.04, flow_budget=0.01)
        assert np.max(np.abs(trig.noise)) <= 0.04 + 1e-12
        assert tg.tv(trig.flow) <= 0.01 + 1e-9

        from stealthflip import quantized as qz

        def target_ce(t):
            logits = qz.forward(model, tg.warp(x, t))
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return -logp[:, target].mean()

        assert target_ce(trig) < target_ce(tg.zero_trigger(16, 16, 1))


class TestTriggerIO:
    def test_roundtrip(self, tmp_path, rng):
        trig = tg.Trigger(noise=rng.uniform(-0.04, 0.04, (16, 16, 1)).astype(np.float64),
                          flow=rng.uniform(-0.2, 0.2, (16, 16, 2)).astype(np.float64),
                          noise_budget=0.04, flow_budget=0.01)
        path = os.fspath(tmp_path / "t.trig")
        tg.save_trigger(trig, path)
        back = tg.load_trigger(path)
        # payload is float32 on disk; values must round-trip through that
        np.testing.assert_array_equal(back.noise, trig.noise.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(back.flow, trig.flow.astype(np.float32).astype(np.float64))
        assert back.noise_budget == trig.noise_budget
        assert back.flow_budget == trig.flow_budget

    def test_save_load_save_is_stable(self, tmp_path, rng):
        trig = tg.Trigger(noise=rng.uniform(-0.04, 0.04, (8, 8, 1)),
                          flow=rng.uniform(-0.1, 0.1, (8, 8, 2)),
                          noise_budget=0.04, flow_budget=0.01)
        p1 = os.fspath(tmp_path / "a.trig")
        p2 = os.fspath(tmp_path / "b.trig")
        tg.save_trigger(trig, p1)
        tg.save_trigger(tg.load_trigger(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = os.fspath(tmp_path / "x.trig")
        with open(path, "wb") as f:
            f.write(b"WRONGMAG" + b"\x00" * 40)
        with pytest.raises(FormatError):
            tg.load_trigger(path)

    def test_truncated(self, tmp_path, rng):
        trig = tg.zero_trigger(4, 4, 1)
        path = os.fspath(tmp_path / "t.trig")
        tg.save_trigger(trig, path)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[:-5])
        with pytest.raises(FormatError):
            tg.load_trigger(path)


class TestTriggerValidation:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tg.Trigger(noise=np.zeros((4, 4, 1)), flow=np.zeros((5, 4, 2)),
                       noise_budget=0.04, flow_budget=0.01)

    def test_flow_needs_two_components(self):
        with pytest.raises(DimensionError):
            tg.Trigger(noise=np.zeros((4, 4, 1)), flow=np.zeros((4, 4, 3)),
                       noise_budget=0.04, flow_budget=0.01)

    def test_negative_budget(self):
        with pytest.raises(InputError):
            tg.Trigger(noise=np.zeros((4, 4, 1)), flow=np.zeros((4, 4, 2)),
                       noise_budget=-0.1, flow_budget=0.01)
