"""Attack losses, projection and the PGD driver."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffguard import tensor as T
from diffguard.diffusion import Arch, make_schedule
from diffguard.errors import NumericError, UsageError
from diffguard.masks import AugmentParams
from diffguard.protect import (AttackConfig, apply_protection, load_delta, loss_early_stage,
                               loss_recon_max, loss_targeted_image, pgd_protect, project_linf,
                               random_noise_delta, save_delta)
from diffguard.selfcheck import gradient_check, random_blob, random_model
from diffguard.seeding import derive_rng

ETA = 16 / 255


class TensorStub:
    """Denoiser whose prediction is a differentiable function of its inputs."""

    def __init__(self, fn, size=8, variant="inpaint"):
        self.arch = Arch(image_size=size, base_width=8, groups=4, variant=variant)
        self.sched = make_schedule(1000)
        self.fn = fn

    def eps(self, x_t, t, cond, mask=None, masked_src=None, *, params=None):
        return self.fn(T.tensor(x_t), int(np.asarray(t).reshape(-1)[0]), mask, masked_src)


def blob_case(rng, size=8):
    x = rng.uniform(0.2, 0.6, (size, size, 1)).astype(np.float32)
    m = np.zeros((size, size), np.uint8)
    m[2:6, 1:7] = 1
    return x, m


class TestProjection:
    def test_inside_unchanged(self, rng):
        d = rng.uniform(-0.01, 0.01, (4, 4, 1)).astype(np.float32)
        np.testing.assert_array_equal(project_linf(d, ETA), d)

    def test_clamps_to_eta(self):
        np.testing.assert_allclose(project_linf(np.ones((3, 3, 1)), ETA), ETA)
        np.testing.assert_allclose(project_linf(-np.ones((3, 3, 1)), ETA), -ETA)

    def test_validity_clamp(self):
        x = np.array([[[1.0]], [[0.0]], [[0.5]]], np.float32)
        d = np.array([[[0.05]], [[-0.05]], [[0.05]]], np.float32)
        np.testing.assert_allclose(project_linf(d, ETA, x)[:, 0, 0], [0.0, 0.0, 0.05])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), eta=st.floats(0, 0.5))
    def test_idempotent_and_bounded(self, seed, eta):
        r = np.random.default_rng(seed)
        x = r.random((5, 5, 1)).astype(np.float32)
        once = project_linf(r.normal(0, 0.3, x.shape), eta, x)
        assert np.abs(once).max() <= eta + 1e-7
        assert (x + once).min() >= -1e-7 and (x + once).max() <= 1 + 1e-7
        np.testing.assert_array_equal(project_linf(once, eta, x), once)

    def test_negative_eta(self):
        with pytest.raises(UsageError):
            project_linf(np.zeros(3), -1)


class TestApply:
    def test_zero_delta(self, rng):
        x = rng.random((6, 6, 1)).astype(np.float32)
        np.testing.assert_array_equal(apply_protection(x, np.zeros_like(x), "whole"), x)

    def test_whole_and_mask(self, rng):
        x = np.full((6, 6, 1), 0.5, np.float32)
        d = np.full_like(x, 0.1)
        np.testing.assert_allclose(apply_protection(x, d, "whole"), 0.6)
        np.testing.assert_array_equal(apply_protection(x, d, np.zeros((6, 6))), x)
        m = np.zeros((6, 6))
        m[:3] = 1
        out = apply_protection(x, d, m)
        np.testing.assert_allclose(out[:3], 0.6)
        np.testing.assert_array_equal(out[3:], x[3:])

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            apply_protection(np.zeros((4, 4, 1)), np.zeros((4, 4, 3)), "whole")

    def test_random_noise_delta(self, rng):
        x, m = blob_case(rng)
        d = random_noise_delta(x, m, ETA, 3)
        assert np.abs(d).max() <= ETA and np.all(d[m == 0] == 0) and np.any(d != 0)
        np.testing.assert_array_equal(d, random_noise_delta(x, m, ETA, 3))

    def test_delta_file_round_trip(self, tmp_path, rng):
        d = rng.uniform(-ETA, ETA, (8, 8, 1)).astype(np.float32)
        save_delta(tmp_path / "d.dgt", d)
        np.testing.assert_array_equal(load_delta(tmp_path / "d.dgt"), d)


class TestEarlyStage:
    def test_zero_model(self, rng):
        x, m = blob_case(rng)
        stub = TensorStub(lambda xt, t, mask, src: T.scale(xt, 0.0))
        xT = rng.standard_normal(x.shape)
        assert loss_early_stage(stub, x, np.zeros_like(x), m, 0, xT).item() == 0.0

    def test_copy_model(self, rng):
        x, m = blob_case(rng, 32)
        stub = TensorStub(lambda xt, t, mask, src: xt, size=32)
        xT = rng.standard_normal(x.shape).astype(np.float32)
        val = loss_early_stage(stub, x, np.zeros_like(x), m, 0, xT).item()
        assert val == pytest.approx(float(np.sum(xT.astype(np.float64) ** 2)), rel=1e-6)
        assert abs(val - 1024) < 5 * np.sqrt(2 * 1024)

    def test_uses_final_timestep_and_masked_source(self, rng):
        x, m = blob_case(rng)
        seen = {}

        def fn(xt, t, mask, src):
            seen.update(t=t, mask=T.tensor(mask).data.copy(), src=T.tensor(src).data.copy())
            return xt
        loss_early_stage(TensorStub(fn), x, np.zeros_like(x), m, 0, rng.standard_normal(x.shape))
        assert seen["t"] == 1000
        np.testing.assert_array_equal(seen["mask"][0, ..., 0], m)
        np.testing.assert_allclose(seen["src"][0], x * m[..., None])

    def test_invariant_outside_mask(self, tiny_inpaint, rng):
        x, m = blob_case(rng, 16)
        m = random_blob(rng, 16)
        xT = rng.standard_normal(x.shape)
        d = rng.uniform(-ETA, ETA, x.shape).astype(np.float32)
        y = x.copy()
        y[m == 0] = rng.random(int((m == 0).sum()))[:, None]
        a = loss_early_stage(tiny_inpaint, x, d, m, 0, xT).item()
        b = loss_early_stage(tiny_inpaint, y, d, m, 0, xT).item()
        assert a == b

    def test_needs_inpaint(self, tiny_standard, rng):
        x = rng.random((16, 16, 1))
        with pytest.raises(UsageError):
            loss_early_stage(tiny_standard, x, np.zeros_like(x), np.ones((16, 16)), 0, x)

    def test_shape_mismatch(self, tiny_inpaint):
        with pytest.raises(UsageError):
            loss_early_stage(tiny_inpaint, np.zeros((16, 16, 1)), np.zeros((8, 8, 1)),
                             np.ones((16, 16)), 0, np.zeros((16, 16, 1)))


class TestRecon:
    def test_zero_model(self, rng):
        x, _ = blob_case(rng)
        stub = TensorStub(lambda xt, t, mask, src: T.scale(xt, 0.0))
        val = loss_recon_max(stub, x, np.zeros_like(x), 0, np.random.default_rng(5))
        r = np.random.default_rng(5)
        r.integers(1, 1001)
        eps = r.standard_normal((1,) + x.shape).astype(np.float32)
        assert val.item() == pytest.approx(float(np.sum(eps.astype(np.float64) ** 2)), rel=1e-6)

    def test_perfect_oracle(self, rng):
        x, _ = blob_case(rng)
        s = make_schedule(1000)

        def oracle(xt, t, mask, src):
            np.testing.assert_array_equal(T.tensor(mask).data, 1.0)
            return T.scale(T.sub(xt, T.scale(src, float(s.alpha[t]))), 1.0 / float(s.sigma[t]))
        val = loss_recon_max(TensorStub(oracle), x, np.zeros_like(x), 0, np.random.default_rng(1))
        assert val.item() < 1e-6

    def test_deterministic(self, tiny_inpaint, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        a = loss_recon_max(tiny_inpaint, x, np.zeros_like(x), 0, np.random.default_rng(3)).item()
        b = loss_recon_max(tiny_inpaint, x, np.zeros_like(x), 0, np.random.default_rng(3)).item()
        assert a == b

    def test_standard_model_accepted(self, tiny_standard, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        assert loss_recon_max(tiny_standard, x, np.zeros_like(x), 1, rng).item() > 0


class TestTargeted:
    @pytest.mark.parametrize("K", [1, 2, 4])
    def test_zero_predictor_closed_form(self, rng, K):
        # with eps = 0 every DDIM step rescales x by alpha_next / alpha_t, so the
        # K-step result is x_T / alpha_T whatever the intermediate timesteps are
        x, m = blob_case(rng)
        stub = TensorStub(lambda xt, t, mask, src: T.scale(xt, 0.0))
        xT = np.random.default_rng(17).standard_normal((1,) + x.shape).astype(np.float32)
        expect = np.sum((xT.astype(np.float64) / stub.sched.alpha[-1] - 0.5) ** 2)
        val = loss_targeted_image(stub, x, np.zeros_like(x), m, 0, 0.5, K, 17).item()
        assert val == pytest.approx(expect, rel=1e-5)

    def test_self_distance_zero(self, tiny_inpaint, rng):
        from diffguard.diffusion import ddim_step, ddim_timesteps
        x = rng.random((16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        # the unclamped 3-step sampler output, unrolled by hand from the same seed
        xt = T.tensor(np.random.default_rng(9).standard_normal((1,) + x.shape).astype(np.float32))
        mm = m[None, ..., None].astype(np.float32)
        steps = ddim_timesteps(1000, 3)
        for t, tn in zip(steps[:-1], steps[1:]):
            xt = ddim_step(tiny_inpaint, xt, t, tn, 0, mm, x[None] * mm)
        loss = lambda target: loss_targeted_image(tiny_inpaint, x, np.zeros_like(x), m, 0, target, 3, 9).item()
        assert loss(xt.data[0]) < 1e-8 * loss(np.zeros_like(x))

    def test_truncation_bound(self, tiny_inpaint, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        with pytest.raises(UsageError):
            loss_targeted_image(tiny_inpaint, x, np.zeros_like(x), np.ones((16, 16)), 0, 0.5, 9, 0)
        with pytest.raises(UsageError):
            AttackConfig(loss="targeted_image", K=9)


class TestGradients:
    @pytest.mark.parametrize("kind", ["early_stage", "recon_max", "targeted_image"])
    def test_matches_finite_differences(self, kind):
        model = random_model(5)
        assert gradient_check(kind, model, 1, n_coords=8) < 1e-2


class TestConfig:
    @pytest.mark.parametrize("kw", [{"loss": "bogus"}, {"gamma": 0}, {"eta": 0.01, "gamma": 0.02},
                                    {"steps": -1}, {"region": "box"}, {"eta": 2.0}])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            AttackConfig(**kw)


class TestPGD:
    def test_zero_steps(self, tiny_inpaint, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        res = pgd_protect(x, random_blob(rng, 16), tiny_inpaint, AttackConfig(steps=0))
        assert not res.delta.any() and res.losses == []

    def test_zero_gradient_fixed_point(self, rng):
        x, m = blob_case(rng)
        stub = TensorStub(lambda xt, t, mask, src: T.add(xt, T.scale(src, 0.0)))
        res = pgd_protect(x, m, stub, AttackConfig(steps=5, use_mask_augmentation=False))
        assert not res.delta.any()

    def test_quadratic_surrogate_reaches_boundary(self, rng):
        # eps = A * masked_src, so the loss is ||A (x + delta) M||^2 with a positive
        # gradient on every masked pixel: ascent must saturate delta at +eta
        x, m = blob_case(rng)
        A = rng.uniform(0.5, 2.0, (1,) + x.shape).astype(np.float32)
        stub = TensorStub(lambda xt, t, mask, src: T.add(T.mul(src, A), T.scale(xt, 0.0)))
        res = pgd_protect(x, m, stub, AttackConfig(steps=20, use_mask_augmentation=False))
        np.testing.assert_allclose(res.delta[m == 1], ETA, atol=1e-7)
        assert not res.delta[m == 0].any()
        assert res.losses[-1] > res.losses[0]

    def test_targeted_descends(self, rng):
        # target 0 with eps = -A * src drives the K-step output towards 0 by shrinking x + delta
        x, m = blob_case(rng)
        res = pgd_protect(x, m, TensorStub(lambda xt, t, mask, src: T.add(T.scale(src, -1.0), xt)),
                          AttackConfig(loss="targeted_image", steps=20, K=2,
                                       use_mask_augmentation=False, target_image=np.zeros_like(x),
                                       noise_resample=False))
        assert res.best_losses[-1] <= res.losses[0]
        assert np.all(np.diff(res.best_losses) <= 0)

    @pytest.mark.parametrize("loss", ["early_stage", "recon_max", "targeted_image"])
    def test_invariants_every_iteration(self, tiny_inpaint, rng, loss):
        x = rng.random((16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        region = "whole" if loss == "recon_max" else "mask"
        cfg = AttackConfig(loss=loss, eta=8 / 255, gamma=2 / 255, steps=6, K=2, region=region,
                           augment=AugmentParams(zeta=2, s=2, N=1))
        seen, iterates = [], [np.zeros_like(x)]

        def cb(i, d):
            assert np.abs(d).max() <= cfg.eta + 1e-7
            assert (x + d).min() >= -1e-6 and (x + d).max() <= 1 + 1e-6
            if region == "mask":
                assert not d[m == 0].any()
            seen.append(i)
            iterates.append(d.copy())
        res = pgd_protect(x, m, tiny_inpaint, cfg, callback=cb)
        assert seen == list(range(6)) and len(res.losses) == 7 and len(res.best_losses) == 7
        sgn = 1 if loss != "targeted_image" else -1
        assert np.all(sgn * np.diff(res.best_losses) >= 0)
        np.testing.assert_array_equal(res.delta, iterates[res.best_index])
        if loss == "early_stage":
            # ranking draw: the first x_T of the job's noise stream and the training mask
            xT = derive_rng(cfg.seed, "pgd-noise").standard_normal(x.shape).astype(np.float32)
            scores = [loss_early_stage(tiny_inpaint, x, d, m, 0, xT).item() for d in iterates]
            assert res.best_index == int(np.argmax(scores))
            assert scores[res.best_index] == pytest.approx(res.best_losses[-1], rel=1e-6)

    def test_deterministic(self, tiny_inpaint, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        cfg = AttackConfig(steps=4, seed=12)
        a, b = pgd_protect(x, m, tiny_inpaint, cfg), pgd_protect(x, m, tiny_inpaint, cfg)
        assert a.delta.tobytes() == b.delta.tobytes() and a.losses == b.losses
        c = pgd_protect(x, m, tiny_inpaint, AttackConfig(steps=4, seed=13))
        assert c.delta.tobytes() != a.delta.tobytes()

    def test_last_iterate_option(self, tiny_inpaint, rng):
        x = rng.random((16, 16, 1)).astype(np.float32)
        m = random_blob(rng, 16)
        res = pgd_protect(x, m, tiny_inpaint, AttackConfig(steps=3, best_iterate=False))
        assert res.best_index == 3

    def test_empty_mask(self, tiny_inpaint):
        with pytest.raises(UsageError):
            pgd_protect(np.zeros((16, 16, 1)), np.zeros((16, 16)), tiny_inpaint, AttackConfig(steps=1))

    def test_non_finite(self, rng):
        x, m = blob_case(rng)
        stub = TensorStub(lambda xt, t, mask, src: T.scale(T.add(xt, src), float("inf")))
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            pgd_protect(x, m, stub, AttackConfig(steps=2, use_mask_augmentation=False))
