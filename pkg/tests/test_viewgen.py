"""View generators: expert transforms, W-search analytic oracles, W-perturb
statistics, the sign-gradient variant, and epsilon calibration."""

import numpy as np
import pytest
import torch

from latentviews.modelzoo import BlobGenerator, ConvEncoder, ConvInverter, encode, grad_check
from latentviews.viewgen import (CalibratedEpsilon, PerturbConfig, TransformConfig,
                                 WSearchConfig, calibrate_epsilon, expert_transform,
                                 per_sample_rng, sample_perturbations, sign_gradient_step,
                                 squared_residual, stable_norm, w_perturb,
                                 w_perturb_with_latents, w_search, w_search_objective,
                                 w_search_online_1step)

IDENT = lambda t: t  # noqa: E731


@pytest.fixture
def image(rng):
    return torch.as_tensor(rng.random((3, 16, 16)))


class TestExpertTransform:
    def test_weak_preset_fields(self):
        cfg = TransformConfig.weak()
        assert cfg.crop_scale_range == (0.8, 1.0)
        assert cfg.flip_probability == 0.5
        assert cfg.color_jitter_strength == 0.0

    def test_identity_composition(self, image):
        out = expert_transform(image, TransformConfig.identity(), np.random.default_rng(0))
        assert torch.equal(out, image)

    def test_deterministic_given_stream(self, image):
        a = expert_transform(image, TransformConfig.full(), np.random.default_rng(7))
        b = expert_transform(image, TransformConfig.full(), np.random.default_rng(7))
        assert torch.equal(a, b)

    def test_weak_never_touches_colors(self, image):
        # with jitter at 0 every output pixel is an interpolation of inputs,
        # so each channel stays within the input channel's range
        for seed in range(5):
            out = expert_transform(image, TransformConfig.weak(), np.random.default_rng(seed))
            for c in range(3):
                assert out[c].min() >= image[c].min() - 1e-12
                assert out[c].max() <= image[c].max() + 1e-12

    def test_shape_and_range_preserved(self, rng):
        for seed in range(10):
            x = torch.as_tensor(rng.random((3, 32, 32)))
            out = expert_transform(x, TransformConfig.full(), np.random.default_rng(seed))
            assert out.shape == x.shape
            assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_bad_configs_rejected(self):
        with pytest.raises(ValueError):
            TransformConfig(crop_scale_range=(0.0, 1.0))
        with pytest.raises(ValueError):
            TransformConfig(flip_probability=1.5)
        with pytest.raises(ValueError):
            TransformConfig(color_jitter_strength=-1)

    def test_per_sample_rng_streams_independent(self):
        a = per_sample_rng(0, 1, 2, 3).random(4)
        b = per_sample_rng(0, 1, 2, 4).random(4)
        c = per_sample_rng(0, 1, 2, 3).random(4)
        assert not np.allclose(a, b)
        np.testing.assert_array_equal(a, c)


class TestWSearchToyOracles:
    def test_defaults_match_recommended_config(self):
        cfg = WSearchConfig()
        assert (cfg.epsilon1, cfg.epsilon2, cfg.lam) == (0.3, 0.5, 0.01)
        assert cfg.n_views == 8

    def test_single_view_circle_oracle(self):
        # identity maps on R^2: the boundary term alone pulls the latent onto
        # the radius-epsilon1 circle
        x0 = torch.zeros(2, dtype=torch.float64)
        cfg = WSearchConfig(epsilon1=0.3, lam=0.0, n_views=1, steps=200, step_size=0.05)
        for seed in range(3):
            (w, view), = w_search(x0, IDENT, IDENT, IDENT, cfg, np.random.default_rng(seed))
            assert abs(float(w.norm()) - 0.3) <= 1e-3
            assert torch.equal(view, w)

    def test_two_view_feasibility_oracle(self):
        # paper config (0.3, 0.5, 0.01): both radii on the boundary and the
        # pair spread past epsilon2 (feasible because epsilon2 <= 2 epsilon1)
        x0 = torch.zeros(2, dtype=torch.float64)
        cfg = WSearchConfig(epsilon1=0.3, epsilon2=0.5, lam=0.01, n_views=2,
                            steps=3000, step_size=0.05)
        for seed in range(3):
            pairs = w_search(x0, IDENT, IDENT, IDENT, cfg, np.random.default_rng(seed))
            ws = torch.stack([w for w, _ in pairs])
            radii = ws.norm(dim=1)
            assert float((radii - 0.3).abs().max()) <= 1e-2
            assert float((ws[0] - ws[1]).norm()) >= 0.5 - 1e-2

    def test_lambda_zero_objective_is_pure_boundary(self, rng):
        ws = torch.as_tensor(rng.standard_normal((3, 2)))
        anchor = torch.zeros(2, dtype=torch.float64)
        cfg = WSearchConfig(epsilon1=0.3, lam=0.0, n_views=3)
        obj = w_search_objective(ws, anchor, IDENT, cfg)
        dists = ws.norm(dim=1)
        np.testing.assert_allclose(float(obj), float(((dists - 0.3) ** 2).mean()), atol=1e-9)

    def test_nonfinite_objective_aborts_with_iteration(self):
        x0 = torch.zeros(2, dtype=torch.float64)
        cfg = WSearchConfig(epsilon1=0.3, lam=0.0, n_views=1, steps=50, step_size=2e150)
        with pytest.raises(RuntimeError, match="iteration"):
            w_search(x0, IDENT, IDENT, IDENT, cfg, np.random.default_rng(0))

    def test_objective_gradient_matches_finite_differences(self, rng):
        enc = ConvEncoder((3, 8, 8), embed_dim=6, channels=(4,))
        gen = BlobGenerator(12, (3, 8, 8))
        x0 = torch.as_tensor(rng.random((3, 8, 8)))
        z0 = encode(enc, x0)
        cfg = WSearchConfig(epsilon1=0.3, epsilon2=0.5, lam=0.01, n_views=2)
        embed_decode = lambda t: encode(enc, gen(t))  # noqa: E731
        ws = torch.as_tensor(rng.standard_normal((2, 12)) * 0.5)
        err = grad_check(lambda t: w_search_objective(t, z0, embed_decode, cfg), ws)
        assert err <= 1e-4

    def test_real_maps_run_end_to_end(self, rng):
        enc = ConvEncoder((3, 16, 16), embed_dim=8, channels=(4, 8))
        gen = BlobGenerator(12, (3, 16, 16))
        inv = ConvInverter((3, 16, 16), 12, channels=(4, 8))
        x0 = torch.as_tensor(rng.random((3, 16, 16)))
        cfg = WSearchConfig(epsilon1=0.3, epsilon2=0.5, lam=0.01, n_views=2, steps=30)
        pairs = w_search(x0, enc, gen, inv, cfg, rng)
        assert len(pairs) == 2
        for w, img in pairs:
            assert torch.isfinite(w).all()
            assert img.shape == (3, 16, 16)


class TestWPerturb:
    def test_sigma_zero_reproduces_inversion_exactly(self, rng):
        gen = BlobGenerator(12, (3, 16, 16))
        inv = ConvInverter((3, 16, 16), 12, channels=(4, 8))
        x = torch.as_tensor(rng.random((3, 16, 16)))
        views = w_perturb(x, gen, inv, PerturbConfig(sigma=0.0, count=3), rng)
        with torch.no_grad():
            expected = gen(inv(x.unsqueeze(0)))[0]
        for v in views:
            assert torch.equal(v, expected)

    def test_default_sigma(self):
        assert PerturbConfig().sigma == 0.2

    def test_perturbation_std_within_two_percent(self):
        rng = np.random.default_rng(0)
        draws = sample_perturbations(rng, 100_000, 4, sigma=0.2)
        stds = draws.std(axis=0, ddof=1)
        np.testing.assert_allclose(stds, 0.2, rtol=0.02)

    def test_perturbation_mean_within_three_sigma(self):
        rng = np.random.default_rng(1)
        n = 100_000
        draws = sample_perturbations(rng, n, 4, sigma=0.2)
        assert np.all(np.abs(draws.mean(axis=0)) <= 3 * 0.2 / np.sqrt(n))

    def test_latents_match_images(self, rng):
        gen = BlobGenerator(12, (3, 16, 16))
        inv = ConvInverter((3, 16, 16), 12, channels=(4, 8))
        x = torch.as_tensor(rng.random((3, 16, 16)))
        latents, images = w_perturb_with_latents(x, gen, inv, PerturbConfig(count=4), rng)
        with torch.no_grad():
            redecoded = gen(latents)
        assert torch.equal(images, redecoded)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            PerturbConfig(sigma=-0.1)
        with pytest.raises(ValueError):
            PerturbConfig(count=0)


class TestOnlineOneStep:
    def test_constant_objective_returns_init(self):
        w = torch.tensor([1.0, -2.0], dtype=torch.float64)
        out = sign_gradient_step(lambda t: (t * 0.0).sum(), w, step=0.1)
        assert torch.equal(out, w)

    def test_linear_objective_moves_by_sign(self):
        c = torch.tensor([2.0, -3.0, 0.0], dtype=torch.float64)
        w = torch.zeros(3, dtype=torch.float64)
        out = sign_gradient_step(lambda t: (c * t).sum(), w, step=0.25)
        np.testing.assert_array_equal(out.numpy(), [-0.25, 0.25, 0.0])

    def test_coordinates_move_exactly_by_step(self, rng):
        w = torch.as_tensor(rng.standard_normal(6))
        x0 = torch.as_tensor(rng.standard_normal(6))
        out = w_search_online_1step(x0, IDENT, IDENT, w, epsilon1=0.3, step_size=0.05)
        moves = (out - w).abs().numpy()
        assert np.all((np.isclose(moves, 0.05)) | (np.isclose(moves, 0.0)))


class TestCalibration:
    def test_identity_transform_gives_zero(self, rng):
        enc = ConvEncoder((3, 8, 8), embed_dim=6, channels=(4,))
        images = torch.as_tensor(rng.random((5, 3, 8, 8)))
        cal = calibrate_epsilon(enc, images, TransformConfig.identity(),
                                np.random.default_rng(0))
        assert cal.epsilon1 <= 1e-6
        np.testing.assert_allclose(cal.epsilon2, cal.epsilon1 + 0.2)

    def test_resampling_stability(self, rng):
        gen = BlobGenerator(12, (3, 16, 16))
        enc = ConvEncoder((3, 16, 16), embed_dim=8, channels=(4, 8))
        with torch.no_grad():
            images = gen(torch.as_tensor(rng.standard_normal((2000, 12))))
        cal_a = calibrate_epsilon(enc, images[:1000], TransformConfig.full(),
                                  np.random.default_rng(1))
        cal_b = calibrate_epsilon(enc, images[1000:], TransformConfig.full(),
                                  np.random.default_rng(2))
        assert abs(cal_a.epsilon1 - cal_b.epsilon1) / cal_a.epsilon1 <= 0.10

    def test_empty_sample_rejected(self):
        enc = ConvEncoder((3, 8, 8), embed_dim=6, channels=(4,))
        with pytest.raises(ValueError, match="non-empty"):
            calibrate_epsilon(enc, torch.zeros(0, 3, 8, 8), TransformConfig.full(),
                              np.random.default_rng(0))

    def test_w_space_mode_uses_inverter(self, rng):
        enc = ConvEncoder((3, 8, 8), embed_dim=6, channels=(4,))
        inv = ConvInverter((3, 8, 8), 12, channels=(4,))
        images = torch.as_tensor(rng.random((4, 3, 8, 8)))
        cal = calibrate_epsilon(enc, images, TransformConfig.full(),
                                np.random.default_rng(3), space="w", e=inv)
        assert isinstance(cal, CalibratedEpsilon)
        assert cal.epsilon1 > 0
        with pytest.raises(ValueError, match="inverter"):
            calibrate_epsilon(enc, images, TransformConfig.full(),
                              np.random.default_rng(3), space="w")


def test_wsearch_config_validation():
    with pytest.raises(ValueError):
        WSearchConfig(epsilon1=0.0)
    with pytest.raises(ValueError):
        WSearchConfig(lam=-1)
    with pytest.raises(ValueError):
        WSearchConfig(n_views=0)
    with pytest.raises(ValueError):
        WSearchConfig(init_policy="teleport")


def test_stable_norm_gradient_at_zero():
    v = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    stable_norm(v).backward()
    assert torch.isfinite(v.grad).all()


def test_squared_residual_is_default_penalty():
    d = torch.tensor([0.1, 0.5], dtype=torch.float64)
    np.testing.assert_allclose(squared_residual(0.3, d).numpy(), [(0.1 - 0.3) ** 2, (0.5 - 0.3) ** 2])
