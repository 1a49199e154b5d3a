from fractions import Fraction

import numpy as np
import pytest

from diffdta.diffusion import (DenoiserConfig, build_schedule, denoise_eps,
                               diffusion_loss, forward_noise,
                               init_denoiser_params, reconstruct_z0)
from diffdta.numerics import ParamStore, Tensor, backward
from helpers import max_rel_err, numerical_grad

PAPER_SCHEDULE = dict(T=1000, beta_start=1e-4, beta_end=4e-4)


class TestSchedule:
    def test_linear_endpoints(self):
        s = build_schedule(**PAPER_SCHEDULE)
        assert s.beta[0] == 1e-4
        assert s.beta[-1] == 4e-4

    def test_midpoint_value(self):
        s = build_schedule(**PAPER_SCHEDULE)
        # beta[k] = start + (k-1)/(T-1) * (end-start) at k=500
        assert s.beta[499] == pytest.approx(1e-4 + (499 / 999) * 3e-4, abs=1e-12)
        assert s.beta[499] == pytest.approx(2.4985e-4, abs=1e-8)

    def test_alpha_bar_terminal_value(self):
        s = build_schedule(**PAPER_SCHEDULE)
        # independent oracle: exact rational product of the float betas
        exact = Fraction(1)
        for b in s.beta:
            exact *= 1 - Fraction(float(b))
        assert abs(s.alpha_bar[-1] - float(exact)) < 1e-12
        assert s.alpha_bar[-1] == pytest.approx(0.7788, abs=1e-3)
        # log-sum cross-check
        assert s.alpha_bar[-1] == pytest.approx(np.exp(-0.25), abs=1e-3)

    def test_alpha_bar_strictly_decreasing_and_positive(self):
        s = build_schedule(**PAPER_SCHEDULE)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] == pytest.approx(1 - s.beta[0], abs=1e-15)
        assert s.alpha_bar[-1] > 0
        assert s.sqrt_alpha_bar.min() == pytest.approx(0.882, abs=1e-3)

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            build_schedule(0, 1e-4, 4e-4)
        with pytest.raises(ValueError):
            build_schedule(10, 0.0, 4e-4)
        with pytest.raises(ValueError):
            build_schedule(10, 4e-4, 1e-4)
        with pytest.raises(ValueError):
            build_schedule(10, 1e-4, 1.0)


class TestForwardNoise:
    def setup_method(self):
        self.s = build_schedule(**PAPER_SCHEDULE)

    def test_zero_noise_limit(self):
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal((4, 8))
        k = np.array([1, 10, 500, 1000])
        zk = forward_noise(z0, k, np.zeros_like(z0), self.s)
        np.testing.assert_allclose(zk, self.s.sqrt_ab(k)[:, None] * z0, rtol=1e-12)

    def test_zero_signal_limit(self):
        rng = np.random.default_rng(1)
        eps = rng.standard_normal((3, 8))
        k = np.array([5, 250, 999])
        zk = forward_noise(np.zeros_like(eps), k, eps, self.s)
        np.testing.assert_allclose(zk, self.s.sqrt_one_minus_ab(k)[:, None] * eps, rtol=1e-12)

    def test_marginal_norm_is_preserved(self):
        # unit-Gaussian z0 keeps E||zk||^2 = dim since abar + (1-abar) = 1
        rng = np.random.default_rng(2)
        dim, n = 384, 2000
        z0 = rng.standard_normal((n, dim))
        eps = rng.standard_normal((n, dim))
        k = rng.integers(1, 1001, n)
        zk = forward_noise(z0, k, eps, self.s)
        mean_sq = (zk ** 2).sum(axis=1).mean()
        se = np.sqrt(2.0 * dim / n)  # Var ||z||^2 = 2*dim for N(0, I)
        assert abs(mean_sq - dim) < 4 * se

    def test_step_out_of_range_rejected(self):
        z = np.zeros((1, 4))
        with pytest.raises(ValueError):
            forward_noise(z, np.array([0]), z, self.s)
        with pytest.raises(ValueError):
            forward_noise(z, np.array([1001]), z, self.s)


class TestReconstruct:
    def setup_method(self):
        self.s = build_schedule(**PAPER_SCHEDULE)

    def test_true_noise_inverts_exactly(self):
        rng = np.random.default_rng(3)
        z0 = rng.standard_normal((16, 384))
        eps = rng.standard_normal((16, 384))
        k = rng.integers(1, 1001, 16)
        z0_hat = reconstruct_z0(forward_noise(z0, k, eps, self.s), eps, k, self.s)
        assert np.abs(z0_hat - z0).max() < 1e-10

    def test_float32_round_trip(self):
        rng = np.random.default_rng(4)
        z0 = rng.standard_normal((8, 384)).astype(np.float32)
        eps = rng.standard_normal((8, 384)).astype(np.float32)
        k = np.full(8, 1000)
        z0_hat = reconstruct_z0(forward_noise(z0, k, eps, self.s), eps, k, self.s)
        assert np.abs(z0_hat - z0).max() < 1e-5

    def test_zero_eps_hat_formula(self):
        rng = np.random.default_rng(5)
        zk = rng.standard_normal((4, 8))
        k = np.array([1, 2, 500, 1000])
        z0_hat = reconstruct_z0(zk, np.zeros_like(zk), k, self.s)
        np.testing.assert_allclose(z0_hat, zk / self.s.sqrt_ab(k)[:, None], rtol=1e-12)

    def test_tensor_path_matches_array_path(self):
        rng = np.random.default_rng(6)
        zk = rng.standard_normal((4, 8))
        eh = rng.standard_normal((4, 8))
        k = np.array([3, 30, 300, 900])
        as_arrays = reconstruct_z0(zk, eh, k, self.s)
        as_tensor = reconstruct_z0(zk, Tensor(eh), k, self.s)
        np.testing.assert_allclose(as_tensor.data, as_arrays, rtol=1e-12)


class TestDiffusionLoss:
    def test_exact_prediction_is_zero(self):
        e = np.random.default_rng(0).standard_normal((5, 7))
        assert diffusion_loss(e, e) == 0.0

    def test_zero_prediction_near_unit(self):
        e = np.random.default_rng(1).standard_normal((400, 384))
        assert diffusion_loss(e, np.zeros_like(e)) == pytest.approx(1.0, abs=0.02)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert diffusion_loss(a, b) == diffusion_loss(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            diffusion_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def tiny_denoiser(latent=12, down=(8, 4), time_dim=8, seed=0, dtype=np.float64):
    cfg = DenoiserConfig(latent_dim=latent, down_dims=down, time_embed_dim=time_dim)
    store = ParamStore(dtype=dtype)
    init_denoiser_params(store, "diffusion.drug", cfg, np.random.default_rng(seed))
    return cfg, store


class TestDenoiser:
    def test_output_shape_matches_input(self):
        cfg, store = tiny_denoiser()
        rng = np.random.default_rng(1)
        for b in (1, 3, 17):
            zk = rng.standard_normal((b, cfg.latent_dim))
            out = denoise_eps(zk, rng.integers(1, 1000, b), store, "diffusion.drug", cfg)
            assert out.shape == (b, cfg.latent_dim)

    def test_paper_scale_widths(self):
        cfg = DenoiserConfig()
        names = [(n, fi, fo) for n, fi, fo in cfg.stage_widths()]
        assert names == [("down1", 384, 192), ("down2", 192, 96), ("mid", 96, 96),
                         ("up1", 192, 192), ("up2", 384, 384)]

    def test_time_conditioning_is_live(self):
        cfg, store = tiny_denoiser(seed=5)
        rng = np.random.default_rng(2)
        zk = rng.standard_normal((4, cfg.latent_dim))
        out1 = denoise_eps(zk, np.full(4, 1), store, "diffusion.drug", cfg)
        out2 = denoise_eps(zk, np.full(4, 777), store, "diffusion.drug", cfg)
        assert np.abs(out1.data - out2.data).max() > 1e-6

    def test_scalar_step_broadcasts(self):
        cfg, store = tiny_denoiser()
        zk = np.random.default_rng(3).standard_normal((5, cfg.latent_dim))
        a = denoise_eps(zk, 7, store, "diffusion.drug", cfg)
        b = denoise_eps(zk, np.full(5, 7), store, "diffusion.drug", cfg)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("seed", range(3))
    def test_grads_vs_finite_differences(self, seed):
        cfg, store = tiny_denoiser(seed=seed)
        rng = np.random.default_rng(seed + 10)
        zk0 = rng.standard_normal((3, cfg.latent_dim))
        k = rng.integers(1, 1000, 3)

        def loss_from_input(arr):
            out = denoise_eps(arr, k, store, "diffusion.drug", cfg)
            return (out * out).mean()

        x = Tensor(zk0, requires_grad=True)
        backward(loss_from_input(x))
        numeric = numerical_grad(lambda a: loss_from_input(Tensor(a)).item(), zk0)
        assert max_rel_err(x.grad, numeric) < 1e-4

        for name in ("diffusion.drug.down1.w", "diffusion.drug.mid.film_w",
                     "diffusion.drug.up2.b", "diffusion.drug.up1.film_b"):
            store.zero_grad()
            backward(loss_from_input(Tensor(zk0)))
            analytic = store[name].grad.copy()
            saved = store[name].data.copy()

            def f(arr, _n=name):
                store[_n].data[...] = arr
                try:
                    return loss_from_input(Tensor(zk0)).item()
                finally:
                    store[_n].data[...] = saved

            numeric = numerical_grad(f, saved)
            assert max_rel_err(analytic, numeric) < 1e-4

    def test_wrong_latent_width_rejected(self):
        cfg, store = tiny_denoiser()
        with pytest.raises(ValueError, match="denoise_eps"):
            denoise_eps(np.zeros((2, cfg.latent_dim + 1)), 1, store, "diffusion.drug", cfg)
