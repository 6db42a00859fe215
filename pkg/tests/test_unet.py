import numpy as np
import pytest

from dsk.diffusion import DiffusionSchedule, denoising_loss, stratified_times
from dsk.seeding import rng_for
from dsk.tensor import Tape, Tensor
from dsk.unet import (
    DenoiserModel,
    UNetConfig,
    build_model,
    denoise_fn,
    denoiser_apply,
    fourier_noise_embedding,
    init_params,
    load_model,
    precond_constants,
    save_model,
    unet_forward,
)

TINY = UNetConfig(input_length=16, channels=(4, 8), blocks_per_level=1,
                  emb_dim=8, groups=2)

# pinned at first build of the desk-default architecture (192, 16/32/64,
# 2 blocks per level, emb 32): catches silent changes in parameter layout
DESK_PARAM_COUNT = 171_073


def randomized_model(cfg, seed, scale=0.3):
    model = build_model(cfg, rng_for(seed, "rand-model"))
    rng = rng_for(seed, "rand-model", "jitter")
    for k in model.params:
        model.params[k] = model.params[k] + scale * rng.standard_normal(model.params[k].shape)
    model.ema = {k: v.copy() for k, v in model.params.items()}
    return model


class TestNoiseEmbedding:
    def test_unit_sigma_pattern(self):
        emb = fourier_noise_embedding(1.0, 16)
        np.testing.assert_allclose(emb[:8], 0.0, atol=1e-15)
        np.testing.assert_allclose(emb[8:], 1.0, atol=1e-15)

    def test_dimension_is_twice_frequency_count(self):
        emb = fourier_noise_embedding(0.37, 24)
        assert emb.shape == (24,)

    def test_distinct_sigmas_distinguishable(self):
        a = fourier_noise_embedding(1e-3, 32)
        b = fourier_noise_embedding(1e2, 32)
        cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos < 0.99

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fourier_noise_embedding(0.0, 8)


class TestUnetForward:
    def test_output_matches_input_shape(self):
        for length in (16, 32, 64):
            cfg = UNetConfig(input_length=length, channels=(4, 8),
                             blocks_per_level=1, emb_dim=8, groups=2)
            model = randomized_model(cfg, length)
            x = rng_for(length, "shape").standard_normal((3, length))
            out = denoise_fn(model, use_ema=False)(x, np.full(3, 0.8))
            assert out.shape == x.shape

    def test_translation_equivariance_at_total_stride(self):
        model = randomized_model(TINY, 1)
        fn = denoise_fn(model, use_ema=False)
        x = rng_for(2, "roll").standard_normal((2, 16))
        sig = np.array([0.5, 1.7])
        shift = TINY.total_stride
        out = fn(x, sig)
        out_rolled = fn(np.roll(x, shift, axis=1), sig)
        assert np.abs(np.roll(out, shift, axis=1) - out_rolled).max() < 1e-10

    def test_zero_initialized_head_gives_zero_network_output(self):
        params = init_params(TINY, rng_for(3, "zero"))
        tensors = {k: Tensor(v) for k, v in params.items()}
        x = Tensor(rng_for(4, "zero").standard_normal((2, 1, 16)))
        emb = Tensor(fourier_noise_embedding(np.array([1.0, 2.0]), TINY.emb_dim))
        out = unet_forward(TINY, tensors, x, emb)
        assert np.all(out.data == 0.0)

    def test_bad_length_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            UNetConfig(input_length=18, channels=(4, 8), blocks_per_level=1,
                       emb_dim=8, groups=2)


class TestPreconditioning:
    def test_constants_at_unit_sigma(self):
        c_skip, c_out, c_in, c_noise = precond_constants(1.0, 1.0)
        assert c_skip == pytest.approx(0.5)
        assert c_out == pytest.approx(1.0 / np.sqrt(2.0))
        assert c_in == pytest.approx(1.0 / np.sqrt(2.0))
        assert c_noise == pytest.approx(0.0)

    def test_input_scaling_identity(self):
        for sd in (0.5, 1.0, 2.0):
            sig = np.array([0.1, 1.0, 7.0])
            _, _, c_in, _ = precond_constants(sig, sd)
            np.testing.assert_allclose(c_in**2 * (sd**2 + sig**2), 1.0, rtol=1e-14)

    def test_small_sigma_returns_input(self):
        model = randomized_model(TINY, 5)
        x = rng_for(6, "limit").standard_normal((2, 16))
        out = denoise_fn(model, use_ema=False)(x, np.full(2, 1e-6))
        assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-4

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            precond_constants(0.0, 1.0)


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        model = randomized_model(TINY, 7)
        sch = DiffusionSchedule()
        rng = rng_for(8, "fd")
        x0 = rng.standard_normal((4, 16))
        times = stratified_times(sch, 4, rng)
        noise = rng.standard_normal(x0.shape)

        tape = Tape()
        watched = {k: tape.watch(v) for k, v in model.params.items()}
        loss = denoising_loss(model, x0, times, noise, sch, tape=tape, params=watched)
        grads = tape.backward(loss)

        probe = rng_for(9, "probe")
        keys = sorted(model.params)
        worst = 0.0
        for _ in range(20):
            k = keys[probe.integers(len(keys))]
            idx = int(probe.integers(model.params[k].size))
            h = 1e-5
            orig = model.params[k].flat[idx]
            model.params[k].flat[idx] = orig + h
            up = denoising_loss(model, x0, times, noise, sch).item()
            model.params[k].flat[idx] = orig - h
            dn = denoising_loss(model, x0, times, noise, sch).item()
            model.params[k].flat[idx] = orig
            fd = (up - dn) / (2 * h)
            an = grads.wrt(watched[k]).flat[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        assert worst < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        model = randomized_model(TINY, 10)
        rng = rng_for(11, "fd-in")
        x = rng.standard_normal((2, 1, 16))
        sig = np.array([0.6, 1.4])

        tape = Tape()
        xw = tape.watch(x)
        pred = denoiser_apply(model, xw, sig, tape=tape)
        grads = tape.backward(pred.sum_sq())
        g = grads.wrt(xw)

        def value(arr):
            return float(np.sum(denoiser_apply(model, Tensor(arr), sig).data ** 2))

        probe = rng_for(12, "probe")
        worst = 0.0
        for _ in range(10):
            b = int(probe.integers(2))
            i = int(probe.integers(16))
            h = 1e-5
            xp, xm = x.copy(), x.copy()
            xp[b, 0, i] += h
            xm[b, 0, i] -= h
            fd = (value(xp) - value(xm)) / (2 * h)
            worst = max(worst, abs(fd - g[b, 0, i]) / max(abs(fd), abs(g[b, 0, i]), 1e-8))
        assert worst < 1e-5


class TestModelPlumbing:
    def test_desk_parameter_count_pinned(self):
        cfg = UNetConfig()
        model = build_model(cfg, rng_for(13, "count"))
        assert model.param_count == DESK_PARAM_COUNT

    def test_checkpoint_round_trip(self, tmp_path):
        model = randomized_model(TINY, 14)
        model.sigma_data = 1.37
        path = tmp_path / "net.dkpt"
        save_model(path, model)
        back = load_model(path)
        assert back.config == TINY
        assert back.sigma_data == 1.37
        assert set(back.params) == set(model.params)
        for k in model.params:
            np.testing.assert_array_equal(back.params[k], model.params[k])
            np.testing.assert_array_equal(back.ema[k], model.ema[k])

    def test_ema_distinct_storage(self):
        model = build_model(TINY, rng_for(15, "ema"))
        model.params["head.b"] += 1.0
        assert model.ema["head.b"][0] == 0.0
