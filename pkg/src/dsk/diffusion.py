"""Variance-preserving diffusion: schedule, training objective, sampling.

The forward process perturbs data as x_t = s_t (x_0 + sigma_t eps) with the
VP profile sigma_t = sqrt(exp(beta_d t^2 / 2 + beta_min t) - 1) and
s_t = 1/sqrt(sigma_t^2 + 1). Sampling integrates the reverse SDE written in
denoiser form with Euler-Maruyama over an exponentially spaced noise grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import NumericalError
from .tensor import Tape, Tensor
from . import unet
from .seeding import rng_for


@dataclass(frozen=True)
class DiffusionSchedule:
    beta_d: float = 19.9
    beta_min: float = 0.1
    eps_t: float = 1e-3

    def _exponent(self, t):
        return 0.5 * self.beta_d * t * t + self.beta_min * t

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("diffusion time must lie in [0, 1]")
        return np.sqrt(np.expm1(self._exponent(t)))

    def scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("diffusion time must lie in [0, 1]")
        return np.exp(-0.5 * self._exponent(t))

    def t_of_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma < 0.0):
            raise ValueError("sigma must be non-negative")
        # positive root of beta_d t^2 / 2 + beta_min t = log(sigma^2 + 1)
        rhs = np.log1p(sigma * sigma)
        disc = self.beta_min**2 + 2.0 * self.beta_d * rhs
        return (np.sqrt(disc) - self.beta_min) / self.beta_d

    def beta(self, t):
        return self.beta_d * np.asarray(t, dtype=np.float64) + self.beta_min

    def sigma_deriv(self, t):
        """d sigma / dt; the exponential form keeps it finite near t = 0."""
        sig = self.sigma(t)
        ex = np.exp(self._exponent(np.asarray(t, dtype=np.float64)))
        return 0.5 * self.beta(t) * ex / np.maximum(sig, 1e-300)

    @property
    def sigma_min(self) -> float:
        return float(self.sigma(self.eps_t))

    @property
    def sigma_max(self) -> float:
        return float(self.sigma(1.0))

    def loss_weight(self, sigma, sigma_data: float = 1.0):
        """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
        sigma = np.asarray(sigma, dtype=np.float64)
        return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def perturb(x0: np.ndarray, t: float, schedule: DiffusionSchedule,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw x_t = s_t (x0 + sigma_t eps); returns (x_t, eps)."""
    if not (schedule.eps_t <= t <= 1.0):
        raise ValueError(f"t={t} outside [{schedule.eps_t}, 1]")
    eps = rng.standard_normal(np.shape(x0))
    s, sig = schedule.scale(t), schedule.sigma(t)
    return s * (x0 + sig * eps), eps


def exponential_time_grid(schedule: DiffusionSchedule, n_steps: int,
                          sigma_min: float | None = None,
                          sigma_max: float | None = None) -> np.ndarray:
    """Times whose sigmas decay geometrically from sigma_max to sigma_min."""
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    lo = schedule.sigma_min if sigma_min is None else sigma_min
    hi = schedule.sigma_max if sigma_max is None else sigma_max
    if not (0.0 < lo < hi):
        raise ValueError(f"invalid sigma range [{lo}, {hi}]")
    sigmas = hi * (lo / hi) ** (np.arange(n_steps + 1) / n_steps)
    sigmas[0], sigmas[-1] = hi, lo
    return schedule.t_of_sigma(sigmas)


def stratified_times(schedule: DiffusionSchedule, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """One time per stratum of an even partition of [eps_t, 1]."""
    dt = (1.0 - schedule.eps_t) / n
    t0 = rng.uniform(schedule.eps_t, schedule.eps_t + dt)
    return t0 + dt * np.arange(n)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_steps: int = 1_000
    grad_clip: float = 1.0
    ema_decay: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    def learning_rate(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr_max * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        frac = (step - self.warmup_steps) / span
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def denoising_loss(model: "unet.DenoiserModel", x0: np.ndarray, times: np.ndarray,
                   noise: np.ndarray, schedule: DiffusionSchedule,
                   tape: Tape | None = None,
                   params: dict[str, Tensor] | None = None) -> Tensor:
    """Weighted denoising error over a batch of standardized fields.

    sum_i lambda(sigma_i) || D(x0_i + sigma_i eps_i, sigma_i) - x0_i ||^2,
    with x0 already in model (unit data-std) space. Times and noise are
    passed in explicitly so the loss is a deterministic function, which keeps
    finite-difference checks meaningful.
    """
    sigmas = schedule.sigma(times)
    noised = (x0 + sigmas[:, None] * noise)[:, None, :]
    pred = unet.denoiser_apply(model, noised, sigmas, tape=tape, params=params)
    lam = schedule.loss_weight(sigmas)
    weights = np.broadcast_to(lam[:, None, None], noised.shape).copy()
    diff = pred - Tensor(x0[:, None, :])
    return (diff * Tensor(weights) * diff).sum()


@dataclass
class TrainResult:
    model: "unet.DenoiserModel"
    loss_history: np.ndarray
    val_history: np.ndarray


def train(model: "unet.DenoiserModel", data: np.ndarray, cfg: TrainConfig,
          schedule: DiffusionSchedule | None = None,
          val_fraction: float = 0.02,
          log_every: int = 0) -> TrainResult:
    """Adam with warmup+cosine schedule, unit-norm gradient clipping, EMA.

    `data` is raw-unit snapshots [n, d]; the global standard deviation is
    absorbed into `model.sigma_data` and training runs on data / sigma_data.
    Each drawn sample receives a random circular shift (the system is
    translation symmetric on a periodic domain).
    """
    schedule = schedule or DiffusionSchedule()
    rng = rng_for(cfg.seed, "train")

    sigma_data = float(np.std(data))
    if not np.isfinite(sigma_data) or sigma_data <= 0:
        raise ValueError("training data must have positive, finite spread")
    model = replace(model, sigma_data=sigma_data)
    scaled = data / sigma_data

    n_val = max(2, int(len(scaled) * val_fraction))
    val = scaled[:n_val]
    pool = scaled[n_val:] if len(scaled) > n_val else scaled
    d = scaled.shape[1]

    val_rng = rng_for(cfg.seed, "train", "val")
    val_times = stratified_times(schedule, len(val), val_rng)
    val_noise = val_rng.standard_normal(val.shape)

    def val_loss() -> float:
        return denoising_loss(model, val, val_times, val_noise, schedule).item() / len(val)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    ema = {k: v.copy() for k, v in model.params.items()}
    losses = np.empty(cfg.steps)
    val_history = [val_loss()]

    for step in range(cfg.steps):
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        shifts = rng.integers(0, d, size=cfg.batch_size)
        batch = np.stack([np.roll(pool[i], s) for i, s in zip(idx, shifts)])
        times = stratified_times(schedule, cfg.batch_size, rng)
        noise = rng.standard_normal(batch.shape)

        tape = Tape()
        watched = {k: tape.watch(v) for k, v in model.params.items()}
        loss = denoising_loss(model, batch, times, noise, schedule,
                              tape=tape, params=watched)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalError(f"non-finite training loss at step {step}")
        losses[step] = loss_val
        grads = tape.backward(loss)

        gvec = {k: grads.wrt(watched[k]) for k in model.params}
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in gvec.values()))
        if gnorm > cfg.grad_clip:
            clip = cfg.grad_clip / gnorm
            gvec = {k: g * clip for k, g in gvec.items()}

        lr = cfg.learning_rate(step)
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1 ** (step + 1)
        bias2 = 1.0 - b2 ** (step + 1)
        for k, g in gvec.items():
            m_state[k] = b1 * m_state[k] + (1.0 - b1) * g
            v_state[k] = b2 * v_state[k] + (1.0 - b2) * g * g
            model.params[k] -= lr * (m_state[k] / bias1) / (np.sqrt(v_state[k] / bias2) + cfg.adam_eps)
            ema[k] = cfg.ema_decay * ema[k] + (1.0 - cfg.ema_decay) * model.params[k]

        if log_every and (step + 1) % log_every == 0:
            val_history.append(val_loss())
            logging.getLogger("dsk.train").info(
                "step %d/%d: batch loss %.2f, val loss %.2f, lr %.2e",
                step + 1, cfg.steps, loss_val / cfg.batch_size, val_history[-1], lr)

    model = replace(model, ema=ema)
    val_history.append(val_loss())
    return TrainResult(model=model, loss_history=losses, val_history=np.asarray(val_history))


# ---------------------------------------------------------------------------
# score extraction and sampling


def score(model: "unet.DenoiserModel", x_t: np.ndarray, t: float,
          schedule: DiffusionSchedule | None = None) -> np.ndarray:
    """Score of the noised marginal from the denoiser (Tweedie form).

    grad log p_t(x_t) = (D(x_t / s_t, sigma_t) - x_t / s_t) / (s_t sigma_t^2),
    evaluated with the EMA parameters. Singular at t = 0 where sigma
    vanishes.
    """
    schedule = schedule or DiffusionSchedule()
    if t <= 0.0:
        raise ValueError("score is singular at t = 0")
    s, sig = float(schedule.scale(t)), float(schedule.sigma(t))
    fn = unet.denoise_fn(model, use_ema=True)
    x_hat = np.asarray(x_t, dtype=np.float64) / s
    single = x_hat.ndim == 1
    xh = x_hat[None] if single else x_hat
    out = (fn(xh, np.full(xh.shape[0], sig)) - xh) / (s * sig * sig)
    return out[0] if single else out


def sample_reverse_sde(denoise, d: int, n_samples: int, n_steps: int,
                       rng: np.random.Generator,
                       schedule: DiffusionSchedule | None = None,
                       terminal_denoise: bool = True,
                       sigma_min: float | None = None,
                       sigma_max: float | None = None) -> np.ndarray:
    """Euler-Maruyama integration of the reverse SDE in denoiser form.

    dx = [(2 sig'/sig + s'/s) x - (2 s sig'/sig) D(x/s, sig)] dt
         + s sqrt(2 sig' sig) dW,

    which is exactly f(t) x - g(t)^2 * score for the VP drift/diffusion pair.
    The drift uses the explicit left-endpoint evaluation; the Brownian
    increment carries its exact per-step variance, which for the VP profile
    is integral g^2 dt = log[(1 + sig_i^2)/(1 + sig_{i+1}^2)].

    `denoise` maps (x_hat [B, d], sigmas [B]) to the denoised batch. The
    state starts at N(0, s^2 sigma^2 I) at the largest grid time and the
    returned sample is the terminal state, optionally passed through the
    denoiser once at sigma_min.
    """
    schedule = schedule or DiffusionSchedule()
    grid = exponential_time_grid(schedule, n_steps, sigma_min, sigma_max)
    t0 = float(grid[0])
    s0, sig0 = float(schedule.scale(t0)), float(schedule.sigma(t0))
    x = rng.standard_normal((n_samples, d)) * (s0 * sig0)

    for i in range(n_steps):
        t = float(grid[i])
        dt = float(grid[i + 1]) - t
        s, sig = float(schedule.scale(t)), float(schedule.sigma(t))
        sig_next = float(schedule.sigma(grid[i + 1]))
        beta = float(schedule.beta(t))
        dlog_sigma = 0.5 * beta * (sig * sig + 1.0) / (sig * sig)  # sig'/sig
        dlog_s = -0.5 * beta                                       # s'/s
        target = denoise(x / s, np.full(n_samples, sig))
        drift = (2.0 * dlog_sigma + dlog_s) * x - (2.0 * s * dlog_sigma) * target
        noise_var = math.log((1.0 + sig * sig) / (1.0 + sig_next * sig_next))
        noise = rng.standard_normal(x.shape)
        x = x + drift * dt + math.sqrt(noise_var) * noise
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"reverse SDE diverged at step {i}")

    t_end = float(grid[-1])
    if terminal_denoise:
        s, sig = float(schedule.scale(t_end)), float(schedule.sigma(t_end))
        x = denoise(x / s, np.full(n_samples, sig))
    return x


def sample_unconditional(model: "unet.DenoiserModel", n_samples: int, n_steps: int,
                         rng: np.random.Generator,
                         schedule: DiffusionSchedule | None = None,
                         terminal_denoise: bool = True) -> np.ndarray:
    """Draw model-prior samples in raw data units."""
    fn = unet.denoise_fn(model, use_ema=True)
    out = sample_reverse_sde(fn, model.config.input_length, n_samples, n_steps,
                             rng, schedule, terminal_denoise)
    return out * model.sigma_data
