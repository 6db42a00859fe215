"""Inference-time conditioning of the denoiser on a linear selection constraint.

For the selection operator S (rows of the identity) and condition values v,
the post-processed denoiser is

    D~(x, sigma) = S^+ v + (I - V V^T) [ D(x, sigma)
                     - alpha * grad_x || S D(x, sigma) - v ||^2 ],

whose selected coordinates equal v identically while the complementary ones
follow the denoiser plus a gradient nudge toward constraint consistency.
The gradient is exact reverse-mode through the full preconditioned network.
Substituting D~ for D in the score formula turns the reverse SDE into a
conditional sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import unet
from .diffusion import DiffusionSchedule, sample_reverse_sde
from .fields import GridField, SelectionMask
from .ot import EntropicTransport, barycentric_map
from .tensor import Tape, Tensor, take_positions


@dataclass(frozen=True)
class ConstraintSpec:
    """Selection constraint plus conditioning strength.

    `alpha_tilde` is the dimension-normalized strength; the raw strength is
    alpha = alpha_tilde * gamma with gamma = d'/d the conditioned fraction.
    """

    mask: SelectionMask | None
    y_bar_prime: np.ndarray
    alpha_tilde: float = 1.0

    def __post_init__(self):
        y = np.asarray(self.y_bar_prime, dtype=np.float64)
        object.__setattr__(self, "y_bar_prime", y)
        d_prime = 0 if self.mask is None else self.mask.d_prime
        if y.shape[-1] != d_prime:
            raise ValueError(f"condition has dimension {y.shape[-1]}, mask selects {d_prime}")

    @property
    def gamma(self) -> float:
        return 0.0 if self.mask is None else self.mask.d_prime / self.mask.d

    @property
    def alpha(self) -> float:
        return self.alpha_tilde * self.gamma


def selection_svd(mask: SelectionMask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Structural SVD of a selection operator: U = I, Sigma = I, V = S^T.

    Selection rows are orthonormal already, so no numerical factorization is
    involved and the pseudo-inverse is the transpose.
    """
    u = np.eye(mask.d_prime)
    sigma = np.ones(mask.d_prime)
    v = np.zeros((mask.d, mask.d_prime))
    v[mask.indices, np.arange(mask.d_prime)] = 1.0
    return u, sigma, v


def pinv_apply(mask: SelectionMask, y: np.ndarray) -> np.ndarray:
    """(S)^+ y: place selected values on the fine grid, zeros elsewhere."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(y.shape[:-1] + (mask.d,))
    out[..., mask.indices] = y
    return out


def complement_project(mask: SelectionMask, x: np.ndarray) -> np.ndarray:
    """(I - V V^T) x: zero the selected coordinates."""
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., mask.indices] = 0.0
    return out


def conditioned_denoise_fn(model: "unet.DenoiserModel", spec: ConstraintSpec):
    """Batch denoiser [B, d] -> [B, d] realizing the constrained target.

    `spec.y_bar_prime` holds model-space condition values: one row per chain
    or a single row shared by the batch. An empty constraint (no mask)
    reduces to the plain denoiser.
    """
    if spec.mask is None:
        return unet.denoise_fn(model, use_ema=True)
    idx = spec.mask.indices
    if spec.mask.d != model.config.input_length:
        raise ValueError(f"mask covers {spec.mask.d} points, model expects "
                         f"{model.config.input_length}")
    conditions = spec.y_bar_prime
    alpha = spec.alpha
    ema_params = {k: Tensor(v) for k, v in model.ema.items()}

    def fn(x_hat: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
        cond = conditions if conditions.ndim == 2 else np.broadcast_to(
            conditions, (x_hat.shape[0], idx.size))
        tape = Tape()
        xw = tape.watch(np.asarray(x_hat, dtype=np.float64)[:, None, :])
        pred = unet.denoiser_apply(model, xw, sigmas, tape=tape, params=ema_params)
        resid = take_positions(pred, idx) - Tensor(cond[:, None, :])
        constraint_loss = (resid * resid).sum()
        grad = tape.backward(constraint_loss).wrt(xw)[:, 0, :]
        out = pred.data[:, 0, :] - alpha * grad
        out[:, idx] = cond
        return out

    return fn


def conditioned_denoiser(model: "unet.DenoiserModel", spec: ConstraintSpec,
                         x_hat: np.ndarray, sigma: float) -> np.ndarray:
    """Single evaluation of the constrained denoiser on [B, d] (model space)."""
    fn = conditioned_denoise_fn(model, spec)
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    return fn(x_hat, np.full(x_hat.shape[0], float(sigma)))


def sample_conditional(model: "unet.DenoiserModel", mask: SelectionMask,
                       conditions: np.ndarray, samples_per_condition: int,
                       n_steps: int, rng: np.random.Generator,
                       alpha_tilde: float = 1.0,
                       schedule: DiffusionSchedule | None = None,
                       terminal_denoise: bool = True,
                       batch_size: int = 256) -> np.ndarray:
    """Draw conditional samples for each condition row (raw data units).

    Returns [n_conditions * samples_per_condition, d], grouped by condition
    (all samples of condition 0 first, and so on).
    """
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    n_cond = conditions.shape[0]
    chains = np.repeat(conditions, samples_per_condition, axis=0) / model.sigma_data
    total = n_cond * samples_per_condition
    d = model.config.input_length
    out = np.empty((total, d))
    for lo in range(0, total, batch_size):
        hi = min(lo + batch_size, total)
        spec = ConstraintSpec(mask, chains[lo:hi], alpha_tilde)
        fn = conditioned_denoise_fn(model, spec)
        block_rng = np.random.default_rng(rng.integers(2**63))
        out[lo:hi] = sample_reverse_sde(fn, d, hi - lo, n_steps, block_rng,
                                        schedule, terminal_denoise)
    return out * model.sigma_data


def downscale(model: "unet.DenoiserModel", transport: EntropicTransport,
              y_bar: GridField, n_steps: int, rng: np.random.Generator,
              alpha_tilde: float = 1.0,
              mask: SelectionMask | None = None,
              schedule: DiffusionSchedule | None = None,
              terminal_denoise: bool = True) -> GridField:
    """Full downscaling of one coarse snapshot: debias, condition, sample.

    The debiased condition is the barycentric image of `y_bar` under the
    fitted transport; the conditional reverse SDE then fills in the
    complementary fine-grid content.
    """
    d = model.config.input_length
    if mask is None:
        mask = SelectionMask(d, y_bar.n)
    y_prime = barycentric_map(transport, y_bar.values)
    samples = sample_conditional(model, mask, y_prime[None], 1, n_steps, rng,
                                 alpha_tilde, schedule, terminal_denoise)
    return GridField(samples[0], y_bar.L)
