"""1D convolutional U-Net denoiser with EDM-style preconditioning.

The network runs entirely on circular convolutions so it inherits the
periodic translation symmetry of the data (exactly so for shifts that are
multiples of the total downsampling stride). Noise levels enter through
fixed Fourier features of (1/4) log sigma, projected into a per-channel
shift inside every residual block.

Model space is standardized: fields are divided by the training-set
standard deviation before entering the network, so the preconditioning
constants are evaluated at unit data spread and `sigma_data` only scales
inputs/outputs at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    Tape,
    Tensor,
    add_channel_bias,
    concat_channels,
    conv1d_circular,
    gelu,
    group_norm,
    linear,
    upsample_nearest,
)
from .tensor.checkpoint import load_tensors, save_tensors


@dataclass(frozen=True)
class UNetConfig:
    input_length: int = 192
    channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_level: int = 2
    emb_dim: int = 32
    groups: int = 8
    kernel: int = 3

    def __post_init__(self):
        if self.input_length % (2 ** len(self.channels)) != 0:
            raise ValueError(f"input length {self.input_length} not divisible by "
                             f"2^{len(self.channels)} levels")
        for c in self.channels:
            if c % self.groups != 0:
                raise ValueError(f"channel count {c} not divisible by {self.groups} groups")
        if self.emb_dim % 2 != 0:
            raise ValueError("emb_dim must be even (sin/cos feature pairs)")
        if self.kernel % 2 == 0:
            raise ValueError("kernel width must be odd")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.input_length // 2 ** (i + 1) for i in range(len(self.channels)))


@dataclass
class DenoiserModel:
    config: UNetConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    sigma_data: float = 1.0

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------------------
# noise embedding

_FREQ_LO, _FREQ_HI = 0.25, 16.0


def fourier_noise_embedding(sigma, dim: int) -> np.ndarray:
    """[sin(2 pi f_k c), cos(2 pi f_k c)] of c = (1/4) log sigma.

    Frequencies are fixed and log-spaced; the embedding has no trainable
    state of its own.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("noise embedding requires sigma > 0")
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    freqs = np.geomspace(_FREQ_LO, _FREQ_HI, dim // 2)
    c = 0.25 * np.log(sigma)
    angles = 2.0 * np.pi * freqs * c[..., None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# ---------------------------------------------------------------------------
# parameters


def _conv_w(rng, c_out, c_in, k):
    return rng.standard_normal((c_out, c_in, k)) * np.sqrt(2.0 / (c_in * k))


def _block_params(rng, prefix: str, c: int, emb_dim: int, k: int, out: dict):
    out[f"{prefix}.norm1.gamma"] = np.ones(c)
    out[f"{prefix}.norm1.beta"] = np.zeros(c)
    out[f"{prefix}.conv1.w"] = _conv_w(rng, c, c, k)
    out[f"{prefix}.conv1.b"] = np.zeros(c)
    out[f"{prefix}.emb.w"] = rng.standard_normal((emb_dim, c)) / np.sqrt(emb_dim)
    out[f"{prefix}.emb.b"] = np.zeros(c)
    out[f"{prefix}.norm2.gamma"] = np.ones(c)
    out[f"{prefix}.norm2.beta"] = np.zeros(c)
    out[f"{prefix}.conv2.w"] = np.zeros((c, c, k))  # zero-init last conv
    out[f"{prefix}.conv2.b"] = np.zeros(c)


def init_params(cfg: UNetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    ch = cfg.channels
    k = cfg.kernel
    p["embed.w"] = _conv_w(rng, ch[0], 1, 1)
    p["embed.b"] = np.zeros(ch[0])
    prev = ch[0]
    for i, c in enumerate(ch):
        p[f"down{i}.conv.w"] = _conv_w(rng, c, prev, k)
        p[f"down{i}.conv.b"] = np.zeros(c)
        for j in range(cfg.blocks_per_level):
            _block_params(rng, f"down{i}.res{j}", c, cfg.emb_dim, k, p)
        prev = c
    for j in range(cfg.blocks_per_level):
        _block_params(rng, f"mid.res{j}", ch[-1], cfg.emb_dim, k, p)
    for i in reversed(range(len(ch))):
        c_out = ch[i - 1] if i > 0 else ch[0]
        skip_c = ch[i - 1] if i > 0 else ch[0]
        p[f"up{i}.conv.w"] = _conv_w(rng, c_out, ch[i], k)
        p[f"up{i}.conv.b"] = np.zeros(c_out)
        p[f"up{i}.merge.w"] = _conv_w(rng, c_out, c_out + skip_c, 1)
        p[f"up{i}.merge.b"] = np.zeros(c_out)
        for j in range(cfg.blocks_per_level):
            _block_params(rng, f"up{i}.res{j}", c_out, cfg.emb_dim, k, p)
    p["head.w"] = np.zeros((1, ch[0], 1))  # zero-init output head
    p["head.b"] = np.zeros(1)
    return p


def build_model(cfg: UNetConfig, seed_rng: np.random.Generator) -> DenoiserModel:
    params = init_params(cfg, seed_rng)
    ema = {k: v.copy() for k, v in params.items()}
    return DenoiserModel(config=cfg, params=params, ema=ema)


# ---------------------------------------------------------------------------
# forward pass


def _resnet_block(cfg: UNetConfig, p, prefix: str, x: Tensor, emb: Tensor) -> Tensor:
    h = gelu(group_norm(x, cfg.groups, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"]))
    h = conv1d_circular(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    shift = linear(emb, p[f"{prefix}.emb.w"], p[f"{prefix}.emb.b"])
    h = add_channel_bias(h, shift)
    h = gelu(group_norm(h, cfg.groups, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"]))
    h = conv1d_circular(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    return x + h


def unet_forward(cfg: UNetConfig, params: dict[str, Tensor], x: Tensor,
                 noise_emb: Tensor) -> Tensor:
    """Raw network F: [B, 1, L] plus noise features [B, emb_dim] -> [B, 1, L]."""
    if x.shape[-1] != cfg.input_length or x.shape[-2] != 1:
        raise ValueError(f"expected input [B, 1, {cfg.input_length}], got {x.shape}")
    p = params
    h = conv1d_circular(x, p["embed.w"], p["embed.b"])
    skips = [h]
    for i in range(len(cfg.channels)):
        h = conv1d_circular(h, p[f"down{i}.conv.w"], p[f"down{i}.conv.b"], stride=2)
        for j in range(cfg.blocks_per_level):
            h = _resnet_block(cfg, p, f"down{i}.res{j}", h, noise_emb)
        skips.append(h)
    skips.pop()  # coarsest activation feeds the bottleneck directly
    for j in range(cfg.blocks_per_level):
        h = _resnet_block(cfg, p, f"mid.res{j}", h, noise_emb)
    for i in reversed(range(len(cfg.channels))):
        h = upsample_nearest(h, 2)
        h = conv1d_circular(h, p[f"up{i}.conv.w"], p[f"up{i}.conv.b"])
        h = concat_channels(h, skips.pop())
        h = conv1d_circular(h, p[f"up{i}.merge.w"], p[f"up{i}.merge.b"])
        for j in range(cfg.blocks_per_level):
            h = _resnet_block(cfg, p, f"up{i}.res{j}", h, noise_emb)
    return conv1d_circular(h, p["head.w"], p["head.b"])


# ---------------------------------------------------------------------------
# preconditioning


def precond_constants(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) of the preconditioned denoiser."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("preconditioning requires sigma > 0")
    var = sigma_data**2 + sigma**2
    c_skip = sigma_data**2 / var
    c_out = sigma * sigma_data / np.sqrt(var)
    c_in = 1.0 / np.sqrt(var)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def denoiser_apply(model: DenoiserModel, x_hat: np.ndarray, sigmas: np.ndarray,
                   tape: Tape | None = None,
                   params: dict[str, Tensor] | None = None,
                   use_ema: bool = False) -> Tensor:
    """D(x, sigma) = c_skip x + c_out F(c_in x, c_noise) in model space.

    `x_hat` is [B, L] (or [B, 1, L]) in standardized units; sigma may vary
    per batch element. Pass a tape plus watched parameters to make the
    output differentiable with respect to the parameters, or a tape alone
    with `x_hat` already watched for input gradients (the conditioning path
    differentiates through this function with respect to x).
    """
    cfg = model.config
    if isinstance(x_hat, Tensor):
        x = x_hat
    else:
        x = Tensor(np.asarray(x_hat, dtype=np.float64))
    if x.data.ndim == 2:
        raise ValueError("denoiser_apply expects [B, 1, L]; use denoise_fn for flat batches")
    batch = x.shape[0]
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (batch,))
    c_skip, c_out, c_in, _ = precond_constants(sigmas, 1.0)
    emb = Tensor(fourier_noise_embedding(sigmas, cfg.emb_dim))
    if params is None:
        source = model.ema if use_ema else model.params
        params = {k: Tensor(v) for k, v in source.items()}
    shape = (batch, 1, cfg.input_length)
    x_in = x * Tensor(np.broadcast_to(c_in[:, None, None], shape).copy())
    f_out = unet_forward(cfg, params, x_in, emb)
    skip = x * Tensor(np.broadcast_to(c_skip[:, None, None], shape).copy())
    return skip + f_out * Tensor(np.broadcast_to(c_out[:, None, None], shape).copy())


def denoise_fn(model: DenoiserModel, use_ema: bool = True):
    """Plain-array denoiser [B, L] -> [B, L] for samplers and oracles."""

    def fn(x_hat: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
        x = np.asarray(x_hat, dtype=np.float64)[:, None, :]
        out = denoiser_apply(model, x, sigmas, use_ema=use_ema)
        return out.data[:, 0, :]

    return fn


# ---------------------------------------------------------------------------
# checkpointing (DKPT container, config encoded as reserved-name tensors)


def save_model(path: str | Path, model: DenoiserModel) -> None:
    cfg = model.config
    tensors: dict[str, np.ndarray] = {
        "config/input_length": np.float64(cfg.input_length),
        "config/channels": np.asarray(cfg.channels, dtype=np.float64),
        "config/blocks_per_level": np.float64(cfg.blocks_per_level),
        "config/emb_dim": np.float64(cfg.emb_dim),
        "config/groups": np.float64(cfg.groups),
        "config/kernel": np.float64(cfg.kernel),
        "sigma_data": np.float64(model.sigma_data),
    }
    for k, v in model.params.items():
        tensors[f"param/{k}"] = v
    for k, v in model.ema.items():
        tensors[f"ema/{k}"] = v
    save_tensors(path, tensors)


def load_model(path: str | Path) -> DenoiserModel:
    tensors = load_tensors(path)
    cfg = UNetConfig(
        input_length=int(tensors["config/input_length"]),
        channels=tuple(int(c) for c in tensors["config/channels"]),
        blocks_per_level=int(tensors["config/blocks_per_level"]),
        emb_dim=int(tensors["config/emb_dim"]),
        groups=int(tensors["config/groups"]),
        kernel=int(tensors["config/kernel"]),
    )
    params = {k[len("param/"):]: v.copy() for k, v in tensors.items() if k.startswith("param/")}
    ema = {k[len("ema/"):]: v.copy() for k, v in tensors.items() if k.startswith("ema/")}
    return DenoiserModel(config=cfg, params=params, ema=ema,
                         sigma_data=float(tensors["sigma_data"]))
