"""DDPM over the autoencoder latent space.

Linear beta schedule, noise-prediction U-Net conditioned on a sinusoidal
timestep embedding plus a learned affine embedding of the conditioning
vector (combined by addition), and ancestral sampling with sigma_t^2 = beta_t.
Diffusion runs on the continuous pre-quantization latents, normalized to
zero mean / unit variance per channel with training-set statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class DiffusionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables; index [t-1] holds the value for step t."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.beta)

    def __post_init__(self):
        beta = np.asarray(self.beta)
        if beta.ndim != 1 or len(beta) < 1:
            raise DiffusionError("beta table must be a nonempty vector")
        if not ((beta > 0.0) & (beta < 1.0)).all():
            raise DiffusionError("all beta values must lie in (0, 1)")
        if len(beta) > 1 and not (np.diff(beta) > 0.0).all():
            raise DiffusionError("beta must be strictly increasing")
        if not ((self.alpha_bar > 0.0) & (self.alpha_bar < 1.0)).all():
            raise DiffusionError("alpha_bar must stay in (0, 1)")
        if len(beta) > 1 and not (np.diff(self.alpha_bar) < 0.0).all():
            raise DiffusionError("alpha_bar must be strictly decreasing")


def make_linear_schedule(
    timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """beta[t] = beta_start + (t-1)/(T-1) * (beta_end - beta_start), t = 1..T."""
    if timesteps < 1:
        raise DiffusionError("timesteps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DiffusionError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if timesteps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t, timesteps: int) -> None:
    t_arr = np.asarray(t if not isinstance(t, torch.Tensor) else t.detach().cpu().numpy())
    if (t_arr < 1).any() or (t_arr > timesteps).any():
        raise DiffusionError(f"t must lie in [1, {timesteps}], got {t_arr}")


def _at(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Look up table[t-1] and shape it to broadcast against `like`."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        values = torch.as_tensor(table, dtype=like.dtype, device=like.device)[t.long() - 1]
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(table[int(t) - 1], dtype=like.dtype, device=like.device)


def q_sample(
    z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward marginal: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    _check_t(t, sched.timesteps)
    if eps.shape != z0.shape:
        raise DiffusionError("noise shape must match z0")
    ab = _at(sched.alpha_bar, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def embed_timestep(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly batched) integer timesteps -> (B, dim)."""
    if dim % 2:
        raise DiffusionError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).float()


class ConditionEmbedding(nn.Module):
    """Learned affine map from conditioning vectors to the embedding space."""

    def __init__(self, cond_length: int, dim: int, init_std: float = 0.02):
        super().__init__()
        self.proj = nn.Linear(cond_length, dim)
        nn.init.normal_(self.proj.weight, std=init_std)
        nn.init.normal_(self.proj.bias, std=init_std)

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        return self.proj(cond)


def combine_embeddings(e_t: torch.Tensor, e_c: torch.Tensor) -> torch.Tensor:
    if e_t.shape[-1] != e_c.shape[-1]:
        raise DiffusionError(
            f"embedding dims differ: {e_t.shape[-1]} vs {e_c.shape[-1]}"
        )
    return e_t + e_c


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    cond_length: int
    d_latent: int = 4
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 64
    emb_dim: int = 128
    n_res_blocks: int = 2

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)


class _EmbResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserUNet(nn.Module):
    """Small time- and condition-conditional U-Net predicting the added noise."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        ch, emb = cfg.base_channels, cfg.emb_dim
        self.cond_embed = ConditionEmbedding(cfg.cond_length, emb)
        self.emb_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(cfg.d_latent, ch, 3, padding=1)
        self.down = nn.ModuleList([_EmbResBlock(ch, ch, emb) for _ in range(cfg.n_res_blocks)])
        self.downsample = nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1)
        self.mid = nn.ModuleList(
            [_EmbResBlock(ch * 2, ch * 2, emb) for _ in range(cfg.n_res_blocks)]
        )
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch * 2, ch, 3, padding=1)
        )
        self.up = nn.ModuleList(
            [_EmbResBlock(ch * 2 if i == 0 else ch, ch, emb) for i in range(cfg.n_res_blocks)]
        )
        self.norm_out = nn.GroupNorm(min(8, ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.d_latent, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if cond.ndim == 1:
            cond = cond.unsqueeze(0)
        if cond.shape[-1] != self.cfg.cond_length:
            raise DiffusionError(
                f"conditioning length {cond.shape[-1]} != expected {self.cfg.cond_length}"
            )
        t_batch = torch.as_tensor(t).reshape(-1)
        if len(t_batch) == 1 and z_t.shape[0] > 1:
            t_batch = t_batch.expand(z_t.shape[0])
        e_t = embed_timestep(t_batch, self.cfg.emb_dim).to(z_t.dtype)
        e_c = self.cond_embed(cond.to(z_t.dtype))
        emb = self.emb_mlp(combine_embeddings(e_t, e_c))
        h = self.conv_in(z_t)
        for block in self.down:
            h = block(h, emb)
        skip = h
        h = self.downsample(h)
        for block in self.mid:
            h = block(h, emb)
        h = self.upsample(h)
        h = torch.cat([h, skip], dim=1)
        for block in self.up:
            h = block(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# training loss and sampling
# ---------------------------------------------------------------------------

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def denoise_loss(
    z0: torch.Tensor,
    t,
    cond: torch.Tensor,
    model: Denoiser,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """MSE between fresh Gaussian noise and the model's prediction of it."""
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    pred = model(z_t, t, cond)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise DiffusionError("non-finite denoising loss")
    return loss


def p_sample_step(
    z_t: torch.Tensor,
    t: int,
    cond: torch.Tensor,
    model: Denoiser,
    sched: NoiseSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step; deterministic at t=1 (no noise injected)."""
    _check_t(t, sched.timesteps)
    t = int(t)
    eps_theta = model(z_t, t, cond)
    beta = _at(sched.beta, t, z_t)
    alpha = _at(sched.alpha, t, z_t)
    ab = _at(sched.alpha_bar, t, z_t)
    mean = (z_t - beta / torch.sqrt(1.0 - ab) * eps_theta) / torch.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    return mean + torch.sqrt(beta) * noise


@dataclass
class LatentStats:
    """Per-channel normalization of latents toward the unit-Gaussian prior."""

    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=z.dtype).reshape(1, -1, 1, 1)
        std = torch.as_tensor(self.std, dtype=z.dtype).reshape(1, -1, 1, 1)
        return (z - mean) / std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=z.dtype).reshape(1, -1, 1, 1)
        std = torch.as_tensor(self.std, dtype=z.dtype).reshape(1, -1, 1, 1)
        return z * std + mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def from_latents(cls, z: torch.Tensor, floor: float = 1e-6) -> "LatentStats":
        mean = z.mean(dim=(0, 2, 3)).double().numpy()
        std = np.maximum(z.std(dim=(0, 2, 3)).double().numpy(), floor)
        return cls(mean, std)


@torch.no_grad()
def sample_latents(
    cond: torch.Tensor,
    model: Denoiser,
    sched: NoiseSchedule,
    latent_hw: tuple[int, int],
    d_latent: int,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    stats: LatentStats | None = None,
) -> torch.Tensor:
    """Full reverse chain from Gaussian noise; pure function of (inputs, seed).

    cond: (B, L). Returns (B, D, h, w) latents, denormalized when stats given.
    The denoiser is invoked exactly `sched.timesteps` times.
    """
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    batch = cond.shape[0]
    shape = (batch, d_latent, latent_hw[0], latent_hw[1])
    z = torch.randn(shape, generator=generator)
    for t in range(sched.timesteps, 0, -1):
        noise = torch.randn(shape, generator=generator) if t > 1 else None
        z = p_sample_step(z, t, cond, model, sched, noise)
        if not torch.isfinite(z).all():
            raise DiffusionError(f"non-finite latent at reverse step t={t}")
    if stats is not None:
        z = stats.denormalize(z)
    return z


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_denoiser_checkpoint(
    path: Path, model: DenoiserUNet, stats: LatentStats, extra: dict | None = None
) -> None:
    payload = {
        "kind": "ldm",
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "latent_stats": stats.to_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_denoiser_checkpoint(path: Path) -> tuple[DenoiserUNet, LatentStats, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "ldm":
        raise DiffusionError(f"{path} is not a denoiser checkpoint")
    cfg = DiffusionConfig(**payload["config"])
    model = DenoiserUNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    stats = LatentStats.from_dict(payload["latent_stats"])
    return model, stats, payload.get("extra", {})
