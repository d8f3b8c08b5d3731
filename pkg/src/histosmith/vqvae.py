"""Vector-quantized autoencoder over image + distance map + type mask stacks.

The encoder halves resolution twice (factor 4 total) into a continuous
latent grid; each latent vector snaps to its nearest codebook prototype with
a straight-through gradient. The decoder shares a trunk and splits into two
heads: one reconstructs the RGB image and distance map (sigmoid-bounded),
the other predicts per-pixel class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import DOWNSCALE_FACTOR


class VqvaeError(RuntimeError):
    pass


@dataclass
class VqvaeConfig:
    n_classes: int
    d_embed: int = 4
    n_codes: int = 96
    channels: int = 64
    n_res_blocks: int = 2
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    adversarial: bool = False
    loss_weights: dict = field(
        default_factory=lambda: {
            "recon": 1.0,
            "perceptual": 0.1,
            "commitment": 0.25,
            "codebook": 1.0,
            "ce": 1.0,
            "tversky": 1.0,
            "adversarial": 0.1,
        }
    )

    @property
    def in_channels(self) -> int:
        return 3 + 1 + (self.n_classes + 1)


class DecoderOutputs(NamedTuple):
    image: torch.Tensor  # (B, 3, H, W) in [0, 1]
    dmap: torch.Tensor  # (B, 1, H, W) in [0, 1]
    logits: torch.Tensor  # (B, C+1, H, W)


@dataclass
class VqLossBreakdown:
    recon: float
    perceptual: float
    commitment: float
    codebook: float
    ce: float
    tversky: float
    adversarial: float
    total: float

    FIELDS = ("recon", "perceptual", "commitment", "codebook", "ce", "tversky", "adversarial")

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def nearest_code_indices(vectors: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest prototype per row; ties go to the smallest index.

    vectors: (N, D), codebook: (K, D) -> (N,) long
    """
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise VqvaeError("codebook must be a nonempty (K, D) matrix")
    if vectors.shape[-1] != codebook.shape[1]:
        raise VqvaeError(
            f"latent dim {vectors.shape[-1]} does not match codebook dim {codebook.shape[1]}"
        )
    d = ((vectors[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)  # (N, K)
    min_d = d.min(dim=1, keepdim=True).values
    k = codebook.shape[0]
    ids = torch.arange(k, device=vectors.device)
    # smallest index among the minima, independent of argmin tie behavior
    return torch.where(d == min_d, ids, k).min(dim=1).values


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Snap a latent grid to the codebook.

    z_e: (..., D) -> (indices (...,), vectors (..., D)); vectors[p] is exactly
    codebook[indices[p]].
    """
    flat = z_e.reshape(-1, z_e.shape[-1])
    idx = nearest_code_indices(flat, codebook)
    vectors = codebook[idx].reshape(z_e.shape)
    return idx.reshape(z_e.shape[:-1]), vectors


def vq_losses(z_e: torch.Tensor, selected: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(codebook, commitment) losses: mean squared error with blocked grads."""
    if z_e.shape != selected.shape:
        raise VqvaeError("latent and prototype shapes differ")
    codebook_loss = F.mse_loss(selected, z_e.detach())
    commitment_loss = F.mse_loss(z_e, selected.detach())
    return codebook_loss, commitment_loss


class VectorQuantizer(nn.Module):
    def __init__(self, n_codes: int, d_embed: int):
        super().__init__()
        self.codebook = nn.Parameter(torch.empty(n_codes, d_embed).uniform_(-1.0, 1.0))

    def forward(self, z_e: torch.Tensor):
        """z_e: (B, D, h, w) -> (z_q straight-through, indices, cb_loss, commit_loss)."""
        moved = z_e.movedim(1, -1)  # (B, h, w, D)
        idx, vectors = quantize(moved, self.codebook)
        codebook_loss, commitment_loss = vq_losses(moved, vectors)
        z_q = moved + (vectors - moved).detach()  # straight-through gradient
        return z_q.movedim(-1, 1), idx, codebook_loss, commitment_loss


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)

class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            _norm(channels), nn.SiLU(), nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels), nn.SiLU(), nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    def __init__(self, cfg: VqvaeConfig):
        super().__init__()
        ch = cfg.channels
        layers: list[nn.Module] = [nn.Conv2d(cfg.in_channels, ch // 2, 3, padding=1)]
        layers += [ResBlock(ch // 2)]
        layers += [nn.Conv2d(ch // 2, ch, 4, stride=2, padding=1)]
        layers += [ResBlock(ch) for _ in range(cfg.n_res_blocks)]
        layers += [nn.Conv2d(ch, ch, 4, stride=2, padding=1)]
        layers += [ResBlock(ch) for _ in range(cfg.n_res_blocks)]
        layers += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, cfg.d_embed, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: VqvaeConfig):
        super().__init__()
        ch = cfg.channels
        trunk: list[nn.Module] = [nn.Conv2d(cfg.d_embed, ch, 3, padding=1)]
        trunk += [ResBlock(ch) for _ in range(cfg.n_res_blocks)]
        trunk += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1)]
        trunk += [ResBlock(ch) for _ in range(cfg.n_res_blocks)]
        trunk += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch // 2, 3, padding=1)]
        trunk += [ResBlock(ch // 2), _norm(ch // 2), nn.SiLU()]
        self.trunk = nn.Sequential(*trunk)
        self.head_recon = nn.Conv2d(ch // 2, 4, 3, padding=1)
        self.head_types = nn.Conv2d(ch // 2, cfg.n_classes + 1, 3, padding=1)

    def forward(self, z_q) -> DecoderOutputs:
        h = self.trunk(z_q)
        recon = torch.sigmoid(self.head_recon(h))
        return DecoderOutputs(recon[:, :3], recon[:, 3:4], self.head_types(h))


class Vqvae(nn.Module):
    def __init__(self, cfg: VqvaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.quantizer = VectorQuantizer(cfg.n_codes, cfg.d_embed)
        self.decoder = Decoder(cfg)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3+1+C+1, H, W) -> continuous latent grid (B, D, H/4, W/4)."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise VqvaeError(
                f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if x.shape[2] % DOWNSCALE_FACTOR or x.shape[3] % DOWNSCALE_FACTOR:
            raise VqvaeError(f"H and W must be divisible by {DOWNSCALE_FACTOR}")
        return self.encoder(x)

    def decode(self, z_q: torch.Tensor) -> DecoderOutputs:
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor):
        z_e = self.encode(x)
        z_q, idx, codebook_loss, commitment_loss = self.quantizer(z_e)
        return self.decode(z_q), z_e, idx, codebook_loss, commitment_loss


class PatchDiscriminator(nn.Module):
    """Small strided-conv classifier over local patches (hinge-loss GAN head)."""

    def __init__(self, in_channels: int = 4, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels * 2, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _class_stats(probs: torch.Tensor, target: torch.Tensor, check_norm: bool = True):
    """Soft per-class TP/FN/FP over every pixel of the (optionally batched) input."""
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
        target = target.unsqueeze(0)
    if probs.ndim != 4:
        raise VqvaeError(f"probs must be (C,H,W) or (B,C,H,W), got ndim={probs.ndim}")
    if check_norm:
        sums = probs.sum(dim=1)
        if (sums - 1.0).abs().max().item() > 1e-4:
            raise VqvaeError("probabilities must sum to 1 per pixel (within 1e-4)")
    n_classes = probs.shape[1]
    onehot = F.one_hot(target.long(), n_classes).movedim(-1, 1).to(probs.dtype)
    tp = (probs * onehot).sum(dim=(0, 2, 3))
    fn = ((1.0 - probs) * onehot).sum(dim=(0, 2, 3))
    fp = (probs * (1.0 - onehot)).sum(dim=(0, 2, 3))
    return tp, fn, fp


def tversky_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    alpha: float = 0.7,
    beta: float = 0.3,
    eps: float = 1e-7,
) -> torch.Tensor:
    """Mean over classes of 1 - (TP+eps)/(TP + alpha*FN + beta*FP + eps)."""
    if alpha <= 0 or beta <= 0:
        raise VqvaeError("alpha and beta must be positive")
    tp, fn, fp = _class_stats(probs, target)
    index = (tp + eps) / (tp + alpha * fn + beta * fp + eps)
    return (1.0 - index).mean()


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Independent soft-Dice: 1 - mean_c (2*TP + 2eps) / (P_c + T_c + 2eps)."""
    if probs.ndim == 3:
        probs_b, target_b = probs.unsqueeze(0), target.unsqueeze(0)
    else:
        probs_b, target_b = probs, target
    n_classes = probs_b.shape[1]
    onehot = F.one_hot(target_b.long(), n_classes).movedim(-1, 1).to(probs_b.dtype)
    tp = (probs_b * onehot).sum(dim=(0, 2, 3))
    pred_mass = probs_b.sum(dim=(0, 2, 3))
    true_mass = onehot.sum(dim=(0, 2, 3))
    dice = (2.0 * tp + 2.0 * eps) / (pred_mass + true_mass + 2.0 * eps)
    return (1.0 - dice).mean()


def pooled_color_features(image: torch.Tensor, levels: tuple[int, ...] = (1, 2, 4)) -> list[torch.Tensor]:
    """Average-pooled color means at several grid resolutions (torch, differentiable)."""
    return [F.adaptive_avg_pool2d(image, (l, l)) for l in levels]


def reconstruction_and_perceptual_loss(
    outputs: DecoderOutputs,
    image: torch.Tensor,
    dmap: torch.Tensor,
    feature_extractor: Callable[[torch.Tensor], list[torch.Tensor]] = pooled_color_features,
) -> tuple[torch.Tensor, torch.Tensor]:
    """L1 over image+distance channels; summed MSE over extractor levels (image only)."""
    recon = torch.cat([outputs.image, outputs.dmap], dim=1)
    target = torch.cat([image, dmap], dim=1)
    recon_loss = (recon - target).abs().mean()
    perceptual = sum(
        F.mse_loss(fa, fb)
        for fa, fb in zip(feature_extractor(outputs.image), feature_extractor(image))
    )
    return recon_loss, perceptual


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def adversarial_loss(
    discriminator: nn.Module, real: torch.Tensor, fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(d_loss, g_loss) under the hinge formulation."""
    d_loss = hinge_d_loss(discriminator(real), discriminator(fake.detach()))
    g_loss = hinge_g_loss(discriminator(fake))
    return d_loss, g_loss


def one_hot_types(types: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(B, H, W) int -> (B, C+1, H, W) float one-hot including background."""
    return F.one_hot(types.long(), n_classes + 1).movedim(-1, 1).float()


def stack_inputs(image: torch.Tensor, dmap: torch.Tensor, types: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Concatenate image (B,3,H,W), dmap (B,1,H,W) and one-hot types along channels."""
    return torch.cat([image, dmap, one_hot_types(types, n_classes)], dim=1)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class VqvaeTrainState:
    model: Vqvae
    optimizer: torch.optim.Optimizer
    discriminator: PatchDiscriminator | None = None
    d_optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    code_usage: torch.Tensor | None = None  # per-code hit counter for reseeding

    def __post_init__(self):
        if self.code_usage is None:
            self.code_usage = torch.zeros(self.model.cfg.n_codes, dtype=torch.long)


def compute_vqvae_losses(
    model: Vqvae, image: torch.Tensor, dmap: torch.Tensor, types: torch.Tensor,
    discriminator: PatchDiscriminator | None = None,
) -> tuple[torch.Tensor, VqLossBreakdown, torch.Tensor]:
    cfg = model.cfg
    x = stack_inputs(image, dmap, types, cfg.n_classes)
    outputs, z_e, idx, codebook_loss, commitment_loss = model(x)
    recon_loss, perceptual = reconstruction_and_perceptual_loss(outputs, image, dmap)
    ce = F.cross_entropy(outputs.logits, types.long())
    probs = torch.softmax(outputs.logits, dim=1)
    tversky = tversky_loss(probs, types, cfg.tversky_alpha, cfg.tversky_beta)
    if discriminator is not None and cfg.adversarial:
        real = torch.cat([image, dmap], dim=1)
        fake = torch.cat([outputs.image, outputs.dmap], dim=1)
        _, g_loss = adversarial_loss(discriminator, real, fake)
    else:
        g_loss = torch.zeros((), dtype=recon_loss.dtype)
    w = cfg.loss_weights
    total = (
        w["recon"] * recon_loss
        + w["perceptual"] * perceptual
        + w["commitment"] * commitment_loss
        + w["codebook"] * codebook_loss
        + w["ce"] * ce
        + w["tversky"] * tversky
        + w["adversarial"] * g_loss
    )
    breakdown = VqLossBreakdown(
        recon=recon_loss.item(),
        perceptual=float(perceptual),
        commitment=commitment_loss.item(),
        codebook=codebook_loss.item(),
        ce=ce.item(),
        tversky=tversky.item(),
        adversarial=float(g_loss),
        total=total.item(),
    )
    return total, breakdown, idx


def train_step_vqvae(
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    state: VqvaeTrainState,
    config: VqvaeConfig,
) -> tuple[VqvaeTrainState, VqLossBreakdown]:
    """One gradient step on the weighted total loss; returns the breakdown."""
    image, dmap, types = batch
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total, breakdown, idx = compute_vqvae_losses(
        state.model, image, dmap, types, state.discriminator
    )
    if not torch.isfinite(total):
        raise VqvaeError(f"non-finite total loss at step {state.step}: {breakdown.as_dict()}")
    total.backward()
    state.optimizer.step()
    if state.discriminator is not None and config.adversarial:
        state.d_optimizer.zero_grad(set_to_none=True)
        with torch.no_grad():
            x = stack_inputs(image, dmap, types, config.n_classes)
            outputs = state.model(x)[0]
            fake = torch.cat([outputs.image, outputs.dmap], dim=1)
        real = torch.cat([image, dmap], dim=1)
        d_loss = hinge_d_loss(state.discriminator(real), state.discriminator(fake))
        d_loss.backward()
        state.d_optimizer.step()
    state.code_usage += torch.bincount(idx.reshape(-1), minlength=config.n_codes)
    state.step += 1
    return state, breakdown


def reseed_dead_codes(
    state: VqvaeTrainState, latents: torch.Tensor, generator: torch.Generator
) -> int:
    """Re-seed prototypes that went unused since the last reset.

    Dead codes are replaced by encoder outputs drawn at random from `latents`
    (a (N, D) matrix of recent z_e vectors). Returns the number reseeded.
    """
    dead = torch.nonzero(state.code_usage == 0).reshape(-1)
    if len(dead) > 0 and len(latents) > 0:
        pick = torch.randint(0, len(latents), (len(dead),), generator=generator)
        with torch.no_grad():
            state.model.quantizer.codebook[dead] = latents[pick]
    state.code_usage.zero_()
    return int(len(dead))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_vqvae_checkpoint(path: Path, model: Vqvae, extra: dict | None = None) -> None:
    payload = {
        "kind": "vqvae",
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_vqvae_checkpoint(path: Path) -> tuple[Vqvae, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "vqvae":
        raise VqvaeError(f"{path} is not a vqvae checkpoint")
    cfg = VqvaeConfig(**payload["config"])
    model = Vqvae(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
