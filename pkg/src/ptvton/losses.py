"""Adversarial and reconstruction objectives for the pose-transfer network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

EPS = 1e-7

FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.5
    rho: float = 0.5
    l1_weight: float = 1.0
    perceptual_weight: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.l1_weight < 0 or self.perceptual_weight < 0:
            raise ValueError("loss weights must be non-negative")


def _clamp(p):
    return torch.clamp(torch.as_tensor(p), EPS, 1.0 - EPS)


def gan_loss(d_a_real, d_s_real, d_a_fake, d_s_fake, rho: float = 0.5) -> torch.Tensor:
    """rho-weighted split of log[D_A * D_S] over real and fake pairs, batch-averaged."""
    real = rho * torch.log(_clamp(d_a_real)) + (1 - rho) * torch.log(_clamp(d_s_real))
    fake = rho * torch.log(1 - _clamp(d_a_fake)) + (1 - rho) * torch.log(1 - _clamp(d_s_fake))
    return real.mean() + fake.mean()


def generator_adversarial(d_a_fake, d_s_fake, rho: float = 0.5) -> torch.Tensor:
    # Non-saturating: maximize log D(fake) rather than minimize log(1 - D(fake)).
    return -(rho * torch.log(_clamp(d_a_fake)) + (1 - rho) * torch.log(_clamp(d_s_fake))).mean()


def combined_l1_loss(generated, target, weights: LossWeights,
                     features: Optional[FeatureExtractor] = None) -> torch.Tensor:
    generated = torch.as_tensor(generated)
    target = torch.as_tensor(target)
    if generated.shape != target.shape:
        raise ValueError(f"dimension mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    loss = weights.l1_weight * (generated - target).abs().mean()
    if weights.perceptual_weight > 0:
        if features is None:
            raise ValueError("perceptual_weight > 0 needs a feature extractor")
        loss = loss + weights.perceptual_weight * (features(generated) - features(target)).abs().mean()
    return loss


@dataclass
class BatchOutputs:
    """Generator output, its target, and the four discriminator probabilities."""

    generated: torch.Tensor
    target: torch.Tensor
    d_a_real: torch.Tensor
    d_s_real: torch.Tensor
    d_a_fake: torch.Tensor
    d_s_fake: torch.Tensor


def total_objective(out: BatchOutputs, weights: LossWeights,
                    features: Optional[FeatureExtractor] = None):
    """Return (generator_loss, discriminator_loss).

    The caller decides which graph each term flows through: detach
    ``generated`` before computing the fake probabilities used for the
    discriminator update.
    """
    recon = combined_l1_loss(out.generated, out.target, weights, features)
    if weights.alpha == 0:
        g_loss = recon
    else:
        g_loss = weights.alpha * generator_adversarial(out.d_a_fake, out.d_s_fake, weights.rho) + recon
    d_loss = -gan_loss(out.d_a_real, out.d_s_real, out.d_a_fake, out.d_s_fake, weights.rho)
    for name, val in (("generator", g_loss), ("discriminator", d_loss)):
        if not torch.isfinite(val).all():
            raise NonFiniteLossError(f"non-finite {name} loss: {val.detach().cpu().tolist()}")
    return g_loss, d_loss


class VGGFeatures(torch.nn.Module):
    """Frozen torchvision VGG19 features up to relu3_1.

    Needs the ImageNet weights to be available to torchvision; raises if
    they cannot be loaded rather than silently running with random weights.
    """

    def __init__(self, depth: int = 12):
        super().__init__()
        import torchvision

        vgg = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)
        self.net = vgg.features[:depth].eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        return self.net((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))
