"""Pose-attentional transfer generator and the appearance/shape discriminators."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .pose import FRAME_H, FRAME_W, NUM_JOINTS


@dataclass
class ArchConfig:
    base_channels: int = 64
    n_blocks: int = 9
    disc_channels: int = 64
    disc_layers: int = 4
    stem_kernel: int = 7

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(c_out, affine=True),
    )


class AttentionBlock(nn.Module):
    """Pose-attentional transfer block.

    The pose pathway sees both streams and is updated residually; its
    projection, squashed by a sigmoid, gates the residual update of the
    image pathway: ``f + M * conv(f)``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.image_conv = _conv_block(channels, channels)
        self.pose_conv = _conv_block(2 * channels, channels)
        self.attn_proj = nn.Conv2d(channels, channels, 1)

    def attention(self, pose_features):
        return torch.sigmoid(self.attn_proj(pose_features))

    def forward(self, image_features, pose_features):
        if image_features.shape != pose_features.shape:
            raise ValueError(
                f"misaligned feature maps: image {tuple(image_features.shape)}, "
                f"pose {tuple(pose_features.shape)}")
        pose_out = pose_features + self.pose_conv(torch.cat([image_features, pose_features], dim=1))
        mask = self.attention(pose_out)
        image_out = image_features + mask * self.image_conv(image_features)
        return image_out, pose_out


def force_zero_attention(block: AttentionBlock, logit: float = -1e4) -> None:
    """Pin the attention mask at 0 (sigmoid of a huge negative bias)."""
    with torch.no_grad():
        block.attn_proj.weight.zero_()
        block.attn_proj.bias.fill_(logit)


def _encoder(c_in, c, k=7):
    return nn.Sequential(
        nn.Conv2d(c_in, c, k, padding=k // 2, padding_mode="reflect"),
        nn.InstanceNorm2d(c, affine=True), nn.ReLU(inplace=True),
        nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
        nn.InstanceNorm2d(2 * c, affine=True), nn.ReLU(inplace=True),
        nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
        nn.InstanceNorm2d(4 * c, affine=True), nn.ReLU(inplace=True),
    )


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch or ArchConfig()
        c = self.arch.base_channels
        k = self.arch.stem_kernel
        if k % 2 == 0:
            raise ValueError(f"stem_kernel must be odd, got {k}")
        self.image_encoder = _encoder(3, c, k)
        self.pose_encoder = _encoder(2 * NUM_JOINTS, c, k)
        self.blocks = nn.ModuleList([AttentionBlock(4 * c) for _ in range(self.arch.n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * c, affine=True), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(c, 3, k, padding=k // 2, padding_mode="reflect"),
            nn.Tanh(),
        )

    def forward(self, source_image, source_pose, target_pose):
        """Tensors in NCHW; image in [0, 1]; returns an image in [0, 1]."""
        x = self.image_encoder(source_image * 2.0 - 1.0)
        p = self.pose_encoder(torch.cat([source_pose, target_pose], dim=1))
        for block in self.blocks:
            x, p = block(x, p)
        return (self.decoder(x) + 1.0) / 2.0


class _PatchDiscriminator(nn.Module):
    def __init__(self, c_in, c, n_layers):
        super().__init__()
        layers = [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = c
        for _ in range(n_layers - 1):
            layers += [nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(2 * ch, affine=True),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch *= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch, 1)

    def forward(self, x):
        f = self.features(x).mean(dim=(2, 3))
        return torch.sigmoid(self.head(f)).squeeze(1)


class Discriminators(nn.Module):
    """D_A scores (source image, candidate); D_S scores (target heatmaps, candidate)."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch or ArchConfig()
        a = self.arch
        self.appearance = _PatchDiscriminator(6, a.disc_channels, a.disc_layers)
        self.shape = _PatchDiscriminator(NUM_JOINTS + 3, a.disc_channels, a.disc_layers)

    def forward(self, which: str, conditioning, candidate):
        if which == "appearance":
            if conditioning.shape[1] != 3:
                raise ValueError("appearance discriminator conditions on an RGB source image")
            return self.appearance(torch.cat([conditioning * 2 - 1, candidate * 2 - 1], dim=1))
        if which == "shape":
            if conditioning.shape[1] != NUM_JOINTS:
                raise ValueError("shape discriminator conditions on an 18-channel heatmap stack")
            return self.shape(torch.cat([conditioning, candidate * 2 - 1], dim=1))
        raise ValueError(f"unknown discriminator {which!r}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array -> (1, 3, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)), dtype=dtype)[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float64).cpu().numpy()[0].transpose(1, 2, 0).clip(0.0, 1.0)


def generator_forward(g: Generator, source_image: np.ndarray, source_pose, target_pose) -> np.ndarray:
    """Numpy convenience wrapper: one 256x192 image plus two HeatmapStacks."""
    img = np.asarray(source_image)
    if img.shape != (FRAME_H, FRAME_W, 3):
        raise ValueError(f"source image must be {(FRAME_H, FRAME_W, 3)}, got {img.shape}")
    for hm in (source_pose, target_pose):
        if hm.channels.shape != (NUM_JOINTS, FRAME_H, FRAME_W):
            raise ValueError(f"heatmap stack has shape {hm.channels.shape}")
    dtype = next(g.parameters()).dtype
    with torch.no_grad():
        out = g(image_to_tensor(img, dtype),
                torch.as_tensor(source_pose.channels, dtype=dtype)[None],
                torch.as_tensor(target_pose.channels, dtype=dtype)[None])
    return tensor_to_image(out)
