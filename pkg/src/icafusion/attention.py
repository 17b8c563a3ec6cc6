"""Interactive and compensatory attention blocks.

Feature maps use the torch layout ``(batch, channels, height, width)``.
Both blocks cascade a channel gate and a spatial gate.  The interactive
block takes two feature maps and makes their gate scores compete through a
two-way softmax, so the weights of the two paths sum to one at every
channel / pixel.  The compensatory block gates a single map with the raw
sigmoid scores.
"""
from __future__ import annotations

import copy

import torch
from torch import nn

from .errors import DimensionError


def _check_map(x: torch.Tensor, channels: int | None = None, name: str = "feature map") -> None:
    if x.dim() != 4:
        raise DimensionError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise DimensionError(f"{name} has {x.shape[1]} channels, gate expects {channels}")


class ChannelGate(nn.Module):
    """Per-channel sigmoid scores from global average and max descriptors.

    Each pooled descriptor goes through conv -> PReLU -> conv with a
    ``channels // reduction`` bottleneck; the two results are concatenated
    and merged back to ``channels`` scores.  The descriptors are 1x1, so the
    convolutions are 1x1.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise DimensionError("channels and reduction must be positive")
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.avg_branch = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.PReLU(init=0.25), nn.Conv2d(hidden, channels, 1)
        )
        self.max_branch = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.PReLU(init=0.25), nn.Conv2d(hidden, channels, 1)
        )
        self.merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_map(x, self.channels)
        avg = self.avg_branch(x.mean(dim=(2, 3), keepdim=True))
        mx = self.max_branch(x.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(self.merge(torch.cat([avg, mx], dim=1)))


class SpatialGate(nn.Module):
    """Per-pixel sigmoid scores from channel-axis average and max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise DimensionError("spatial kernel size must be odd")
        self.merge = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_map(x)
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.merge(pooled))


def channel_gate(x: torch.Tensor, gate: ChannelGate) -> torch.Tensor:
    """Channel scores in (0, 1), shape ``(B, C, 1, 1)``."""
    return gate(x)


def spatial_gate(x: torch.Tensor, gate: SpatialGate) -> torch.Tensor:
    """Spatial scores in (0, 1), shape ``(B, 1, H, W)``."""
    return gate(x)


def dueling_softmax(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise two-way softmax: ``exp(a) / (exp(a) + exp(b))`` and its complement."""
    if a.shape != b.shape:
        raise DimensionError(f"dueling softmax needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    top = torch.maximum(a, b)
    ea = torch.exp(a - top)
    eb = torch.exp(b - top)
    total = ea + eb
    return ea / total, eb / total


class InteractiveAttention(nn.Module):
    """Two-input attention returning ``cat[m_sa, n_sa]`` with ``2 * channels`` channels.

    ``use_channel`` / ``use_spatial`` switch a stage to identity gating (used
    by the ablation variants).  ``literal_eq12`` reproduces the misprinted
    form where the second spatial map reuses the first path's channel map.
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 4,
        spatial_kernel: int = 7,
        use_channel: bool = True,
        use_spatial: bool = True,
        literal_eq12: bool = False,
    ):
        super().__init__()
        self.channels = channels
        self.literal_eq12 = literal_eq12
        self.channel_m = ChannelGate(channels, reduction) if use_channel else None
        self.channel_n = ChannelGate(channels, reduction) if use_channel else None
        self.spatial_m = SpatialGate(spatial_kernel) if use_spatial else None
        self.spatial_n = SpatialGate(spatial_kernel) if use_spatial else None

    def forward(self, phi_m: torch.Tensor, phi_n: torch.Tensor, return_weights: bool = False):
        _check_map(phi_m, self.channels, "phi_m")
        _check_map(phi_n, self.channels, "phi_n")
        if phi_m.shape != phi_n.shape:
            raise DimensionError(f"phi_m {tuple(phi_m.shape)} and phi_n {tuple(phi_n.shape)} differ")
        weights = {}

        if self.channel_m is not None:
            beta_m, beta_n = dueling_softmax(self.channel_m(phi_m), self.channel_n(phi_n))
            m_ca, n_ca = phi_m * beta_m, phi_n * beta_n
            weights["channel"] = (beta_m, beta_n)
        else:
            m_ca, n_ca = phi_m, phi_n

        if self.spatial_m is not None:
            beta_m, beta_n = dueling_softmax(self.spatial_m(m_ca), self.spatial_n(n_ca))
            m_sa = m_ca * beta_m
            n_sa = (m_ca if self.literal_eq12 else n_ca) * beta_n
            weights["spatial"] = (beta_m, beta_n)
        else:
            m_sa, n_sa = m_ca, n_ca

        fused = torch.cat([m_sa, n_sa], dim=1)
        if return_weights:
            return fused, weights
        return fused

    def swapped(self) -> "InteractiveAttention":
        """Copy with the two paths' gate parameters exchanged."""
        other = copy.deepcopy(self)
        other.channel_m, other.channel_n = other.channel_n, other.channel_m
        other.spatial_m, other.spatial_n = other.spatial_n, other.spatial_m
        return other


class CompensatoryAttention(nn.Module):
    """Single-input channel-then-spatial gating with raw sigmoid scores; shape preserving."""

    def __init__(
        self,
        channels: int,
        reduction: int = 4,
        spatial_kernel: int = 7,
        use_channel: bool = True,
        use_spatial: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.channel = ChannelGate(channels, reduction) if use_channel else None
        self.spatial = SpatialGate(spatial_kernel) if use_spatial else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_map(x, self.channels)
        if self.channel is not None:
            x = x * self.channel(x)
        if self.spatial is not None:
            x = x * self.spatial(x)
        return x


def interactive_attention(phi_m, phi_n, module: InteractiveAttention):
    return module(phi_m, phi_n)


def compensatory_attention(phi, module: CompensatoryAttention):
    return module(phi)
