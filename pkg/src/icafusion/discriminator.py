"""Wasserstein critics scoring fused images against one source modality."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class CriticSpec:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    stride: int = 2
    leaky_slope: float = 0.2
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.widths) != 4:
            raise ConfigError(f"critic needs exactly 4 conv widths, got {self.widths}")
        if min(self.input_size) < 16:
            raise ConfigError(f"critic input must be at least 16x16, got {self.input_size}")

    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        pad = self.kernel_size // 2
        for _ in range(4):
            h = (h + 2 * pad - self.kernel_size) // self.stride + 1
            w = (w + 2 * pad - self.kernel_size) // self.stride + 1
        return h, w

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CriticSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown critic keys: {sorted(unknown)}")
        return cls(**d)


class Critic(nn.Module):
    """Four strided 3x3 convs with LeakyReLU, then a linear layer to one unbounded score.

    No normalisation layers: the gradient penalty needs per-sample input gradients.
    """

    def __init__(self, spec: CriticSpec | None = None):
        super().__init__()
        self.spec = spec = spec or CriticSpec()
        chans = (1,) + spec.widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], spec.kernel_size, stride=spec.stride, padding=spec.kernel_size // 2)
            for i in range(4)
        )
        fh, fw = spec.feature_size()
        self.fc = nn.Linear(spec.widths[-1] * fh * fw, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Scores of shape ``(B,)``."""
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != self.spec.input_size:
            raise DimensionError(
                f"critic built for (B, 1, {self.spec.input_size[0]}, {self.spec.input_size[1]}) input, "
                f"got {tuple(x.shape)}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.spec.leaky_slope)
        return self.fc(x.flatten(1)).squeeze(1)


def critic_score(image: torch.Tensor, critic: Critic) -> torch.Tensor:
    return critic(image)
