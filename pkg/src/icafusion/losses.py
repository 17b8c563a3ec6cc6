"""Generator and critic objectives.

Images are ``(B, 1, H, W)`` tensors in [-1, 1].  Critics are any callable
mapping such a batch to ``(B,)`` scores, which lets tests plug in analytic
critics.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericalError

CSV_COLUMNS = ("step", "l_g", "l_content", "l_adv", "l_d_ir", "l_d_vis", "gp_ir", "gp_vis")

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 10.0
    gp_point: str = "interpolate"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.lam}")
        if self.gp_point not in ("interpolate", "real"):
            raise ConfigError(f"gp_point must be 'interpolate' or 'real', got {self.gp_point!r}")


@dataclass
class LossBreakdown:
    l_content: float
    l_adv: float
    l_g: float
    l_d_ir: float
    l_d_vis: float
    gp_ir: float
    gp_vis: float

    def row(self, step: int) -> list[str]:
        # repr keeps the CSV bit-exact across reruns.
        return [str(step)] + [repr(float(getattr(self, c))) for c in CSV_COLUMNS[1:]]

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.tensor(v)) for v in self.to_dict().values())


def _as_batch(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 4 and img.shape[1] == 1:
        return img
    raise DimensionError(f"expected (H, W) or (B, 1, H, W) image, got {tuple(img.shape)}")


def image_gradient(img: torch.Tensor, mode: str = "forward") -> torch.Tensor:
    """Horizontal and vertical derivatives stacked as ``(B, 2, H, W)``.

    ``forward`` uses forward differences with zeros on the trailing row/column;
    ``sobel`` uses 3x3 Sobel responses with replicated borders.
    """
    x = _as_batch(img)
    if mode == "forward":
        dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
        dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
        return torch.cat([dx, dy], dim=1)
    if mode == "sobel":
        kx = _SOBEL_X.to(x)
        kernel = torch.stack([kx, kx.t()])[:, None]
        return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel)
    raise ConfigError(f"unknown gradient operator {mode!r}")


def content_loss(
    fused: torch.Tensor,
    ir: torch.Tensor,
    vis: torch.Tensor,
    intensity_weight: float = 1.0,
    gradient_weight: float = 1.0,
    gradient: str = "forward",
) -> torch.Tensor:
    """Squared intensity error to IR plus L1 gradient error to VIS, per pixel, batch mean."""
    fused, ir, vis = _as_batch(fused), _as_batch(ir), _as_batch(vis)
    if not fused.shape == ir.shape == vis.shape:
        raise DimensionError(
            f"content loss needs equal shapes, got {tuple(fused.shape)}, {tuple(ir.shape)}, {tuple(vis.shape)}"
        )
    hw = fused.shape[-1] * fused.shape[-2]
    intensity = (fused - ir).pow(2).sum(dim=(1, 2, 3))
    grad = (image_gradient(fused, gradient) - image_gradient(vis, gradient)).abs().sum(dim=(1, 2, 3))
    return ((intensity_weight * intensity + gradient_weight * grad) / hw).mean()


def generator_adversarial_loss(scores_ir: torch.Tensor, scores_vis: torch.Tensor) -> torch.Tensor:
    if scores_ir.numel() == 0 or scores_vis.numel() == 0:
        raise ValueError("adversarial loss of an empty batch is undefined")
    if scores_ir.shape != scores_vis.shape:
        raise DimensionError(f"score batches differ: {tuple(scores_ir.shape)} vs {tuple(scores_vis.shape)}")
    return -scores_ir.mean() - scores_vis.mean()


def penalty_points(
    fused: torch.Tensor, real: torch.Tensor, cfg: PenaltyConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Inputs at which the critic's gradient norm is penalised."""
    if cfg.gp_point == "real":
        return real
    eps = torch.rand((real.shape[0], 1, 1, 1), generator=generator, dtype=real.dtype, device=real.device)
    return eps * real + (1 - eps) * fused


def gradient_penalty(critic, points: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``(1 - ||d critic / d x||_2)^2``; differentiable w.r.t. critic parameters."""
    x = points.detach().requires_grad_(True)
    scores = critic(x)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    if not torch.isfinite(grad).all():
        raise NumericalError("critic input gradient is not finite")
    norms = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return (1 - norms).pow(2).mean()


def critic_loss(
    critic,
    fused: torch.Tensor,
    real: torch.Tensor,
    cfg: PenaltyConfig = PenaltyConfig(),
    generator: torch.Generator | None = None,
    return_penalty: bool = False,
):
    """``mean(D(fused) - D(real)) + lam * penalty``; minimising it ranks real above fused."""
    if fused.shape != real.shape:
        raise DimensionError(f"fused {tuple(fused.shape)} and real {tuple(real.shape)} batches differ")
    fused = fused.detach()
    gp = gradient_penalty(critic, penalty_points(fused, real, cfg, generator))
    loss = (critic(fused) - critic(real)).mean() + cfg.lam * gp
    if return_penalty:
        return loss, gp
    return loss
