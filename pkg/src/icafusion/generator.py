"""Triple-path encoder, fusion layer and decoder of the fusion generator."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CompensatoryAttention, InteractiveAttention
from .errors import ConfigError, DimensionError

VARIANTS = (
    "full",
    "no_attention",
    "only_interact",
    "only_vis_com",
    "only_ir_com",
    "only_channel",
    "only_spatial",
)

# Row labels of the ablation table, in presentation order.
VARIANT_LABELS = {
    "no_attention": "No_Attention",
    "only_interact": "Only_interact",
    "only_vis_com": "Only_VIS_Com",
    "only_ir_com": "Only_IR_Com",
    "only_channel": "Only_Channel",
    "only_spatial": "Only_Spatial",
    "full": "Ours",
}


@dataclass(frozen=True)
class GeneratorSpec:
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    encoder_strides: tuple[int, ...] = (1, 1, 2, 2)
    # Widths of decoder layers d1..d3; d4 always emits one channel through tanh.
    decoder_widths: tuple[int, ...] = (128, 64, 32)
    kernel_size: int = 3
    variant: str = "full"
    interactive: bool = True
    ir_comp: bool = True
    vis_comp: bool = True
    use_channel: bool = True
    use_spatial: bool = True
    reduction: int = 4
    spatial_kernel: int = 7
    literal_eq12: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "encoder_strides", tuple(int(s) for s in self.encoder_strides))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if len(self.encoder_widths) != 4:
            raise ConfigError(f"need exactly 4 encoder widths, got {self.encoder_widths}")
        if self.encoder_strides != (1, 1, 2, 2):
            raise ConfigError(f"encoder strides must be (1, 1, 2, 2), got {self.encoder_strides}")
        if len(self.decoder_widths) != 3:
            raise ConfigError(f"need exactly 3 hidden decoder widths, got {self.decoder_widths}")
        if min(self.encoder_widths + self.decoder_widths) < 1:
            raise ConfigError("layer widths must be positive")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    @classmethod
    def with_widths(cls, widths, **kwargs) -> "GeneratorSpec":
        """Spec whose decoder mirrors the given encoder widths."""
        widths = tuple(widths)
        return cls(encoder_widths=widths, decoder_widths=tuple(reversed(widths))[:3], **kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


_VARIANT_FLAGS = {
    "full": dict(interactive=True, ir_comp=True, vis_comp=True, use_channel=True, use_spatial=True),
    "no_attention": dict(interactive=False, ir_comp=False, vis_comp=False, use_channel=True, use_spatial=True),
    "only_interact": dict(interactive=True, ir_comp=False, vis_comp=False, use_channel=True, use_spatial=True),
    "only_vis_com": dict(interactive=True, ir_comp=False, vis_comp=True, use_channel=True, use_spatial=True),
    "only_ir_com": dict(interactive=True, ir_comp=True, vis_comp=False, use_channel=True, use_spatial=True),
    "only_channel": dict(interactive=True, ir_comp=True, vis_comp=True, use_channel=True, use_spatial=False),
    "only_spatial": dict(interactive=True, ir_comp=True, vis_comp=True, use_channel=False, use_spatial=True),
}


def build_variant(name: str, spec: GeneratorSpec | None = None) -> GeneratorSpec:
    """Return ``spec`` with the attention stages of ablation variant ``name``."""
    if name not in _VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    spec = spec or GeneratorSpec()
    return dataclasses.replace(spec, variant=name, **_VARIANT_FLAGS[name])


@dataclass
class EncoderState:
    """Per-level encoder features; index 0 is level 1."""

    ir: list = field(default_factory=list)
    vis: list = field(default_factory=list)
    cat: list = field(default_factory=list)
    interactive: list = field(default_factory=list)


def _conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.PReLU(init=0.25))


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec | None = None):
        super().__init__()
        self.spec = spec = spec or GeneratorSpec()
        w, s, k = spec.encoder_widths, spec.encoder_strides, spec.kernel_size

        self.ir_convs = nn.ModuleList(_conv(1 if i == 0 else w[i - 1], w[i], k, s[i]) for i in range(4))
        self.vis_convs = nn.ModuleList(_conv(1 if i == 0 else w[i - 1], w[i], k, s[i]) for i in range(4))
        # The concatenating path consumes the interactive output (4 * w) of the previous level.
        self.cat_convs = nn.ModuleList(_conv(2 if i == 0 else 4 * w[i - 1], w[i], k, s[i]) for i in range(4))

        attn = dict(reduction=spec.reduction, spatial_kernel=spec.spatial_kernel,
                    use_channel=spec.use_channel, use_spatial=spec.use_spatial)
        if spec.interactive:
            self.interact = nn.ModuleList(
                InteractiveAttention(2 * w[i], literal_eq12=spec.literal_eq12, **attn) for i in range(3)
            )
        else:
            self.interact = None
        # Compensation at levels 4 (fusion layer), 3 and 2 (decoder skips); unshared.
        self.comp_ir = nn.ModuleDict({str(l): CompensatoryAttention(w[l - 1], **attn) for l in (4, 3, 2)}) \
            if spec.ir_comp else None
        self.comp_vis = nn.ModuleDict({str(l): CompensatoryAttention(w[l - 1], **attn) for l in (4, 3, 2)}) \
            if spec.vis_comp else None

        d = spec.decoder_widths
        self.dec1 = _conv(3 * w[3], d[0], k)
        self.dec2 = _conv(d[0] + 2 * w[2], d[1], k)
        self.dec3 = _conv(d[1] + 2 * w[1], d[2], k)
        self.dec4 = nn.Conv2d(d[2], 1, k, padding=k // 2)

    def _compensate(self, level: int, state: EncoderState) -> tuple[torch.Tensor, torch.Tensor]:
        ir, vis = state.ir[level - 1], state.vis[level - 1]
        if self.comp_ir is not None:
            ir = self.comp_ir[str(level)](ir)
        if self.comp_vis is not None:
            vis = self.comp_vis[str(level)](vis)
        return ir, vis

    def encode(self, ir: torch.Tensor, vis: torch.Tensor) -> EncoderState:
        if ir.dim() != 4 or ir.shape[1] != 1 or ir.shape != vis.shape:
            raise DimensionError(
                f"expected two single-channel (B, 1, H, W) batches of equal shape, "
                f"got {tuple(ir.shape)} and {tuple(vis.shape)}"
            )
        h, w = ir.shape[-2:]
        if h % 4 or w % 4:
            raise DimensionError(f"encoder input {h}x{w} is not divisible by 4; use forward() to pad")
        state = EncoderState()
        x_ir, x_vis, x_cat = ir, vis, torch.cat([ir, vis], dim=1)
        for level in range(4):
            x_ir = self.ir_convs[level](x_ir)
            x_vis = self.vis_convs[level](x_vis)
            f_cat = self.cat_convs[level](x_cat)
            state.ir.append(x_ir)
            state.vis.append(x_vis)
            state.cat.append(f_cat)
            if level < 3:
                phi_m = torch.cat([x_ir, f_cat], dim=1)
                phi_n = torch.cat([x_vis, f_cat], dim=1)
                if self.interact is not None:
                    x_cat = self.interact[level](phi_m, phi_n)
                else:
                    x_cat = torch.cat([phi_m, phi_n], dim=1)
                state.interactive.append(x_cat)
        return state

    def fuse_layer(self, state: EncoderState) -> torch.Tensor:
        if len(state.cat) != 4:
            raise DimensionError("encoder state is incomplete; level 4 features are missing")
        ir, vis = self._compensate(4, state)
        return torch.cat([state.cat[3], ir, vis], dim=1)

    def decode(self, fused: torch.Tensor, state: EncoderState) -> torch.Tensor:
        x = F.interpolate(self.dec1(fused), scale_factor=2, mode="nearest")
        ir, vis = self._compensate(3, state)
        if x.shape[-2:] != ir.shape[-2:]:
            raise DimensionError(f"decoder map {tuple(x.shape)} does not match level-3 skips {tuple(ir.shape)}")
        x = torch.cat([x, ir, vis], dim=1)
        x = F.interpolate(self.dec2(x), scale_factor=2, mode="nearest")
        ir, vis = self._compensate(2, state)
        if x.shape[-2:] != ir.shape[-2:]:
            raise DimensionError(f"decoder map {tuple(x.shape)} does not match level-2 skips {tuple(ir.shape)}")
        x = torch.cat([x, ir, vis], dim=1)
        x = self.dec3(x)
        return torch.tanh(self.dec4(x))

    def forward(self, ir: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        """Fuse a batch; sizes not divisible by 4 are reflect-padded and cropped back."""
        if ir.dim() != 4 or ir.shape != vis.shape:
            raise DimensionError(f"ir {tuple(ir.shape)} and vis {tuple(vis.shape)} must be equal (B, 1, H, W)")
        h, w = ir.shape[-2:]
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            ir = F.pad(ir, (0, pw, 0, ph), mode=mode)
            vis = F.pad(vis, (0, pw, 0, ph), mode=mode)
        state = self.encode(ir, vis)
        out = self.decode(self.fuse_layer(state), state)
        return out[..., :h, :w]


def parameter_count(spec: GeneratorSpec) -> int:
    with torch.device("meta"):
        net = Generator(spec)
    return sum(p.numel() for p in net.parameters())
