"""Routed transformer UNet for all-in-one restoration.

The backbone is a 4-level encoder/bottleneck/decoder of channel-attention
transformer blocks. Spatial routers sit before encoder levels 1-3, channel
routers before the bottleneck and decoder levels 3-1. The network predicts
a residual that is added to the low-quality input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, NumericalError, ShapeError
from .routing import (
    ChannelRouter,
    GateDecision,
    Instruction,
    RoutingInstructionNetwork,
    SpatialRouter,
)

DOWNSAMPLE_FACTOR = 8


@dataclass
class AmirConfig:
    channels: int = 42
    blocks: Tuple[int, int, int, int] = (5, 7, 7, 9)
    refinement_blocks: int = 4
    heads: Tuple[int, int, int, int] = (1, 2, 4, 8)
    ffn_expansion: float = 2.66
    dictionary_size: int = 16
    num_experts: int = 4
    top_k: int = 2
    in_channels: int = 1
    use_srm: bool = True
    use_crm: bool = True
    use_dictionary: bool = True

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.heads = tuple(int(h) for h in self.heads)
        self.validate()

    def validate(self) -> None:
        def bad(key, value, constraint):
            raise ConfigError(f"model.{key}={value!r} violates {constraint}")

        if self.channels < 1:
            bad("channels", self.channels, "channels >= 1")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            bad("blocks", self.blocks, "four positive block counts")
        if self.refinement_blocks < 1:
            bad("refinement_blocks", self.refinement_blocks, "refinement_blocks >= 1")
        if len(self.heads) != 4 or min(self.heads) < 1:
            bad("heads", self.heads, "four positive head counts")
        for level, h in enumerate(self.heads):
            if (self.channels * 2 ** level) % h:
                bad("heads", self.heads, f"level-{level + 1} width {self.channels * 2 ** level} divisible by {h}")
        if self.ffn_expansion <= 0:
            bad("ffn_expansion", self.ffn_expansion, "ffn_expansion > 0")
        if self.dictionary_size < 1:
            bad("dictionary_size", self.dictionary_size, "dictionary_size >= 1")
        if self.num_experts < 1:
            bad("num_experts", self.num_experts, "num_experts >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            bad("top_k", self.top_k, f"1 <= K <= M (M={self.num_experts})")

    @property
    def routing_enabled(self) -> bool:
        return self.use_srm or self.use_crm

    def level_widths(self) -> List[int]:
        return [self.channels * 2 ** i for i in range(4)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AmirConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class LayerNorm(nn.Module):
    """LayerNorm over the channel dimension of a (B, C, H, W) map."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        h, w = x.shape[-2:]
        x = rearrange(x, "b c h w -> b (h w) c")
        mu = x.mean(-1, keepdim=True)
        var = x.var(-1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + 1e-5) * self.weight + self.bias
        return rearrange(x, "b (h w) c -> b c h w", h=h, w=w)


class ChannelAttention(nn.Module):
    """Multi-head transposed attention: the attention map is C'xC' per head."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3, bias=False)
        self.project_out = nn.Conv2d(dim, dim, 1, bias=False)

    def forward(self, x):
        _, _, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (rearrange(t, "b (n c) h w -> b n c (h w)", n=self.heads) for t in (q, k, v))
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)
        out = rearrange(attn @ v, "b n c (h w) -> b (n c) h w", h=h, w=w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, expansion: float):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _stack(n: int, dim: int, heads: int, expansion: float) -> nn.Sequential:
    return nn.Sequential(*(TransformerBlock(dim, heads, expansion) for _ in range(n)))


class Downsample(nn.Module):
    """(H, W, C) -> (H/2, W/2, 2C): conv to C/2 then pixel-unshuffle."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"downsample needs an even channel count, got {dim}")
        self.body = nn.Sequential(nn.Conv2d(dim, dim // 2, 3, padding=1, bias=False),
                                  nn.PixelUnshuffle(2))

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"downsample needs even spatial size, got {tuple(x.shape[-2:])}")
        return self.body(x)


class Upsample(nn.Module):
    """(H, W, C) -> (2H, 2W, C/2): conv to 2C then pixel-shuffle."""

    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim, dim * 2, 3, padding=1, bias=False),
                                  nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


class SpatialRoutingModule(nn.Module):
    """Residual wrapper: x + routed(x)."""

    def __init__(self, dim: int, num_experts: int, k: int):
        super().__init__()
        self.router = SpatialRouter(dim, num_experts, k)

    def forward(self, x, instruction):
        routed, decision = self.router(x, instruction)
        return x + routed, decision


class RoutingTrace(NamedTuple):
    instruction: Optional[Instruction]
    decisions: List[GateDecision]


class AmirModel(nn.Module):
    def __init__(self, config: Optional[AmirConfig] = None, check_finite: bool = False):
        super().__init__()
        cfg = config or AmirConfig()
        self.config = cfg
        self.check_finite = check_finite
        c1, c2, c3, c4 = cfg.level_widths()
        h1, h2, h3, h4 = cfg.heads
        n1, n2, n3, n4 = cfg.blocks
        ex = cfg.ffn_expansion

        self.patch_embed = nn.Conv2d(cfg.in_channels, c1, 3, padding=1, bias=False)
        if cfg.routing_enabled:
            self.rin = RoutingInstructionNetwork(cfg.in_channels, cfg.dictionary_size,
                                                 use_dictionary=cfg.use_dictionary)
        else:
            self.rin = None

        def srm(dim):
            return SpatialRoutingModule(dim, cfg.num_experts, cfg.top_k) if cfg.use_srm else None

        def crm(dim):
            return ChannelRouter(dim) if cfg.use_crm else None

        self.srm1, self.srm2, self.srm3 = srm(c1), srm(c2), srm(c3)
        self.crm_latent, self.crm_dec3, self.crm_dec2, self.crm_dec1 = crm(c4), crm(c3), crm(c2), crm(c1)

        self.encoder1 = _stack(n1, c1, h1, ex)
        self.down1 = Downsample(c1)
        self.encoder2 = _stack(n2, c2, h2, ex)
        self.down2 = Downsample(c2)
        self.encoder3 = _stack(n3, c3, h3, ex)
        self.down3 = Downsample(c3)
        self.latent = _stack(n4, c4, h4, ex)

        self.up3 = Upsample(c4)
        self.reduce3 = nn.Conv2d(2 * c3, c3, 1, bias=False)
        self.decoder3 = _stack(n3, c3, h3, ex)
        self.up2 = Upsample(c3)
        self.reduce2 = nn.Conv2d(2 * c2, c2, 1, bias=False)
        self.decoder2 = _stack(n2, c2, h2, ex)
        self.up1 = Upsample(c2)
        self.reduce1 = nn.Conv2d(2 * c1, c1, 1, bias=False)
        self.decoder1 = _stack(n1, c1, h1, ex)
        self.refinement = _stack(cfg.refinement_blocks, c1, h1, ex)
        self.output = nn.Conv2d(c1, cfg.in_channels, 3, padding=1, bias=False)

    # -- introspection -----------------------------------------------------

    def spatial_routers(self) -> List[SpatialRouter]:
        return [m.router for m in (self.srm1, self.srm2, self.srm3) if m is not None]

    def routing_topology(self) -> List[Tuple[str, str]]:
        """Ordered (position, module kind) pairs for every routing module."""
        slots = [
            ("encoder1", "SRM", self.srm1), ("encoder2", "SRM", self.srm2),
            ("encoder3", "SRM", self.srm3), ("latent", "CRM", self.crm_latent),
            ("decoder3", "CRM", self.crm_dec3), ("decoder2", "CRM", self.crm_dec2),
            ("decoder1", "CRM", self.crm_dec1),
        ]
        return [(pos, kind) for pos, kind, mod in slots if mod is not None]

    def transformer_blocks(self) -> List[Tuple[str, TransformerBlock]]:
        """All transformer blocks in forward order, with qualified names."""
        out = []
        for stage in ("encoder1", "encoder2", "encoder3", "latent",
                      "decoder3", "decoder2", "decoder1", "refinement"):
            for i, blk in enumerate(getattr(self, stage)):
                out.append((f"{stage}.{i}", blk))
        return out

    def block_parameters(self, block: str) -> List[nn.Parameter]:
        """Parameters of a named block: 'second', 'last', or a qualified name like 'latent.0'."""
        blocks = self.transformer_blocks()
        if block == "second":
            mod = blocks[1][1]
        elif block == "last":
            mod = blocks[-1][1]
        else:
            named = dict(blocks)
            if block in named:
                mod = named[block]
            else:
                try:
                    mod = self.get_submodule(block)
                except AttributeError:
                    raise ConfigError(f"unknown block id {block!r}") from None
        return [p for p in mod.parameters() if p.requires_grad]

    # -- forward -----------------------------------------------------------

    def _check(self, x, where):
        if self.check_finite and not torch.isfinite(x).all():
            raise NumericalError(f"non-finite activations after {where}")
        return x

    def instruction(self, image: torch.Tensor) -> Optional[Instruction]:
        return None if self.rin is None else self.rin(image)

    def forward_with_routing(self, image: torch.Tensor,
                             instruction: Optional[Instruction] = None):
        """Run the network; returns (restored image, RoutingTrace)."""
        h, w = image.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ShapeError(f"forward needs H, W divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}; "
                             "use restore_image for arbitrary sizes")
        if instruction is None and self.rin is not None:
            instruction = self.rin(image)
        decisions: List[GateDecision] = []

        def route_spatial(mod, x):
            if mod is None:
                return x
            x, dec = mod(x, instruction)
            decisions.append(dec)
            return x

        def route_channel(mod, x):
            return x if mod is None else mod(x, instruction)

        x = self.patch_embed(image)
        enc1 = self._check(self.encoder1(route_spatial(self.srm1, x)), "encoder1")
        enc2 = self._check(self.encoder2(route_spatial(self.srm2, self.down1(enc1))), "encoder2")
        enc3 = self._check(self.encoder3(route_spatial(self.srm3, self.down2(enc2))), "encoder3")
        lat = self._check(self.latent(route_channel(self.crm_latent, self.down3(enc3))), "latent")

        x = self.reduce3(torch.cat([self.up3(lat), enc3], dim=1))
        x = self._check(self.decoder3(route_channel(self.crm_dec3, x)), "decoder3")
        x = self.reduce2(torch.cat([self.up2(x), enc2], dim=1))
        x = self._check(self.decoder2(route_channel(self.crm_dec2, x)), "decoder2")
        x = self.reduce1(torch.cat([self.up1(x), enc1], dim=1))
        x = self._check(self.decoder1(route_channel(self.crm_dec1, x)), "decoder1")
        x = self._check(self.refinement(x), "refinement")
        return self.output(x) + image, RoutingTrace(instruction, decisions)

    def forward(self, image: torch.Tensor, instruction: Optional[Instruction] = None) -> torch.Tensor:
        return self.forward_with_routing(image, instruction)[0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def pad_to_multiple(image: torch.Tensor, multiple: int = DOWNSAMPLE_FACTOR):
    """Reflect-pad bottom/right so H and W are multiples of ``multiple``."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph), mode="reflect")
    return image, (h, w)


def restore_image(model: AmirModel, image: torch.Tensor) -> torch.Tensor:
    """Restore an image of any size >= 32x32.

    Accepts (H, W), (C, H, W) or (B, C, H, W) and returns the same shape.
    """
    shape = image.shape
    if image.dim() < 2 or min(shape[-2:]) < 32:
        raise ShapeError(f"restore_image needs H, W >= 32, got {tuple(shape)}")
    x = image.reshape(-1, model.config.in_channels, *shape[-2:])
    padded, (h, w) = pad_to_multiple(x)
    out = model(padded)[..., :h, :w]
    return out.reshape(shape)


def matched_backbone(config: AmirConfig, tolerance: float = 0.02) -> AmirConfig:
    """Routing-disabled config whose parameter count is within ``tolerance`` of ``config``'s.

    Picks the even channel width whose plain backbone comes closest to the
    routed model's budget, then bisects the FFN expansion to close the
    remaining gap (even widths alone move the count in steps of ~20%).
    """
    target = count_parameters(AmirModel(config))
    base = replace(config, use_srm=False, use_crm=False)

    def size(**kw):
        return count_parameters(AmirModel(replace(base, **kw)))

    widths = [c for c in range(2, 8 * config.channels + 1, 2)
              if all((c * 2 ** i) % h == 0 for i, h in enumerate(config.heads))]
    channels = min(widths, key=lambda c: abs(size(channels=c) - target))
    lo, hi = 0.5, 2 * config.ffn_expansion + 2
    best = replace(base, channels=channels)
    for _ in range(40):
        mid = (lo + hi) / 2
        n = size(channels=channels, ffn_expansion=mid)
        if abs(n - target) < abs(count_parameters(AmirModel(best)) - target):
            best = replace(base, channels=channels, ffn_expansion=mid)
        if n < target:
            lo = mid
        else:
            hi = mid
    if abs(count_parameters(AmirModel(best)) / target - 1) > tolerance:
        raise ConfigError(f"no routing-free backbone within {tolerance:.0%} of {target} parameters")
    return best
