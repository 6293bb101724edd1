"""Task-adaptive routing: instruction inference, spatial MoE routing, channel routing.

Tensors follow the torch convention (B, C, H, W). Spatial tokens are the
C-dimensional vectors at each pixel of a feature map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, NumericalError, RoutingInvariantError, ShapeError

INSTRUCTION_DIM = 256
MIN_INSTRUCTION_SIZE = 32


@dataclass
class Instruction:
    """Per-image routing instruction.

    ``vector`` is (B, 256). ``weights`` holds the (B, N) softmax mixing
    weights over the dictionary, or None when the dictionary is disabled.
    """

    vector: torch.Tensor
    weights: Optional[torch.Tensor] = None

    def detach(self) -> "Instruction":
        w = None if self.weights is None else self.weights.detach()
        return Instruction(self.vector.detach(), w)


@dataclass
class GateDecision:
    """Sparse expert weights for a set of tokens.

    weights: (T, M), exactly K nonzeros per row, exact zeros elsewhere.
    selected: (T, K) expert indices, ordered by decreasing weight.
    """

    weights: torch.Tensor
    selected: torch.Tensor

    @property
    def num_experts(self) -> int:
        return self.weights.shape[-1]

    @property
    def k(self) -> int:
        return self.selected.shape[-1]

    def top1(self) -> torch.Tensor:
        return self.selected[:, 0]


def mix_dictionary(logits: torch.Tensor, dictionary: torch.Tensor) -> Instruction:
    """Softmax the pooled encoder logits and mix dictionary entries with them."""
    if logits.shape[-1] != dictionary.shape[0]:
        raise ShapeError(
            f"pooled logits have {logits.shape[-1]} entries, dictionary has {dictionary.shape[0]}"
        )
    alpha = torch.softmax(logits, dim=-1)
    return Instruction(alpha @ dictionary, alpha)


class InstructionEncoder(nn.Module):
    """Five stride-2 3x3 conv stages ending in ``out_channels`` maps, then GAP."""

    def __init__(self, in_channels: int = 1, out_channels: int = 16,
                 widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        chans = [in_channels, *widths, out_channels]
        layers = []
        for i in range(len(chans) - 1):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            if i < len(chans) - 2:
                layers.append(nn.LeakyReLU(0.1))
        self.body = nn.Sequential(*layers)
        self.out_channels = out_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.body(image).mean(dim=(-2, -1))


class RoutingInstructionNetwork(nn.Module):
    """Infers an instruction from the input image.

    With ``use_dictionary`` the encoder emits N logits and the instruction is
    the softmax-weighted mixture of N learnable 256-d entries. Without it the
    encoder emits the 256-d instruction directly (the "w/o D" ablation).
    """

    def __init__(self, in_channels: int = 1, num_entries: int = 16,
                 use_dictionary: bool = True, init_std: float = 0.02):
        super().__init__()
        if num_entries < 1:
            raise ConfigError(f"dictionary size must be positive, got {num_entries}")
        self.use_dictionary = use_dictionary
        self.num_entries = num_entries
        out = num_entries if use_dictionary else INSTRUCTION_DIM
        self.encoder = InstructionEncoder(in_channels, out)
        if use_dictionary:
            self.dictionary = nn.Parameter(torch.randn(num_entries, INSTRUCTION_DIM) * init_std)
        else:
            self.register_parameter("dictionary", None)

    def forward(self, image: torch.Tensor) -> Instruction:
        if image.shape[-1] < MIN_INSTRUCTION_SIZE or image.shape[-2] < MIN_INSTRUCTION_SIZE:
            raise ShapeError(
                f"instruction encoder needs at least {MIN_INSTRUCTION_SIZE}x{MIN_INSTRUCTION_SIZE}, "
                f"got {tuple(image.shape[-2:])}"
            )
        pooled = self.encoder(image)
        if not torch.isfinite(pooled).all():
            raise NumericalError("non-finite activations in instruction encoder")
        if not self.use_dictionary:
            return Instruction(pooled, None)
        return mix_dictionary(pooled, self.dictionary)


def infer_instruction(image: torch.Tensor, rin: RoutingInstructionNetwork) -> Instruction:
    return rin(image)


def sparse_top_k(probs: torch.Tensor, k: int) -> GateDecision:
    """Keep the K largest probabilities per row and zero the rest.

    No renormalisation is applied, so kept weights may sum to less than one.
    Ties go to the lowest expert index (stable descending sort).
    """
    m = probs.shape[-1]
    if not 1 <= k <= m:
        raise ConfigError(f"top-k requires 1 <= K <= M, got K={k}, M={m}")
    order = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices
    selected = order[..., :k]
    kept = probs.gather(-1, selected)
    weights = torch.zeros_like(probs).scatter(-1, selected, kept)
    return GateDecision(weights, selected)


class ExpertMLP(nn.Module):
    def __init__(self, dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def combine_experts(tokens: torch.Tensor, decision: GateDecision,
                    experts: Sequence[nn.Module]) -> torch.Tensor:
    """Weighted sum of expert outputs; each expert only sees the tokens routed to it."""
    if len(experts) != decision.num_experts:
        raise ShapeError(f"{len(experts)} experts but gate covers {decision.num_experts}")
    out = None
    for e, expert in enumerate(experts):
        idx = (decision.selected == e).any(dim=-1).nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        y = expert(tokens.index_select(0, idx)) * decision.weights[idx, e].unsqueeze(-1)
        if out is None:
            out = tokens.new_zeros(tokens.shape[0], y.shape[-1])
        out = out.index_add(0, idx, y)
    if out is None:
        raise RoutingInvariantError("no token was routed to any expert")
    return out


class SpatialRouter(nn.Module):
    """Instruction-guided top-K mixture of token-wise MLP experts."""

    def __init__(self, dim: int, num_experts: int = 4, k: int = 2,
                 instruction_dim: int = INSTRUCTION_DIM, expert_hidden: Optional[int] = None):
        super().__init__()
        if not 1 <= k <= num_experts:
            raise ConfigError(f"K must satisfy 1 <= K <= M, got K={k}, M={num_experts}")
        self.dim = dim
        self.k = k
        self.instruction_proj = nn.Linear(instruction_dim, dim)
        self.gate_fc = nn.Linear(2 * dim, num_experts)
        self.experts = nn.ModuleList(ExpertMLP(dim, expert_hidden) for _ in range(num_experts))

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def gate(self, tokens: torch.Tensor, context: torch.Tensor) -> GateDecision:
        """tokens: (T, C'); context: projected instruction broadcast to (T, C')."""
        logits = self.gate_fc(torch.cat([tokens, context], dim=-1))
        return sparse_top_k(torch.softmax(logits, dim=-1), self.k)

    def forward(self, features: torch.Tensor, instruction: Instruction,
                decision: Optional[GateDecision] = None):
        """Route every spatial token. Returns (routed features, gate decision).

        Passing ``decision`` reuses a fixed expert selection and weights.
        """
        b, c, h, w = features.shape
        if c != self.dim:
            raise ShapeError(f"features have {c} channels, router expects {self.dim}")
        tokens = rearrange(features, "b c h w -> (b h w) c")
        if decision is None:
            context = self.instruction_proj(instruction.vector)
            context = context.repeat_interleave(h * w, dim=0)
            decision = self.gate(tokens, context)
        out = combine_experts(tokens, decision, self.experts)
        return rearrange(out, "(b h w) c -> b c h w", b=b, h=h, w=w), decision


def spatial_route(features: torch.Tensor, instruction: Instruction, router: SpatialRouter):
    return router(features, instruction)


class ChannelRouter(nn.Module):
    """Scales channels by a sigmoid mask predicted from the instruction."""

    def __init__(self, dim: int, instruction_dim: int = INSTRUCTION_DIM):
        super().__init__()
        self.dim = dim
        self.fc = nn.Linear(instruction_dim, dim)

    def mask(self, instruction: Instruction) -> torch.Tensor:
        return torch.sigmoid(self.fc(instruction.vector))

    def forward(self, features: torch.Tensor, instruction: Instruction) -> torch.Tensor:
        if features.shape[1] != self.dim:
            raise ShapeError(f"features have {features.shape[1]} channels, mask has {self.dim}")
        return features * self.mask(instruction)[:, :, None, None]


def channel_route(features: torch.Tensor, instruction: Instruction, router: ChannelRouter):
    return router(features, instruction)


def expert_importance(decisions: Union[GateDecision, Sequence[GateDecision]]) -> torch.Tensor:
    if isinstance(decisions, GateDecision):
        decisions = [decisions]
    if not decisions:
        raise ValueError("balance loss needs at least one gate decision")
    return sum(d.weights.sum(dim=0) for d in decisions)


def cv_squared(values: torch.Tensor) -> torch.Tensor:
    """Squared coefficient of variation with population variance."""
    mean = values.mean()
    if mean.item() == 0:
        raise RoutingInvariantError("expert importance is all zero")
    return values.var(unbiased=False) / mean.pow(2)


def balance_loss(decisions: Union[GateDecision, Sequence[GateDecision]]) -> torch.Tensor:
    """CV^2 of per-expert importance summed over all tokens of ``decisions``."""
    return cv_squared(expert_importance(decisions))
