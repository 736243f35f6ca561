"""3D extension of the 2D trunk: batch-folded levels plus vertical attention.

The trunk's 2D blocks run with the vertical dimension hidden in the batch;
after every attention stage the tokens are unfolded and a vertical block
attends along levels only (lat/lon folded into the batch), so no new
operation ever mixes horizontal positions. Level position enters through a
learned embedding of the sigma coordinate, which extends to levels never
seen in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ContractError
from .model2d import Mlp, SwinUNet, TrunkConfig, _init_weights

__all__ = [
    "LiftConfig",
    "SigmaEmbedding",
    "VerticalBlock",
    "LiftedModel",
    "batch_fold",
    "batch_unfold",
    "sample_adjacent_levels",
    "build_lifted",
    "zero_vertical_projections",
]


@dataclass(frozen=True)
class LiftConfig:
    """Vertical-lift hyperparameters."""

    n_heads: int = 4
    sigma_hidden: int = 32
    levels_total: int = 6
    levels_sampled: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.levels_sampled <= self.levels_total:
            raise ConfigurationError(
                f"need 1 <= levels_sampled <= levels_total, got "
                f"{self.levels_sampled} / {self.levels_total}"
            )
        if self.n_heads < 1 or self.sigma_hidden < 1:
            raise ConfigurationError("n_heads and sigma_hidden must be >= 1")


def batch_fold(x: Tensor) -> Tensor:
    """[B, D, H, W, C] -> [B*D, H, W, C], level index fastest."""
    b, d, h, w, c = x.shape
    return x.reshape(b * d, h, w, c)


def batch_unfold(x: Tensor, n_levels: int) -> Tensor:
    """Inverse of batch_fold; the leading dim must be divisible by D."""
    bd = x.shape[0]
    if bd % n_levels:
        raise ContractError(f"folded batch {bd} not divisible by {n_levels} levels")
    return x.reshape(bd // n_levels, n_levels, *x.shape[1:])


class SigmaEmbedding(nn.Module):
    """Two-layer GELU MLP from log(sigma) to a stage-dim vector."""

    def __init__(self, hidden: int, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, sigmas: Tensor) -> Tensor:
        if (sigmas <= 0).any():
            raise ContractError("sigma coordinates must be positive")
        if (sigmas > 1).any():
            raise ContractError("sigma coordinates must be <= 1")
        x = torch.log(sigmas.reshape(-1, 1))
        return self.fc2(F.gelu(self.fc1(x)))


class VerticalBlock(nn.Module):
    """Full self-attention along the level axis at one token position.

    Queries and keys see the sigma embedding added to their inputs; values
    do not, so level geometry steers where to look, not what is copied.
    """

    def __init__(self, dim: int, n_heads: int, sigma_hidden: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % n_heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.sigma_embed = SigmaEmbedding(sigma_hidden, dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: Tensor, sigmas: Tensor) -> Tensor:
        b, d, h, w, c = x.shape
        if sigmas.numel() != d:
            raise ContractError(f"{sigmas.numel()} sigmas for {d} levels")
        tokens = x.permute(0, 2, 3, 1, 4).reshape(b * h * w, d, c)
        emb = self.sigma_embed(sigmas.to(x.dtype)).to(x.dtype)
        qk_in = tokens + emb[None, :, :]

        def heads(t: Tensor) -> Tensor:
            return t.view(-1, d, self.n_heads, c // self.n_heads).transpose(1, 2)

        q = heads(self.q(qk_in))
        k = heads(self.k(qk_in))
        v = heads(self.v(tokens))
        attn = (q @ k.transpose(-2, -1)) * (c // self.n_heads) ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, d, c)
        tokens = tokens + self.norm1(self.proj(out))
        tokens = tokens + self.norm2(self.mlp(tokens))
        return tokens.view(b, h, w, d, c).permute(0, 3, 1, 2, 4)


class LiftedModel(nn.Module):
    """2D trunk applied per level plus one vertical block per stage.

    The new parameters live under the ``lift`` sub-tree; the trunk keeps its
    own names so pretrained 2D weights load unchanged. ConvNeXt skip blocks
    are not touched by the lift.
    """

    def __init__(self, trunk: SwinUNet, config: LiftConfig):
        super().__init__()
        self.trunk = trunk
        self.config = config
        self.lift = nn.ModuleList(
            [
                VerticalBlock(dim, config.n_heads, config.sigma_hidden, trunk.config.mlp_ratio)
                for dim in trunk.stage_dims()
            ]
        )
        self.lift.apply(_init_weights)

    def forward(self, x: Tensor, sigmas: Tensor) -> Tensor:
        if x.ndim != 5:
            raise ContractError(f"expected [batch, level, h, w, channel], got {tuple(x.shape)}")
        b, d = x.shape[0], x.shape[1]
        if not torch.is_tensor(sigmas):
            sigmas = torch.as_tensor(np.asarray(sigmas, dtype=np.float64))
        if sigmas.numel() != d:
            raise ContractError(f"{sigmas.numel()} sigmas for {d} levels")

        def hook(stage: int, tokens: Tensor) -> Tensor:
            unfolded = batch_unfold(tokens, d)
            lifted = self.lift[stage](unfolded, sigmas)
            return batch_fold(lifted)

        out = self.trunk(batch_fold(x), stage_hook=hook)
        return batch_unfold(out, d)


def sample_adjacent_levels(n_levels: int, k: int, seed: int) -> tuple[int, slice]:
    """Uniform contiguous window of k levels: start in {0, ..., D-k}."""
    if not 1 <= k <= n_levels:
        raise ContractError(f"need 1 <= k <= D, got k={k}, D={n_levels}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, n_levels - k + 1))
    return start, slice(start, start + k)


def build_lifted(trunk_config: TrunkConfig, lift_config: LiftConfig, seed: int = 0) -> LiftedModel:
    """Deterministically initialized lifted model (trunk then lift)."""
    torch.manual_seed(seed)
    trunk = SwinUNet(trunk_config)
    return LiftedModel(trunk, lift_config)


def zero_vertical_projections(model: LiftedModel) -> None:
    """Diagnostic mode: zero each vertical block's output projections.

    With the attention projection and MLP contraction zeroed every vertical
    block is the identity, so the lifted model reproduces the per-level 2D
    trunk exactly. Training uses random init; this exists for equivalence
    tests.
    """
    with torch.no_grad():
        for blk in model.lift:
            blk.proj.weight.zero_()
            blk.proj.bias.zero_()
            blk.mlp.fc2.weight.zero_()
            blk.mlp.fc2.bias.zero_()
