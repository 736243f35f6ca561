"""2D trunk: windowed-attention U-Net over 4-channel fields.

Patch embedding, shifted-window scaled-cosine attention with a learned
relative-position bias, ConvNeXt blocks on the skip connections, patch
merging/expanding between stages, and a linear recovery head. The model
maps a scaled state to the predicted state one fixed timestep ahead.

Tokens flow channels-last as [batch, height, width, dim].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ContractError

__all__ = [
    "TrunkConfig",
    "PatchEmbed",
    "WindowAttention",
    "SwinBlock",
    "ConvNeXtBlock",
    "PatchMerging",
    "PatchExpanding",
    "RecoveryHead",
    "SwinUNet",
    "build_trunk",
    "count_params",
    "subtree_param_counts",
    "zero_residual_branches",
]

IN_CHANNELS = 4
OUT_CHANNELS = 4
MAX_LOGIT_SCALE = math.log(1.0 / 0.01)  # per-head temperature clamped at 1/0.01


@dataclass(frozen=True)
class TrunkConfig:
    """Architecture hyperparameters for the 2D trunk."""

    img_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    embed_dim: int = 32
    n_stages: int = 2
    n_heads: int = 4
    window_size: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.n_stages < 1 or self.window_size < 1:
            raise ConfigurationError("patch_size, n_stages and window_size must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        mult = self.required_multiple
        h, w = self.img_size
        if h % mult or w % mult:
            raise ConfigurationError(
                f"input pixels {self.img_size} must be multiples of {mult} "
                f"(patch {self.patch_size} x 2^{self.n_stages - 1} downsampling)"
            )

    @property
    def required_multiple(self) -> int:
        return self.patch_size * 2 ** (self.n_stages - 1)

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.img_size[0] // self.patch_size, self.img_size[1] // self.patch_size)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2**stage

    def stage_resolution(self, stage: int) -> tuple[int, int]:
        th, tw = self.token_grid
        return (th // 2**stage, tw // 2**stage)

    def stage_window(self, stage: int) -> tuple[int, int]:
        """Effective window: the configured size, else one full-grid window."""
        th, tw = self.stage_resolution(stage)
        ws = self.window_size
        if ws <= min(th, tw) and th % ws == 0 and tw % ws == 0:
            return (ws, ws)
        return (th, tw)


def _window_partition(x: Tensor, wh: int, ww: int) -> Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def _window_merge(windows: Tensor, wh: int, ww: int, h: int, w: int) -> Tensor:
    b = windows.shape[0] // ((h // wh) * (w // ww))
    x = windows.view(b, h // wh, w // ww, wh, ww, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class PatchEmbed(nn.Module):
    """Non-overlapping patches, layer-normalized then linearly projected."""

    def __init__(self, patch_size: int, in_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.norm = nn.LayerNorm(patch_size * patch_size * in_channels)
        self.proj = nn.Linear(patch_size * patch_size * in_channels, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ConfigurationError(f"pixels ({h}, {w}) must be multiples of patch {p}")
        x = x.view(b, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // p, w // p, p * p * c)
        return self.proj(self.norm(x))


class WindowAttention(nn.Module):
    """Scaled-cosine window attention with learned relative-position bias."""

    def __init__(self, dim: int, n_heads: int, window: tuple[int, int]):
        super().__init__()
        if dim % n_heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(
            math.log(10.0) * torch.ones(n_heads, 1, 1)
        )
        wh, ww = window
        self.bias_table = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), n_heads))
        idx = self._relative_index(wh, ww)
        self.register_buffer("relative_index", idx, persistent=False)

    @staticmethod
    def _relative_index(wh: int, ww: int) -> Tensor:
        coords = torch.stack(
            torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += wh - 1
        rel[:, :, 1] += ww - 1
        rel[:, :, 0] *= 2 * ww - 1
        return rel.sum(-1)

    def _shift_mask(self, h: int, w: int, shift: int, like: Tensor) -> Tensor:
        wh, ww = self.window
        region = torch.zeros(h, w, device=like.device)
        h_slices = (slice(0, -wh), slice(-wh, -shift), slice(-shift, None))
        w_slices = (slice(0, -ww), slice(-ww, -shift), slice(-shift, None))
        count = 0
        for hs in h_slices:
            for ws in w_slices:
                region[hs, ws] = count
                count += 1
        regions = _window_partition(region[None, :, :, None], wh, ww).squeeze(-1)
        diff = regions[:, None, :] - regions[:, :, None]
        mask = torch.zeros_like(diff)
        mask[diff != 0] = -1e4
        return mask.to(like.dtype)

    def forward(self, x: Tensor, shift: int = 0) -> Tensor:
        b, h, w, c = x.shape
        wh, ww = self.window
        if h % wh or w % ww:
            raise ConfigurationError(f"grid ({h}, {w}) not partitioned by window {self.window}")
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        tokens = _window_partition(x, wh, ww)  # [b*nW, N, c]
        n = tokens.shape[1]
        qkv = self.qkv(tokens).reshape(-1, n, 3, self.n_heads, c // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)

        attn = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1)
        scale = torch.clamp(self.logit_scale, max=MAX_LOGIT_SCALE).exp()
        attn = attn * scale
        bias = self.bias_table[self.relative_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1)

        if shift:
            mask = self._shift_mask(h, w, shift, x)  # [nW, N, N]
            n_win = mask.shape[0]
            attn = attn.view(b, n_win, self.n_heads, n, n) + mask[None, :, None]
            attn = attn.view(-1, self.n_heads, n, n)

        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        out = self.proj(out)
        out = _window_merge(out, wh, ww, h, w)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """Window attention + MLP, post-norm residual wiring."""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        window: tuple[int, int],
        shift: int = 0,
        mlp_ratio: float = 4.0,
        norm_layer=nn.LayerNorm,
    ):
        super().__init__()
        self.shift = shift
        self.attn = WindowAttention(dim, n_heads, window)
        self.norm1 = norm_layer(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = norm_layer(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.norm1(self.attn(x, self.shift))
        x = x + self.norm2(self.mlp(x))
        return x


class ConvNeXtBlock(nn.Module):
    """Depthwise 7x7 conv (zero padding), LN, pointwise 4x expansion, residual."""

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        y = self.dwconv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        y = self.pwconv2(F.gelu(self.pwconv1(self.norm(y))))
        return x + y


class PatchMerging(nn.Module):
    """2x2 token concat + linear, halving resolution and doubling dim."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        x = x.view(b, h // 2, 2, w // 2, 2, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


class PatchExpanding(nn.Module):
    """Linear to 2x dim then 2x2 pixel shuffle, doubling resolution."""

    def __init__(self, dim: int):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        x = self.expand(x).view(b, h, w, 2, 2, c // 2)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c // 2)
        return self.norm(x)


class RecoveryHead(nn.Module):
    """Tokens back to patch_size x patch_size pixel blocks."""

    def __init__(self, dim: int, patch_size: int, out_channels: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, patch_size * patch_size * out_channels)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, _ = x.shape
        p, c = self.patch_size, self.out_channels
        x = self.proj(self.norm(x)).view(b, h, w, p, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * p, w * p, c)
        return x


class SwinUNet(nn.Module):
    """Encoder/decoder of windowed-attention stages with ConvNeXt skips.

    ``forward`` accepts an optional ``stage_hook(stage_index, tokens)``
    called after each attention stage (encoder stages, bottleneck, decoder
    stages in order); the 3D lift uses it to interleave vertical blocks.
    """

    def __init__(self, config: TrunkConfig):
        super().__init__()
        self.config = config
        n = config.n_stages
        self.patch_embed = PatchEmbed(config.patch_size, IN_CHANNELS, config.embed_dim)

        def stage(i: int) -> nn.ModuleList:
            dim = config.stage_dim(i)
            window = config.stage_window(i)
            # a single full-grid window has nothing to shift across
            shifted = window != config.stage_resolution(i) and min(window) > 1
            shift = min(window) // 2 if shifted else 0
            return nn.ModuleList(
                [
                    SwinBlock(dim, config.n_heads, window, 0, config.mlp_ratio),
                    SwinBlock(dim, config.n_heads, window, shift, config.mlp_ratio),
                ]
            )

        self.encoder = nn.ModuleList([stage(i) for i in range(n - 1)])
        self.merges = nn.ModuleList([PatchMerging(config.stage_dim(i)) for i in range(n - 1)])
        self.skip_blocks = nn.ModuleList([ConvNeXtBlock(config.stage_dim(i)) for i in range(n - 1)])
        self.bottleneck = stage(n - 1)
        self.expands = nn.ModuleList(
            [PatchExpanding(config.stage_dim(i + 1)) for i in range(n - 1)]
        )
        self.skip_projs = nn.ModuleList(
            [nn.Linear(2 * config.stage_dim(i), config.stage_dim(i)) for i in range(n - 1)]
        )
        self.decoder = nn.ModuleList([stage(i) for i in range(n - 1)])
        self.recovery = RecoveryHead(config.embed_dim, config.patch_size, OUT_CHANNELS)
        self.apply(_init_weights)

    @property
    def n_attention_stages(self) -> int:
        return 2 * self.config.n_stages - 1

    def stage_dims(self) -> list[int]:
        """Token dim after each attention stage, in hook order."""
        n = self.config.n_stages
        enc = [self.config.stage_dim(i) for i in range(n - 1)]
        dec = [self.config.stage_dim(i) for i in reversed(range(n - 1))]
        return enc + [self.config.stage_dim(n - 1)] + dec

    def forward(self, x: Tensor, stage_hook=None) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != IN_CHANNELS:
            raise ContractError(f"expected [batch, h, w, {IN_CHANNELS}], got {tuple(x.shape)}")
        if tuple(x.shape[1:3]) != self.config.img_size:
            raise ConfigurationError(
                f"input pixels {tuple(x.shape[1:3])} do not match configured "
                f"size {self.config.img_size}"
            )
        idx = 0
        t = self.patch_embed(x)
        skips = []
        for blocks, merge, convnext in zip(self.encoder, self.merges, self.skip_blocks):
            for blk in blocks:
                t = blk(t)
            if stage_hook is not None:
                t = stage_hook(idx, t)
            idx += 1
            skips.append(convnext(t))
            t = merge(t)
        for blk in self.bottleneck:
            t = blk(t)
        if stage_hook is not None:
            t = stage_hook(idx, t)
        idx += 1
        for i in reversed(range(self.config.n_stages - 1)):
            t = self.expands[i](t)
            t = self.skip_projs[i](torch.cat([t, skips[i]], dim=-1))
            for blk in self.decoder[i]:
                t = blk(t)
            if stage_hook is not None:
                t = stage_hook(idx, t)
            idx += 1
        return self.recovery(t)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def build_trunk(config: TrunkConfig, seed: int = 0) -> SwinUNet:
    """Deterministically initialized trunk."""
    torch.manual_seed(seed)
    return SwinUNet(config)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def subtree_param_counts(module: nn.Module) -> dict[str, int]:
    """Exact scalar-parameter count per top-level child."""
    counts: dict[str, int] = {}
    for name, child in module.named_children():
        counts[name] = count_params(child)
    return counts


def zero_residual_branches(model: nn.Module) -> None:
    """Zero every residual branch's final projection (diagnostic mode).

    Afterwards attention blocks, MLPs and ConvNeXt blocks are identities, so
    the network reduces to the fixed embed/merge/expand/recover map.
    """
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, SwinBlock):
                m.attn.proj.weight.zero_()
                m.attn.proj.bias.zero_()
                m.mlp.fc2.weight.zero_()
                m.mlp.fc2.bias.zero_()
            elif isinstance(m, ConvNeXtBlock):
                m.pwconv2.weight.zero_()
                m.pwconv2.bias.zero_()
