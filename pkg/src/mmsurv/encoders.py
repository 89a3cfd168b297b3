"""Patch extraction, tokenizers, and modality-specific transformer encoders.

Geometry conventions:
  * 1D signals are zero-padded at the tail to a patch multiple; padded
    positions are ordinary patches.
  * 3D volumes patchify in lexicographic (z, y, x) block order; 2D tiles in
    row-major block order with channels fastest inside a patch.
  * Sequence slot 0 is CLS; patch p sits at slot p+1 and owns row p+1 of
    the positional table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .modalities import ModalityKind, ModalitySpec


# ---------------------------------------------------------------------------
# patch extraction


def patchify_1d(signal: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., N) -> (..., M, patch), tail zero-padded to a patch multiple."""
    if patch <= 0:
        raise ValueError("patch must be positive")
    n = signal.shape[-1]
    if n < 1:
        raise ValueError("empty signal")
    m = math.ceil(n / patch)
    pad = m * patch - n
    if pad:
        signal = torch.nn.functional.pad(signal, (0, pad))
    return signal.reshape(signal.shape[:-1] + (m, patch))


def unpatchify_1d(patches: torch.Tensor, length: int) -> torch.Tensor:
    flat = patches.reshape(patches.shape[:-2] + (-1,))
    return flat[..., :length]


def patchify_3d(volume: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., D, H, W) -> (..., M, patch**3) in (z, y, x) block order."""
    d, h, w = volume.shape[-3:]
    if d % patch or h % patch or w % patch:
        raise ValueError(f"shape {(d, h, w)} not divisible by patch {patch}")
    lead = volume.shape[:-3]
    g = (d // patch, h // patch, w // patch)
    x = volume.reshape(lead + (g[0], patch, g[1], patch, g[2], patch))
    ndim_lead = len(lead)
    perm = tuple(range(ndim_lead)) + tuple(
        ndim_lead + i for i in (0, 2, 4, 1, 3, 5)
    )
    x = x.permute(perm)
    return x.reshape(lead + (g[0] * g[1] * g[2], patch ** 3))


def unpatchify_3d(patches: torch.Tensor, shape: tuple[int, int, int]) -> torch.Tensor:
    d, h, w = shape
    m = patches.shape[-2]
    patch = round((patches.shape[-1]) ** (1.0 / 3.0))
    while patch ** 3 < patches.shape[-1]:
        patch += 1
    if patch ** 3 != patches.shape[-1]:
        raise ValueError("patch rows are not cubes")
    lead = patches.shape[:-2]
    g = (d // patch, h // patch, w // patch)
    if g[0] * g[1] * g[2] != m:
        raise ValueError(f"{m} patches do not tile {shape}")
    x = patches.reshape(lead + g + (patch, patch, patch))
    ndim_lead = len(lead)
    perm = tuple(range(ndim_lead)) + tuple(
        ndim_lead + i for i in (0, 3, 1, 4, 2, 5)
    )
    return x.permute(perm).reshape(lead + shape)


def patchify_2d(tile: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., H, W, C) or (H, W) -> (..., M, patch*patch*C), row-major blocks."""
    if tile.ndim == 2:
        tile = tile.unsqueeze(-1)
    h, w, c = tile.shape[-3:]
    if h % patch or w % patch:
        raise ValueError(f"shape {(h, w)} not divisible by patch {patch}")
    lead = tile.shape[:-3]
    g = (h // patch, w // patch)
    x = tile.reshape(lead + (g[0], patch, g[1], patch, c))
    ndim_lead = len(lead)
    perm = tuple(range(ndim_lead)) + tuple(ndim_lead + i for i in (0, 2, 1, 3, 4))
    x = x.permute(perm)
    return x.reshape(lead + (g[0] * g[1], patch * patch * c))


def unpatchify_2d(patches: torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
    if len(shape) == 2:
        h, w = shape
        c = 1
    else:
        h, w, c = shape
    m = patches.shape[-2]
    patch = round(math.sqrt(patches.shape[-1] / c))
    if patch * patch * c != patches.shape[-1]:
        raise ValueError("patch rows do not match the target shape")
    lead = patches.shape[:-2]
    g = (h // patch, w // patch)
    if g[0] * g[1] != m:
        raise ValueError(f"{m} patches do not tile {shape}")
    x = patches.reshape(lead + g + (patch, patch, c))
    ndim_lead = len(lead)
    perm = tuple(range(ndim_lead)) + tuple(ndim_lead + i for i in (0, 2, 1, 3, 4))
    out = x.permute(perm).reshape(lead + (h, w, c))
    if len(shape) == 2:
        out = out.squeeze(-1)
    return out


def patchify(arr: torch.Tensor, spec: ModalitySpec) -> torch.Tensor:
    """Dispatch on modality geometry; returns (..., M, patch_numel)."""
    if spec.kind in (ModalityKind.RNA, ModalityKind.DNAM):
        return patchify_1d(arr, spec.patch_size[0])
    if spec.kind is ModalityKind.MRI:
        return patchify_3d(arr, spec.patch_size[0])
    if len(spec.raw_shape) == 2:
        arr = arr.unsqueeze(-1)  # channel-free tiles gain an explicit C=1 axis
    return patchify_2d(arr, spec.patch_size[0])


def unpatchify(patches: torch.Tensor, spec: ModalitySpec) -> torch.Tensor:
    if spec.kind in (ModalityKind.RNA, ModalityKind.DNAM):
        return unpatchify_1d(patches, spec.raw_shape[0])
    if spec.kind is ModalityKind.MRI:
        return unpatchify_3d(patches, spec.raw_shape)
    return unpatchify_2d(patches, spec.raw_shape)


# ---------------------------------------------------------------------------
# token sequences


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (..., L, d)
    has_cls: bool
    modality: ModalityKind
    source_positions: np.ndarray  # original patch index per patch token

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[-2] - (1 if self.has_cls else 0)

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


def sinusoidal_table(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed sin/cos positional codes, one row per sequence slot."""
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table


def add_positional_and_cls(seq: TokenSequence, pos_table: torch.Tensor,
                           cls: torch.Tensor) -> TokenSequence:
    if seq.has_cls:
        raise ValueError("sequence already has a CLS token")
    m = seq.num_patches
    if pos_table.shape[0] < m + 1:
        raise ValueError(f"positional table too short: {pos_table.shape[0]} < {m + 1}")
    slots = torch.as_tensor(seq.source_positions + 1, dtype=torch.long)
    tokens = seq.tokens + pos_table[slots]
    lead = tokens.shape[:-2]
    cls_tok = (cls + pos_table[0]).expand(lead + (1, tokens.shape[-1]))
    return TokenSequence(
        tokens=torch.cat([cls_tok, tokens], dim=-2),
        has_cls=True,
        modality=seq.modality,
        source_positions=seq.source_positions.copy(),
    )


# ---------------------------------------------------------------------------
# tokenizers


class OmicsTokenizer(nn.Module):
    """Per-patch linear projection for 1D omics patches."""

    def __init__(self, patch_len: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(patch_len, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.proj(patches)


class VolumeTokenizer(nn.Module):
    """Two equal-stride 3D convolution stages per cubic patch."""

    def __init__(self, patch_side: int, embed_dim: int):
        super().__init__()
        s = math.isqrt(patch_side)
        if s * s != patch_side:
            raise ValueError("patch side must be a perfect square")
        mid = max(embed_dim // 2, 4)
        self.patch_side = patch_side
        self.conv1 = nn.Conv3d(1, mid, kernel_size=s, stride=s)
        self.act = nn.GELU()
        self.conv2 = nn.Conv3d(mid, embed_dim, kernel_size=s, stride=s)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        lead = patches.shape[:-1]
        p = self.patch_side
        x = patches.reshape(-1, 1, p, p, p)
        x = self.conv2(self.act(self.conv1(x)))
        return x.reshape(lead + (x.shape[1],))


class TileTokenizer(nn.Module):
    """Single stride=kernel 2D convolution per square tile patch."""

    def __init__(self, patch_side: int, channels: int, embed_dim: int):
        super().__init__()
        self.patch_side = patch_side
        self.channels = channels
        self.conv = nn.Conv2d(channels, embed_dim, kernel_size=patch_side, stride=patch_side)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        lead = patches.shape[:-1]
        p, c = self.patch_side, self.channels
        x = patches.reshape(-1, p, p, c).permute(0, 3, 1, 2)
        x = self.conv(x)
        return x.reshape(-1, x.shape[1]).reshape(lead + (x.shape[1],))


def make_tokenizer(spec: ModalitySpec) -> nn.Module:
    if spec.kind in (ModalityKind.RNA, ModalityKind.DNAM):
        return OmicsTokenizer(spec.patch_size[0], spec.embed_dim)
    if spec.kind is ModalityKind.MRI:
        return VolumeTokenizer(spec.patch_size[0], spec.embed_dim)
    return TileTokenizer(spec.patch_size[0], spec.channels, spec.embed_dim)


def embed_patches(patches: torch.Tensor, tokenizer: nn.Module,
                  kind: ModalityKind) -> TokenSequence:
    if patches.shape[-1] != _tokenizer_in_features(tokenizer):
        raise ValueError(
            f"{kind.value}: patch length {patches.shape[-1]} does not match tokenizer"
        )
    tokens = tokenizer(patches)
    m = patches.shape[-2]
    return TokenSequence(
        tokens=tokens,
        has_cls=False,
        modality=kind,
        source_positions=np.arange(m, dtype=np.int64),
    )


def _tokenizer_in_features(tokenizer: nn.Module) -> int:
    if isinstance(tokenizer, OmicsTokenizer):
        return tokenizer.proj.in_features
    if isinstance(tokenizer, VolumeTokenizer):
        return tokenizer.patch_side ** 3
    return tokenizer.patch_side ** 2 * tokenizer.channels


# ---------------------------------------------------------------------------
# transformer stack


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("heads must divide dim")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        lead, (L, d) = x.shape[:-2], x.shape[-2:]
        h = self.num_heads
        q = self.q(x).reshape(-1, L, h, d // h).transpose(1, 2)
        k = self.k(x).reshape(-1, L, h, d // h).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        return attn.softmax(dim=-1).reshape(lead + (h, L, L))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead, (L, d) = x.shape[:-2], x.shape[-2:]
        h = self.num_heads
        flat = x.reshape(-1, L, d)
        q = self.q(flat).reshape(-1, L, h, d // h).transpose(1, 2)
        k = self.k(flat).reshape(-1, L, h, d // h).transpose(1, 2)
        v = self.v(flat).reshape(-1, L, h, d // h).transpose(1, 2)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(-1, L, d)
        return self.out(y).reshape(lead + (L, d))


class TransformerBlock(nn.Module):
    """Pre-norm block: norm -> attention -> residual; norm -> MLP -> residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def init_transformer_weights(module: nn.Module) -> None:
    """Xavier projections with zero-initialized residual-branch outputs, so
    every block starts as the identity and short schedules train stably."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv3d,
                          nn.ConvTranspose2d, nn.ConvTranspose3d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, TransformerBlock):
            nn.init.zeros_(m.attn.out.weight)
            nn.init.zeros_(m.attn.out.bias)
            nn.init.zeros_(m.mlp[2].weight)
            nn.init.zeros_(m.mlp[2].bias)


class TransformerStack(nn.Module):
    def __init__(self, dim: int, num_layers: int, num_heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, num_heads) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise RuntimeError("numerical divergence")
        return x


def encode_modality(seq: TokenSequence, stack: TransformerStack) -> TokenSequence:
    return replace(seq, tokens=stack(seq.tokens), source_positions=seq.source_positions.copy())


class ModalityEncoder(nn.Module):
    """Tokenizer + positional table + CLS + transformer stack for one modality."""

    def __init__(self, spec: ModalitySpec):
        super().__init__()
        self.spec = spec
        self.tokenizer = make_tokenizer(spec)
        self.cls = nn.Parameter(torch.randn(spec.embed_dim) * 0.02)
        self.stack = TransformerStack(spec.embed_dim, spec.num_layers, spec.num_heads)
        self.register_buffer(
            "pos_table", sinusoidal_table(spec.num_patches + 1, spec.embed_dim)
        )

    def tokenize(self, patches: torch.Tensor) -> TokenSequence:
        seq = embed_patches(patches, self.tokenizer, self.spec.kind)
        return add_positional_and_cls(seq, self.pos_table, self.cls)

    def cls_only_sequence(self, lead: tuple[int, ...] = ()) -> TokenSequence:
        """Sequence for a fully missing modality: just CLS + its position."""
        tok = (self.cls + self.pos_table[0]).expand(lead + (1, self.spec.embed_dim))
        return TokenSequence(
            tokens=tok,
            has_cls=True,
            modality=self.spec.kind,
            source_positions=np.empty(0, dtype=np.int64),
        )

    def forward(self, patches: torch.Tensor) -> TokenSequence:
        return encode_modality(self.tokenize(patches), self.stack)
