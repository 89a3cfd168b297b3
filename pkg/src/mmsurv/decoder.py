"""Joint decoder: concatenated modality latents, shared transformer,
per-modality projection heads, masked reconstruction loss, and imputation
of absent modalities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoders import (
    ModalityEncoder,
    TokenSequence,
    TransformerStack,
    init_transformer_weights,
    patchify,
    unpatchify,
)
from .masking import MaskConfig, MaskPlan, plan_masks
from .modalities import MASKABLE, ModalityKind, ModalitySpec, SpecMap


@dataclass
class FusedLatent:
    tokens: torch.Tensor  # (..., L_total, d)
    segments: list[tuple[ModalityKind, int, int]]  # (kind, start, length incl. CLS)

    @property
    def segment_map(self) -> list[tuple[ModalityKind, int | None, bool]]:
        """Per-token (modality, source position, is_cls)."""
        out = []
        for kind, start, length in self.segments:
            out.append((kind, None, True))
            out.extend((kind, p, False) for p in range(length - 1))
        return out

    def patch_tokens(self, kind: ModalityKind) -> torch.Tensor:
        for k, start, length in self.segments:
            if k is kind:
                return self.tokens[..., start + 1 : start + length, :]
        raise KeyError(kind)


@dataclass
class ReconstructionBundle:
    recon: dict[ModalityKind, torch.Tensor]  # (..., M, patch_numel)
    loss_mask: dict[ModalityKind, torch.Tensor]  # (..., M) bool


def fuse_latents(seqs: Sequence[TokenSequence],
                 modality_embeds: dict[str, torch.Tensor] | nn.ParameterDict) -> FusedLatent:
    """Concatenate full-length modality sequences in fixed order and add the
    learned per-modality type embedding to every token of each segment."""
    by_kind = {s.modality: s for s in seqs}
    order = [k for k in MASKABLE if k in by_kind]
    width = {by_kind[k].width for k in order}
    if len(width) != 1:
        raise ValueError(f"segment widths differ: {sorted(width)}")
    parts, segments, start = [], [], 0
    for kind in order:
        seq = by_kind[kind]
        if not seq.has_cls:
            raise ValueError(f"{kind.value}: expected a CLS-bearing full sequence")
        emb = modality_embeds[kind.value]
        parts.append(seq.tokens + emb)
        length = seq.tokens.shape[-2]
        segments.append((kind, start, length))
        start += length
    return FusedLatent(tokens=torch.cat(parts, dim=-2), segments=segments)


def decode(fused: FusedLatent, stack: TransformerStack) -> FusedLatent:
    return FusedLatent(tokens=stack(fused.tokens), segments=list(fused.segments))


# ---------------------------------------------------------------------------
# projection heads


class OmicsHead(nn.Module):
    def __init__(self, embed_dim: int, patch_len: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, patch_len)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens)


class VolumeHead(nn.Module):
    """Two transposed 3D convolution stages mirroring the volume tokenizer."""

    def __init__(self, embed_dim: int, patch_side: int):
        super().__init__()
        s = math.isqrt(patch_side)
        if s * s != patch_side:
            raise ValueError("patch side must be a perfect square")
        mid = max(embed_dim // 2, 4)
        self.patch_side = patch_side
        self.deconv1 = nn.ConvTranspose3d(embed_dim, mid, kernel_size=s, stride=s)
        self.act = nn.GELU()
        self.deconv2 = nn.ConvTranspose3d(mid, 1, kernel_size=s, stride=s)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        lead = tokens.shape[:-1]
        x = tokens.reshape(-1, tokens.shape[-1], 1, 1, 1)
        x = self.deconv2(self.act(self.deconv1(x)))
        p = self.patch_side
        return x.reshape(lead + (p ** 3,))


class TileHead(nn.Module):
    """Single transposed 2D convolution mirroring the tile tokenizer."""

    def __init__(self, embed_dim: int, patch_side: int, channels: int):
        super().__init__()
        self.patch_side = patch_side
        self.channels = channels
        self.deconv = nn.ConvTranspose2d(embed_dim, channels,
                                         kernel_size=patch_side, stride=patch_side)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        lead = tokens.shape[:-1]
        x = tokens.reshape(-1, tokens.shape[-1], 1, 1)
        x = self.deconv(x)  # (N, C, p, p)
        x = x.permute(0, 2, 3, 1)  # channels fastest, matching patchify_2d
        return x.reshape(lead + (self.patch_side ** 2 * self.channels,))


def make_head(spec: ModalitySpec) -> nn.Module:
    if spec.kind in (ModalityKind.RNA, ModalityKind.DNAM):
        return OmicsHead(spec.embed_dim, spec.patch_size[0])
    if spec.kind is ModalityKind.MRI:
        return VolumeHead(spec.embed_dim, spec.patch_size[0])
    return TileHead(spec.embed_dim, spec.patch_size[0], spec.channels)


def project_heads(decoded: FusedLatent, heads: nn.ModuleDict,
                  plans: Sequence[MaskPlan] | MaskPlan) -> ReconstructionBundle:
    """Map decoded patch tokens (CLS excluded) back to patch space."""
    plan_list = [plans] if isinstance(plans, MaskPlan) else list(plans)
    recon, loss_mask = {}, {}
    for kind, start, length in decoded.segments:
        tokens = decoded.patch_tokens(kind)
        recon[kind] = heads[kind.value](tokens)
        rows = np.zeros((len(plan_list), length - 1), dtype=bool)
        for i, p in enumerate(plan_list):
            mm = p[kind]
            if not mm.missing:  # loss only on masked patches of present modalities
                rows[i, mm.masked_idx] = True
        mask = torch.as_tensor(rows)
        if recon[kind].ndim == 2:
            if len(plan_list) != 1:
                raise ValueError("one plan expected for an unbatched sequence")
            mask = mask[0]
        elif mask.shape[0] != recon[kind].shape[0]:
            raise ValueError(
                f"{len(plan_list)} plans for a batch of {recon[kind].shape[0]}"
            )
        loss_mask[kind] = mask
    return ReconstructionBundle(recon=recon, loss_mask=loss_mask)


def reconstruction_loss(bundle: ReconstructionBundle,
                        originals: dict[ModalityKind, torch.Tensor],
                        ) -> tuple[torch.Tensor, dict[ModalityKind, torch.Tensor]]:
    """Summed per-modality MSE over masked patch elements of present
    modalities; missing modalities contribute nothing."""
    per_modality: dict[ModalityKind, torch.Tensor] = {}
    for kind, recon in bundle.recon.items():
        mask = bundle.loss_mask[kind]
        if not bool(mask.any()):
            continue
        target = originals[kind]
        if target.shape != recon.shape:
            raise ValueError(
                f"{kind.value}: original patches {tuple(target.shape)} vs "
                f"reconstruction {tuple(recon.shape)}"
            )
        diff = recon[mask] - target[mask]
        per_modality[kind] = diff.pow(2).mean()
    if not per_modality:
        raise ValueError("no masked patches on any present modality")
    total = sum(per_modality.values())
    return total, per_modality


# ---------------------------------------------------------------------------
# the pretraining model


class MaskedMultimodalAutoencoder(nn.Module):
    """Modality encoders feeding one joint decoder that reconstructs masked
    patches of every modality simultaneously."""

    def __init__(self, specs: SpecMap, decoder_layers: int = 3, decoder_heads: int = 4):
        super().__init__()
        self.order = [k for k in MASKABLE if k in specs]
        if not self.order:
            raise ValueError("no maskable modalities configured")
        widths = {specs[k].embed_dim for k in self.order}
        if len(widths) != 1:
            raise ValueError("all modalities must share one embed_dim")
        self.specs = {k: specs[k] for k in self.order}
        d = widths.pop()
        self.embed_dim = d
        self.encoders = nn.ModuleDict(
            {k.value: ModalityEncoder(specs[k]) for k in self.order}
        )
        self.mask_tokens = nn.ParameterDict(
            {k.value: nn.Parameter(torch.randn(d) * 0.02) for k in self.order}
        )
        self.modality_embeds = nn.ParameterDict(
            {k.value: nn.Parameter(torch.randn(d) * 0.02) for k in self.order}
        )
        self.decoder = TransformerStack(d, decoder_layers, decoder_heads)
        self.heads = nn.ModuleDict({k.value: make_head(specs[k]) for k in self.order})
        init_transformer_weights(self)
        self.double()

    @property
    def patch_counts(self) -> dict[ModalityKind, int]:
        return {k: self.specs[k].num_patches for k in self.order}

    def _segment(self, kind: ModalityKind, patches: torch.Tensor | None,
                 plans: Sequence[MaskPlan]) -> TokenSequence:
        """Encode visible tokens and rebuild the full-length segment for a
        whole batch; rows with the modality missing become pure mask tokens
        behind an encoded CLS."""
        enc = self.encoders[kind.value]
        spec = self.specs[kind]
        m = spec.num_patches
        d = spec.embed_dim
        batch = len(plans)
        present = [i for i in range(batch) if not plans[i][kind].missing]
        missing = [i for i in range(batch) if plans[i][kind].missing]

        full = (self.mask_tokens[kind.value] + enc.pos_table[1:]).expand(batch, m, d).clone()
        cls_col = torch.empty(batch, 1, d, dtype=full.dtype)

        if present:
            seq = enc.tokenize(patches[present])
            vis = np.stack([plans[i][kind].visible_idx for i in present])
            idx = torch.as_tensor(
                np.concatenate([np.zeros((len(present), 1), dtype=np.int64), vis + 1], axis=1)
            )
            gathered = torch.gather(
                seq.tokens, 1, idx.unsqueeze(-1).expand(-1, -1, d)
            )
            encoded = enc.stack(gathered)
            cls_col[present] = encoded[:, :1, :]
            if vis.shape[1]:
                rows = torch.as_tensor(present).unsqueeze(1).expand(-1, vis.shape[1])
                full[rows, torch.as_tensor(vis)] = encoded[:, 1:, :]
        if missing:
            encoded_cls = enc.stack(enc.cls_only_sequence(lead=(1,)).tokens)
            cls_col[missing] = encoded_cls

        return TokenSequence(
            tokens=torch.cat([cls_col, full], dim=1),
            has_cls=True,
            modality=kind,
            source_positions=np.arange(m, dtype=np.int64),
        )

    def reconstruct(self, patches: dict[ModalityKind, torch.Tensor],
                    plans: Sequence[MaskPlan]) -> ReconstructionBundle:
        seqs = [self._segment(k, patches.get(k), plans) for k in self.order]
        fused = fuse_latents(seqs, self.modality_embeds)
        decoded = decode(fused, self.decoder)
        return project_heads(decoded, self.heads, plans)

    def forward_loss(self, patches: dict[ModalityKind, torch.Tensor],
                     plans: Sequence[MaskPlan]):
        bundle = self.reconstruct(patches, plans)
        return reconstruction_loss(bundle, patches)


def impute_missing(record, model: MaskedMultimodalAutoencoder,
                   tile_index: int = 0) -> dict[ModalityKind, np.ndarray]:
    """Reconstruct every absent modality from the present ones.

    Present modalities enter fully visible (mask ratio 0); absent ones are
    fully masked. Returns un-patchified arrays for the absent modalities
    only; 1D padding is stripped and WSI comes back as a single tile.
    """
    present = [k for k in model.order if record.presence.get(k, False)]
    if not present:
        raise ValueError("cannot impute: every modality is missing")
    missing = [k for k in model.order if k not in present]
    if not missing:
        return {}
    rng = np.random.default_rng(0)  # ratio 0 draws nothing; stream is inert
    plan = plan_masks(record, model.patch_counts, MaskConfig(mask_ratio=0.0), rng)
    patches = {}
    for kind in present:
        arr = record.modalities[kind]
        if kind is ModalityKind.WSI:
            arr = arr[tile_index]
        t = torch.as_tensor(np.asarray(arr), dtype=torch.float64)
        patches[kind] = patchify(t, model.specs[kind]).unsqueeze(0)
    with torch.no_grad():
        bundle = model.reconstruct(patches, [plan])
    out = {}
    for kind in missing:
        rec = unpatchify(bundle.recon[kind][0], model.specs[kind])
        arr = rec.numpy()
        if kind is ModalityKind.WSI:
            arr = arr[None, ...]  # single reconstructed tile
        out[kind] = arr
    return out
