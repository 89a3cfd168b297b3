"""Per-sample mask plans: which patches each modality hides, and which
modalities contribute to the reconstruction loss.

A missing modality is treated as fully masked and dropped from the loss;
a present one hides round(mask_ratio * P) patches chosen uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import TokenSequence
from .modalities import MASKABLE, ModalityKind


@dataclass(frozen=True)
class MaskConfig:
    mask_ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0,1]")


@dataclass(frozen=True)
class ModalityMask:
    visible_idx: np.ndarray  # sorted int64
    masked_idx: np.ndarray   # sorted int64
    missing: bool

    @property
    def num_patches(self) -> int:
        return self.visible_idx.size + self.masked_idx.size


@dataclass(frozen=True)
class MaskPlan:
    masks: dict[ModalityKind, ModalityMask]

    @property
    def loss_active(self) -> dict[ModalityKind, bool]:
        return {k: not m.missing for k, m in self.masks.items()}

    def __getitem__(self, kind: ModalityKind) -> ModalityMask:
        return self.masks[kind]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_masks(record, patch_counts: dict[ModalityKind, int], cfg: MaskConfig,
               rng: np.random.Generator) -> MaskPlan:
    """Draw one mask plan for a record. Only record.presence is consulted."""
    masks = {}
    for kind in MASKABLE:
        if kind not in patch_counts:
            continue
        count = int(patch_counts[kind])
        if count < 1:
            raise ValueError(f"{kind.value}: patch count must be >= 1")
        if not record.presence.get(kind, False):
            masks[kind] = ModalityMask(
                visible_idx=np.empty(0, dtype=np.int64),
                masked_idx=np.arange(count, dtype=np.int64),
                missing=True,
            )
            continue
        n_masked = _round_half_up(cfg.mask_ratio * count)
        perm = rng.permutation(count)
        masked = np.sort(perm[:n_masked]).astype(np.int64)
        visible = np.sort(perm[n_masked:]).astype(np.int64)
        masks[kind] = ModalityMask(visible_idx=visible, masked_idx=masked, missing=False)
    return MaskPlan(masks=masks)


def gather_visible(tokens: TokenSequence, plan: MaskPlan, kind: ModalityKind) -> TokenSequence:
    """Keep CLS plus tokens at the plan's visible positions, order preserved."""
    mask = plan[kind]
    if tokens.num_patches != mask.num_patches:
        raise ValueError(
            f"{kind.value}: sequence has {tokens.num_patches} patch tokens, "
            f"plan covers {mask.num_patches}"
        )
    offset = 1 if tokens.has_cls else 0
    idx = torch.as_tensor(mask.visible_idx + offset, dtype=torch.long)
    if tokens.has_cls:
        idx = torch.cat([torch.zeros(1, dtype=torch.long), idx])
    kept = tokens.tokens.index_select(-2, idx)
    return TokenSequence(
        tokens=kept,
        has_cls=tokens.has_cls,
        modality=kind,
        source_positions=mask.visible_idx.copy(),
    )


def scatter_with_mask_tokens(encoded_visible: TokenSequence, plan: MaskPlan,
                             kind: ModalityKind, mask_token: torch.Tensor,
                             pos_table: torch.Tensor) -> TokenSequence:
    """Rebuild the full-length sequence: encoder outputs return to their
    source positions, every masked slot becomes mask_token + positional code."""
    mask = plan[kind]
    if not encoded_visible.has_cls:
        raise ValueError("encoded sequence must carry its CLS token")
    if encoded_visible.num_patches != mask.visible_idx.size:
        raise ValueError(
            f"{kind.value}: {encoded_visible.num_patches} encoded tokens vs "
            f"{mask.visible_idx.size} visible positions"
        )
    total = mask.num_patches
    d = encoded_visible.tokens.shape[-1]
    lead = encoded_visible.tokens.shape[:-2]
    out = torch.zeros(lead + (total + 1, d), dtype=encoded_visible.tokens.dtype)
    # patch position p occupies sequence slot p+1 and owns row p+1 of the table
    if mask.masked_idx.size:
        slots = torch.as_tensor(mask.masked_idx + 1, dtype=torch.long)
        out[..., slots, :] = mask_token + pos_table[slots]
    out[..., 0:1, :] = encoded_visible.tokens[..., 0:1, :]
    if mask.visible_idx.size:
        slots = torch.as_tensor(mask.visible_idx + 1, dtype=torch.long)
        out[..., slots, :] = encoded_visible.tokens[..., 1:, :]
    return TokenSequence(
        tokens=out,
        has_cls=True,
        modality=kind,
        source_positions=np.arange(total, dtype=np.int64),
    )
