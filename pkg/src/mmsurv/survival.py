"""Fine-tuning for discrete-time survival: pretrained encoders behind a
freeze policy, a self-attention fusion block over per-modality CLS
embeddings plus a clinical token, and a linear hazard head over T
intervals trained with the discrete-time negative log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoders import ModalityEncoder, SelfAttention, init_transformer_weights, patchify
from .modalities import CLINICAL_DIM, MASKABLE, ModalityKind, SpecMap
from .preprocessing import clinical_encode

DEFAULT_NUM_BINS = 20


@dataclass(frozen=True)
class FreezePolicy:
    """Layer indices (0-based) and tokenizer flags kept out of the optimizer."""

    frozen_layers: dict[ModalityKind, frozenset[int]]
    tokenizers_frozen: dict[ModalityKind, bool]

    @classmethod
    def default(cls, specs: SpecMap) -> "FreezePolicy":
        """Imaging encoders fully frozen; omics encoders keep only their
        last transformer layer trainable."""
        frozen, tok = {}, {}
        for kind, spec in specs.items():
            if kind in (ModalityKind.MRI, ModalityKind.WSI):
                frozen[kind] = frozenset(range(spec.num_layers))
            else:
                frozen[kind] = frozenset(range(spec.num_layers - 1))
            tok[kind] = True
        return cls(frozen_layers=frozen, tokenizers_frozen=tok)

    @classmethod
    def freeze_all(cls, specs: SpecMap) -> "FreezePolicy":
        return cls(
            frozen_layers={k: frozenset(range(s.num_layers)) for k, s in specs.items()},
            tokenizers_frozen={k: True for k in specs},
        )

    @classmethod
    def none(cls, specs: SpecMap) -> "FreezePolicy":
        return cls(
            frozen_layers={k: frozenset() for k in specs},
            tokenizers_frozen={k: False for k in specs},
        )


def apply_freeze(encoders: nn.ModuleDict, policy: FreezePolicy) -> list[str]:
    """Mark frozen parameters non-trainable; returns their qualified names.

    The final stack norm freezes together with the last layer; CLS tokens
    freeze with their tokenizer.
    """
    frozen = []
    for name, enc in encoders.items():
        kind = ModalityKind(name)
        layers = policy.frozen_layers.get(kind, frozenset())
        n_layers = len(enc.stack.blocks)
        if policy.tokenizers_frozen.get(kind, False):
            for pname, p in enc.tokenizer.named_parameters():
                p.requires_grad_(False)
                frozen.append(f"encoders.{name}.tokenizer.{pname}")
            enc.cls.requires_grad_(False)
            frozen.append(f"encoders.{name}.cls")
        for i in layers:
            for pname, p in enc.stack.blocks[i].named_parameters():
                p.requires_grad_(False)
                frozen.append(f"encoders.{name}.stack.blocks.{i}.{pname}")
        if n_layers - 1 in layers:
            for pname, p in enc.stack.norm.named_parameters():
                p.requires_grad_(False)
                frozen.append(f"encoders.{name}.stack.norm.{pname}")
    return frozen


class FusionBlock(nn.Module):
    """One pre-norm self-attention block over unordered modality tokens."""

    def __init__(self, dim: int, num_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.drop(self.attn(self.norm(x)))


def fusion_attention(tokens: torch.Tensor, block: FusionBlock) -> torch.Tensor:
    """Self-attention then mean pooling into one fused vector."""
    if tokens.shape[-2] < 1:
        raise ValueError("need at least one fusion token")
    return block(tokens).mean(dim=-2)


@dataclass
class SurvivalPrediction:
    hazards: np.ndarray  # (T,) in (0,1)
    survival: np.ndarray  # cumulative product of (1 - hazard)


def hazard_head(fused: torch.Tensor, proj: nn.Linear) -> SurvivalPrediction:
    logits = proj(fused)
    h = torch.sigmoid(logits)
    s = torch.cumprod(1.0 - h, dim=-1)
    return SurvivalPrediction(
        hazards=h.detach().numpy(), survival=s.detach().numpy()
    )


def survival_from_logits(logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    h = torch.sigmoid(logits)
    return h, torch.cumprod(1.0 - h, dim=-1)


def nll_from_logits(logits: torch.Tensor, interval: torch.Tensor,
                    event: torch.Tensor) -> torch.Tensor:
    """Discrete-time survival NLL, averaged over patients.

    Each patient contributes Bernoulli terms for every interval up to and
    including the one holding their time; the event indicator fires only in
    that final interval of an observed event. Computed from logits with
    log-sigmoid identities so hazards may saturate safely.
    """
    n, t = logits.shape
    interval = torch.as_tensor(interval, dtype=torch.long)
    event = torch.as_tensor(event, dtype=torch.bool)
    if interval.min() < 1 or interval.max() > t:
        raise ValueError("interval index outside [1, T]")
    steps = torch.arange(1, t + 1).unsqueeze(0)
    in_range = steps <= interval.unsqueeze(1)
    fires = in_range & event.unsqueeze(1) & (steps == interval.unsqueeze(1))
    log_h = F.logsigmoid(logits)
    log_1mh = F.logsigmoid(-logits)
    ll = torch.where(fires, log_h, log_1mh) * in_range
    return -(ll.sum() / n)


def nll_loss(preds: Sequence[SurvivalPrediction], labels) -> float:
    """Same likelihood evaluated from hazard values on finished predictions."""
    total = 0.0
    for pred, label in zip(preds, labels):
        kappa = label.interval_index
        if kappa is None or not 1 <= kappa <= len(pred.hazards):
            raise ValueError("interval index outside [1, T]")
        for t in range(1, kappa + 1):
            h = pred.hazards[t - 1]
            if label.event and t == kappa:
                total -= np.log(h)
            else:
                total -= np.log1p(-h)
    return float(total / len(preds))


class SurvivalModel(nn.Module):
    """Encoders -> per-modality CLS tokens (+ clinical token) -> fusion
    attention -> mean pool -> linear hazard projection."""

    def __init__(self, specs: SpecMap, use_clinical: bool = True,
                 fusion_dim: int | None = None, num_bins: int = DEFAULT_NUM_BINS,
                 fusion_heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.order = [k for k in MASKABLE if k in specs]
        if not self.order:
            raise ValueError("no modalities configured")
        self.specs = {k: specs[k] for k in self.order}
        d = self.specs[self.order[0]].embed_dim
        fusion_dim = fusion_dim or d
        self.use_clinical = use_clinical
        self.num_bins = num_bins
        self.encoders = nn.ModuleDict(
            {k.value: ModalityEncoder(self.specs[k]) for k in self.order}
        )
        self.bridge = nn.Linear(d, fusion_dim) if fusion_dim != d else nn.Identity()
        self.clinical_proj = nn.Linear(CLINICAL_DIM, fusion_dim)
        self.clinical_missing = nn.Parameter(torch.randn(fusion_dim) * 0.02)
        self.fusion = FusionBlock(fusion_dim, fusion_heads, dropout)
        self.head_drop = nn.Dropout(dropout)
        self.hazard = nn.Linear(fusion_dim, num_bins)
        self.register_buffer("age_mean", torch.tensor(0.0))
        self.register_buffer("age_std", torch.tensor(1.0))
        init_transformer_weights(self)
        self.double()

    def set_age_stats(self, mean: float, std: float) -> None:
        if std <= 0:
            raise ValueError("age_std must be positive")
        self.age_mean.fill_(mean)
        self.age_std.fill_(std)

    def encode_cls(self, kind: ModalityKind, arr: np.ndarray) -> torch.Tensor:
        """CLS embedding of one modality array; WSI averages its tiles."""
        spec = self.specs[kind]
        t = torch.as_tensor(np.asarray(arr), dtype=torch.float64)
        if kind is ModalityKind.WSI:
            seq = self.encoders[kind.value](patchify(t, spec))  # (tiles, M+1, d)
            return seq.tokens[:, 0, :].mean(dim=0)
        seq = self.encoders[kind.value](patchify(t, spec))
        return seq.tokens[0, :]

    def clinical_token(self, clinical: np.ndarray | None) -> torch.Tensor:
        if clinical is None:
            return self.clinical_missing
        encoded = clinical_encode(
            bool(clinical[0]), bool(clinical[1]), float(clinical[2]),
            float(self.age_mean), float(self.age_std),
        )
        return self.clinical_proj(torch.as_tensor(encoded, dtype=torch.float64))

    def fusion_tokens(self, record, imputed: dict[ModalityKind, np.ndarray]) -> torch.Tensor:
        """Fusion input sequence for one patient: one token per modality."""
        tokens = []
        for kind in self.order:
            arr = record.modalities.get(kind)
            if arr is None:
                arr = imputed.get(kind)
            if arr is None:
                raise ValueError(f"{kind.value} neither present nor imputed")
            tokens.append(self.bridge(self.encode_cls(kind, arr)))
        if self.use_clinical:
            tokens.append(self.clinical_token(record.clinical))
        return torch.stack(tokens, dim=0)

    def logits_from_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        fused = fusion_attention(tokens, self.fusion)
        return self.hazard(self.head_drop(fused))

    def forward(self, token_batch: torch.Tensor) -> torch.Tensor:
        return self.logits_from_tokens(token_batch)


def patient_embedding(record, model: SurvivalModel,
                      imputed: dict[ModalityKind, np.ndarray] | None = None) -> torch.Tensor:
    imputed = imputed or {}
    if not any(record.presence.get(k, False) for k in model.order) and not imputed:
        raise ValueError("record has no modalities")
    return model.fusion_tokens(record, imputed)


def build_finetune_model(
    checkpoint_arrays: dict[str, np.ndarray] | None,
    specs: SpecMap,
    policy: FreezePolicy,
    use_clinical: bool = True,
    fusion_dim: int | None = None,
    num_bins: int = DEFAULT_NUM_BINS,
    dropout: float = 0.1,
) -> tuple[SurvivalModel, list[str]]:
    """Assemble the fine-tune model, load pretrained encoder weights, and
    apply the freeze policy. Returns (model, frozen parameter names)."""
    model = SurvivalModel(
        specs, use_clinical=use_clinical, fusion_dim=fusion_dim,
        num_bins=num_bins, dropout=dropout,
    )
    if checkpoint_arrays is not None:
        state = model.state_dict()
        wanted = tuple(f"encoders.{k.value}." for k in model.order)
        for key, value in checkpoint_arrays.items():
            if not key.startswith(wanted):
                continue  # decoder-side weights, or modalities outside this subset
            if key not in state:
                raise ValueError(f"checkpoint key {key} not in fine-tune model")
            if tuple(state[key].shape) != tuple(value.shape):
                raise ValueError(
                    f"checkpoint mismatch at {key}: {tuple(value.shape)} vs "
                    f"{tuple(state[key].shape)}"
                )
            state[key] = torch.as_tensor(value, dtype=state[key].dtype)
        missing = [
            k for k in state
            if k.startswith("encoders.") and k not in checkpoint_arrays
            and not k.endswith("pos_table")
        ]
        if missing:
            raise ValueError(f"checkpoint missing encoder keys: {missing[:3]}")
        model.load_state_dict(state)
    frozen = apply_freeze(model.encoders, policy)
    return model, frozen
