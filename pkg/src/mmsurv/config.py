"""Training configuration, stage defaults, and the desk/paper profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .modalities import MASKABLE, ModalityKind, ModalitySpec, SpecMap, desk_specs, paper_specs

ALL_MODALITIES = MASKABLE + (ModalityKind.CLINICAL,)

# Stage-specific fine-tune learning rates keyed by the maskable subset.
FINETUNE_LR = {
    frozenset({ModalityKind.RNA, ModalityKind.DNAM}): 1e-4,
    frozenset({ModalityKind.RNA, ModalityKind.DNAM, ModalityKind.MRI}): 1e-3,
    frozenset({ModalityKind.RNA, ModalityKind.DNAM, ModalityKind.WSI}): 3e-4,
    frozenset({ModalityKind.RNA, ModalityKind.DNAM, ModalityKind.WSI, ModalityKind.MRI}): 3e-4,
}
DEFAULT_FINETUNE_LR = 3e-4


@dataclass(frozen=True)
class TrainConfig:
    stage: str  # "pretrain" | "finetune"
    lr: float
    epochs: int
    weight_decay: float = 1e-2
    batch_size: int = 24
    mask_ratio: float = 0.5
    dropout: float = 0.0
    seed: int = 0
    modality_subset: tuple[ModalityKind, ...] = ALL_MODALITIES
    scheduler: str = "cosine"
    num_bins: int = 20
    decoder_layers: int = 3

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage}")
        if self.scheduler != "cosine":
            raise ValueError(f"unknown scheduler {self.scheduler}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio outside [0,1]")

    @property
    def maskable_subset(self) -> tuple[ModalityKind, ...]:
        return tuple(k for k in MASKABLE if k in self.modality_subset)

    @property
    def use_clinical(self) -> bool:
        return ModalityKind.CLINICAL in self.modality_subset

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["modality_subset"] = [k.value for k in self.modality_subset]
        return d


def pretrain_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(stage="pretrain", lr=1e-3, epochs=800, weight_decay=1e-2,
                batch_size=24, mask_ratio=0.5, dropout=0.0, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


def finetune_config(subset: tuple[ModalityKind, ...] = ALL_MODALITIES,
                    seed: int = 0, **overrides) -> TrainConfig:
    key = frozenset(k for k in subset if k in MASKABLE)
    base = dict(stage="finetune", lr=FINETUNE_LR.get(key, DEFAULT_FINETUNE_LR),
                epochs=20, weight_decay=1e-2, batch_size=24, mask_ratio=0.5,
                dropout=0.1, seed=seed, modality_subset=tuple(subset))
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Profile:
    name: str
    specs: SpecMap
    pretrain: TrainConfig
    finetune: TrainConfig
    synth_n: int = 64
    synth_missing: dict[ModalityKind, float] = field(default_factory=dict)
    synth_tiles: int = 10


def desk_profile(seed: int = 0) -> Profile:
    return Profile(
        name="desk",
        specs=desk_specs(),
        pretrain=pretrain_config(seed=seed, epochs=30, lr=3e-3, batch_size=4),
        finetune=finetune_config(seed=seed, epochs=20, batch_size=8, lr=1e-3),
        synth_n=64,
        synth_missing={},
        synth_tiles=10,
    )


def paper_profile(seed: int = 0) -> Profile:
    return Profile(
        name="paper",
        specs=paper_specs(),
        pretrain=pretrain_config(seed=seed),
        finetune=finetune_config(seed=seed),
        synth_n=200,
        synth_missing={},
        synth_tiles=10,
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _parse_specs(block: dict, base: SpecMap) -> SpecMap:
    specs = dict(base)
    for name, entry in block.items():
        kind = ModalityKind(name)
        cur = specs[kind].to_dict()
        cur.update(entry)
        cur["kind"] = kind.value
        specs[kind] = ModalitySpec.from_dict(cur)
    return specs


def _parse_subset(value) -> tuple[ModalityKind, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    return tuple(ModalityKind(v) for v in value)


def load_profile(config_path: str | Path | None = None, seed: int | None = None,
                 modalities: str | None = None) -> Profile:
    """Resolve a profile from defaults, an optional JSON config, and CLI flags."""
    raw = {}
    if config_path is not None:
        raw = json.loads(Path(config_path).read_text())
    profile = PROFILES[raw.get("profile", "desk")](seed=seed or 0)
    if "specs" in raw:
        profile.specs = _parse_specs(raw["specs"], profile.specs)
    for stage in ("pretrain", "finetune"):
        block = dict(raw.get(stage, {}))
        if not block and seed is None and modalities is None:
            continue
        if "modality_subset" in block:
            block["modality_subset"] = _parse_subset(block["modality_subset"])
        if modalities is not None:
            block["modality_subset"] = _parse_subset(modalities)
        if seed is not None:
            block["seed"] = seed
        cfg = getattr(profile, stage)
        if stage == "finetune" and "lr" not in block and "modality_subset" in block:
            block["lr"] = FINETUNE_LR.get(
                frozenset(k for k in block["modality_subset"] if k in MASKABLE),
                DEFAULT_FINETUNE_LR,
            )
        setattr(profile, stage, replace(cfg, **block))
    synth = raw.get("synth", {})
    profile.synth_n = int(synth.get("n", profile.synth_n))
    profile.synth_tiles = int(synth.get("tiles_per_patient", profile.synth_tiles))
    profile.synth_missing = {
        ModalityKind(k): float(v) for k, v in synth.get("missing_rates", {}).items()
    }
    return profile
