"""Modality registry: kinds, per-modality model/geometry settings, profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum


class ModalityKind(str, Enum):
    RNA = "rna"
    DNAM = "dnam"
    MRI = "mri"
    WSI = "wsi"
    CLINICAL = "clinical"


# Modalities that are patchified, masked, and reconstructed. Clinical
# features are a plain 3-vector and never participate in masking.
MASKABLE: tuple[ModalityKind, ...] = (
    ModalityKind.RNA,
    ModalityKind.DNAM,
    ModalityKind.MRI,
    ModalityKind.WSI,
)

CLINICAL_DIM = 3

_DEFAULT_LAYERS = {
    ModalityKind.RNA: 6,
    ModalityKind.DNAM: 6,
    ModalityKind.MRI: 4,
    ModalityKind.WSI: 4,
}


@dataclass(frozen=True)
class ModalitySpec:
    """Geometry and encoder size for one maskable modality.

    raw_shape is the per-sample array shape: (N,) for 1D omics, (D, H, W)
    for volumes, (H, W) or (H, W, C) for a single histology tile. A
    patient's WSI data carries an extra leading tile axis on top of
    raw_shape.
    """

    kind: ModalityKind
    raw_shape: tuple[int, ...]
    patch_size: tuple[int, ...]
    embed_dim: int = 256
    num_layers: int = 0  # 0 -> per-kind default
    num_heads: int = 4

    def __post_init__(self):
        if self.kind not in MASKABLE:
            raise ValueError(f"no ModalitySpec for {self.kind}")
        object.__setattr__(self, "raw_shape", tuple(int(v) for v in self.raw_shape))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if self.num_layers == 0:
            object.__setattr__(self, "num_layers", _DEFAULT_LAYERS[self.kind])
        spatial = self.spatial_shape
        if len(self.patch_size) != len(spatial):
            raise ValueError(
                f"{self.kind.value}: patch rank {len(self.patch_size)} does not "
                f"match spatial rank {len(spatial)}"
            )
        for p, s in zip(self.patch_size, spatial):
            if p <= 0:
                raise ValueError(f"{self.kind.value}: non-positive patch size {p}")
            if p > s:
                raise ValueError(
                    f"{self.kind.value}: patch size {p} exceeds raw extent {s}"
                )
        if len(self.patch_size) > 1 and any(p != s for p, s in zip(spatial, self.padded_shape)):
            raise ValueError(
                f"{self.kind.value}: spatial shape {spatial} not divisible by "
                f"patch {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"{self.kind.value}: heads {self.num_heads} do not divide "
                f"embed_dim {self.embed_dim}"
            )
        if self.kind is ModalityKind.MRI:
            side = self.patch_size[0]
            if any(p != side for p in self.patch_size):
                raise ValueError("mri patches must be cubic")
            r = math.isqrt(side)
            if r * r != side:
                raise ValueError(
                    "mri patch side must be a perfect square so it factors into "
                    "two equal-stride convolution stages"
                )

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        """raw_shape without the trailing channel axis (WSI only)."""
        if self.kind is ModalityKind.WSI and len(self.raw_shape) == 3:
            return self.raw_shape[:2]
        return self.raw_shape

    @property
    def channels(self) -> int:
        if self.kind is ModalityKind.WSI and len(self.raw_shape) == 3:
            return self.raw_shape[2]
        return 1

    @property
    def padded_shape(self) -> tuple[int, ...]:
        """Spatial shape after tail zero-padding to a patch multiple (1D only)."""
        return tuple(
            int(math.ceil(s / p)) * p for s, p in zip(self.spatial_shape, self.patch_size)
        )

    @property
    def num_patches(self) -> int:
        n = 1
        for s, p in zip(self.padded_shape, self.patch_size):
            n *= s // p
        return n

    @property
    def patch_numel(self) -> int:
        n = self.channels
        for p in self.patch_size:
            n *= p
        return n

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "raw_shape": list(self.raw_shape),
            "patch_size": list(self.patch_size),
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalitySpec":
        return cls(
            kind=ModalityKind(d["kind"]),
            raw_shape=tuple(d["raw_shape"]),
            patch_size=tuple(d["patch_size"]),
            embed_dim=int(d["embed_dim"]),
            num_layers=int(d["num_layers"]),
            num_heads=int(d["num_heads"]),
        )


SpecMap = dict[ModalityKind, ModalitySpec]


def paper_specs(embed_dim: int = 256) -> SpecMap:
    """Full-size geometry: 16,304-gene RNA vectors in 512-wide patches,
    25,978-site methylation in 1024-wide patches, 64**3 MRI crops in 16**3
    patches, 256x256 RGB tiles in 16x16 patches."""
    return {
        ModalityKind.RNA: ModalitySpec(ModalityKind.RNA, (16304,), (512,), embed_dim),
        ModalityKind.DNAM: ModalitySpec(ModalityKind.DNAM, (25978,), (1024,), embed_dim),
        ModalityKind.MRI: ModalitySpec(ModalityKind.MRI, (64, 64, 64), (16, 16, 16), embed_dim),
        ModalityKind.WSI: ModalitySpec(ModalityKind.WSI, (256, 256, 3), (16, 16), embed_dim),
    }


def desk_specs(embed_dim: int = 32, num_layers: int = 2) -> SpecMap:
    """Small geometry for CPU-scale runs and the acceptance suite."""
    mk = ModalityKind
    return {
        mk.RNA: ModalitySpec(mk.RNA, (32,), (16,), embed_dim, num_layers),
        mk.DNAM: ModalitySpec(mk.DNAM, (32,), (16,), embed_dim, num_layers),
        mk.MRI: ModalitySpec(mk.MRI, (8, 8, 8), (4, 4, 4), embed_dim, num_layers),
        mk.WSI: ModalitySpec(mk.WSI, (8, 8), (4, 4), embed_dim, num_layers),
    }


def micro_specs(embed_dim: int = 8, num_layers: int = 2, num_heads: int = 2) -> SpecMap:
    """Tiny geometry for finite-difference gradient checks."""
    mk = ModalityKind
    return {
        mk.RNA: ModalitySpec(mk.RNA, (8,), (4,), embed_dim, num_layers, num_heads),
        mk.DNAM: ModalitySpec(mk.DNAM, (8,), (4,), embed_dim, num_layers, num_heads),
        mk.MRI: ModalitySpec(mk.MRI, (4, 4, 4), (4, 4, 4), embed_dim, num_layers, num_heads),
        mk.WSI: ModalitySpec(mk.WSI, (8, 8), (4, 4), embed_dim, num_layers, num_heads),
    }
