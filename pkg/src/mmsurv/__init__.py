"""Masked multimodal autoencoding with missing-modality imputation and
discrete-time survival prediction."""

from .modalities import MASKABLE, ModalityKind, ModalitySpec, desk_specs, micro_specs, paper_specs

__all__ = [
    "MASKABLE",
    "ModalityKind",
    "ModalitySpec",
    "desk_specs",
    "micro_specs",
    "paper_specs",
]

__version__ = "0.1.0"
