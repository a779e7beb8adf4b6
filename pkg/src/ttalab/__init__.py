"""ttalab: threshold-triggered, Fisher-preconditioned test-time adaptation
of a toy autoregressive generator, with the oracles and analysis tools used
to certify each moving part."""

from .genmodel import (
    AdapterParams,
    GenerationSettings,
    NgramOneHot,
    ToyLM,
    Vocabulary,
    init_adapter,
)

__all__ = [
    "AdapterParams",
    "GenerationSettings",
    "NgramOneHot",
    "ToyLM",
    "Vocabulary",
    "init_adapter",
]

__version__ = "0.1.0"
