"""Listener head-motion generation: VQ motion tokens, mask-and-replace
discrete diffusion, cross-modal speaker conditioning, and the matching
metric suite, exercised end to end on synthetic dyadic data."""

__version__ = "0.1.0"

from .errors import (DegenerateState, FormatError, InvalidConfig, InvalidInput,
                     ListenMotionError, ModelError, TrainingError)

__all__ = [
    "DegenerateState", "FormatError", "InvalidConfig", "InvalidInput",
    "ListenMotionError", "ModelError", "TrainingError", "__version__",
]
