"""Desk-scale multi-stream end-to-end recognizer.

Per-stream recurrent encoders feed frame-level content attention; a second
attention level fuses the per-stream context vectors. Training combines the
attention decoder objective with per-encoder CTC; decoding is a joint
label-synchronous beam search with optional shallow LM fusion.
"""

from mstream.errors import DataFormatError, DivergenceError, ScorerStateError

__version__ = "0.1.0"

__all__ = ["DataFormatError", "DivergenceError", "ScorerStateError", "__version__"]
