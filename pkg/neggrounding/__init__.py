"""Negation-aware grounding toolkit.

Caption parsing and negation-boosted token merging, a low-rank adapter
kernel, described-object detection metrics and a negation dataset pipeline.
"""

from .errors import NegGroundingError
from .negtome import BoostConfig, merge
from .textparse import ParsedCaption, parse

__version__ = "0.1.0"

__all__ = ["BoostConfig", "NegGroundingError", "ParsedCaption", "merge", "parse", "__version__"]
