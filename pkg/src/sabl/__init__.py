"""Side-aware boundary localization: bucketing targets, attention head, evaluation and a synthetic benchmark."""

from .bucketing import decode_box, encode_box
from .geometry import Box, iou

__all__ = ["Box", "iou", "encode_box", "decode_box"]
__version__ = "0.1.0"
