"""Visual grounding as coordinate-token sequence prediction, on plain numpy."""

from .codec import ShuffleMode, Vocabulary, dequantize, quantize
from .geometry import BoundingBox, extract_contour, mask_iou, rasterize_polygon, sample_contour
from .model import GroundingModel, ModelConfig

__all__ = [
    "BoundingBox", "GroundingModel", "ModelConfig", "ShuffleMode", "Vocabulary",
    "dequantize", "extract_contour", "mask_iou", "quantize", "rasterize_polygon", "sample_contour",
]
__version__ = "0.1.0"
