"""Expert-text-guided multi-sequence lesion segmentation with a promptable,
LoRA-adapted ViT backbone."""

from .estimator import PGSAMSegmenter

__version__ = "0.1.0"

__all__ = ["PGSAMSegmenter", "__version__"]
