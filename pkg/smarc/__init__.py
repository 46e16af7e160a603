"""Mask-aware partial-convolution U-Net for joint reconstruction and classification."""
from smarc.utils import TOOL_VERSION as __version__

__all__ = ["__version__"]
