"""PlainSeg: minimalist segmentation heads over a plain vision transformer."""

__version__ = "0.1.0"
