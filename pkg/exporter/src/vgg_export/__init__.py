"""Pretrained VGG19 conv-weight exporter for the portable TDLW format."""

__version__ = "0.1.0"
