"""Modular duplex attention: Gram-based cross-modal key alignment and
pseudo-score attention masks, with attention-disparity diagnostics and a
small trainable multimodal transformer."""

__version__ = "0.1.0"
