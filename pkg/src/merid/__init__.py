"""Retinex-decoupled low-light enhancement feeding a small gaussian splatting reconstructor."""

__version__ = "0.1.0"
