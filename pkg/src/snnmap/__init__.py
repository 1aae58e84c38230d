"""Mapping compiler and pipeline simulator for a multi-SLR spiking-CNN accelerator."""

__version__ = "0.1.0"
