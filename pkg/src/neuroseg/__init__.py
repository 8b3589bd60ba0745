"""Neuronal cell segmentation: hybrid topology-aware loss, multi-scale attention
encoder-decoder, and the surrounding data/evaluation pipeline."""

__version__ = "0.1.0"
