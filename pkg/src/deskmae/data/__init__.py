"""Tiles, augmentations, synthetic data and manifest sampling."""
