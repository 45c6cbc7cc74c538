"""Tile-based volumetric segmentation with majority-vote fusion and a
mixed-cohort transfer-learning harness, evaluated on synthetic phantoms."""

__version__ = "0.1.0"
