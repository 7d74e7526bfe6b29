"""Chained-GAN scar simulation on cardiac MR slices.

Pipeline stages: phantom dataset generation, mask-shape GAN, heuristic
intensity painting, refining GAN, blending/augmentation, segmentation
training, evaluation metrics, and the reader-study service.
"""

__version__ = "0.1.0"
