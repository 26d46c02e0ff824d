"""Ultrasound nerve-trunk segmentation pipeline.

Preprocessing (device ROI crops, six-fold augmentation, CLAHE), an
attention U-Net with a combined Lovász-hinge / cross-entropy loss,
k-fold cross-validated training, and rater-comparison analytics.
Runs end to end on synthetic speckle phantoms at desk scale.
"""

__version__ = "0.1.0"
