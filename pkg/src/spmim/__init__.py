"""Masked self-supervised pretraining for hierarchical CNNs.

Library layout:

- :mod:`spmim.tensor`: float64 tensors with reverse-mode autodiff.
- :mod:`spmim.masking`: patch-mask sampling and per-scale mask pyramids.
- :mod:`spmim.sparse`: mask-aware convolution blocks, masked batch norm,
  learned mask embeddings.
- :mod:`spmim.encoder`: hierarchical inverted-bottleneck encoder.
- :mod:`spmim.decoder`: lightweight upsampling decoder and image head.
- :mod:`spmim.training`: masked-MSE pretraining, fine-tuning, optimizer,
  checkpoints.
- :mod:`spmim.data`: image I/O, augmentation, quality control, splits.
- :mod:`spmim.metrics`: classification metrics, cross-validation,
  gradient-weighted class activation heatmaps.
- :mod:`spmim.cli`: command-line entry point.
"""

__version__ = "0.1.0"
