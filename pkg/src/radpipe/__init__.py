"""Desk-scale radiology vision-language pipeline.

Subpackages cover the full chain: domain types and validation, adaptive
image tiling, masked/contrastive vision pretraining, instruction-aware
vision-language alignment, conditional text generation, interleaved
training-data augmentation, synthetic benchmark generation, automatic
metrics with bootstrap CIs, a rule-based clinical report labeler, and a
blinded human-rating service.
"""

__version__ = "0.1.0"
