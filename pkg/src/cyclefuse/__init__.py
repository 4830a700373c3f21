"""Cycle-trained, cross-fused conditional diffusion for desk-scale face synthesis.

Three condition streams (identity, expression deviation, landmarks) are fused
by a cyclic cross-attention exchange and drive a small U-Net noise predictor.
Training runs a two-pass "cycle" objective; evaluation includes an aligned,
round-trip variant of the Frechet distance where a perfect model scores 0.
"""

__version__ = "0.1.0"
