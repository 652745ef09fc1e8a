"""Predict-and-refine conditional diffusion for blind image deblurring, in numpy."""

__version__ = "0.1.0"
