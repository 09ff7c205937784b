"""Disparity posteriors for light fields: synthetic multimodal data, a small
numpy autodiff engine, four posterior heads and their evaluation."""

__version__ = "0.1.0"
