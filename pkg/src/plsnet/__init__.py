"""Volumetric segmentation kit: depthwise-separable 3D convolutions, dilated
residual dense blocks, an asymmetric encoder-decoder, plus cost and
receptive-field analysis and segmentation metrics. NumPy only."""

__version__ = "0.1.0"
