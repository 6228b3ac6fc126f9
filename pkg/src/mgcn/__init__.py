"""Spectral graph-convolutional mesh autoencoder with a 2D image encoder, trained on synthetic faces."""

__version__ = "0.1.0"
