"""Siamese fully-convolutional landmark tracking with a temporal location prior."""

__version__ = "0.1.0"
