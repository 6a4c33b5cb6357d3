"""Federated classifiers that share a conditional GAN and distill on its samples."""

__version__ = "0.1.0"
