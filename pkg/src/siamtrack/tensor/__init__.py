"""Minimal numpy tensor layer: conv/batchnorm/relu kernels, the embedding network, Adam, checkpoints."""
