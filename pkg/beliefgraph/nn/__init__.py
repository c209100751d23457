"""Minimal numpy autodiff substrate: tensors, layers, optimizers and checkpoints."""
