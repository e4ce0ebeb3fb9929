"""Triplet squeeze-and-excitation attention on a small numpy autodiff engine."""
