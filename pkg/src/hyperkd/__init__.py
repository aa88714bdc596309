"""Cross-spectral knowledge distillation for hyperspectral masked autoencoders.

A frozen multispectral teacher supplies intermediate features that a
hyperspectral student matches while learning to reconstruct masked patches.
Masks are chosen from Gabor or Haar patch saliency. Everything runs on numpy
with a small reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
