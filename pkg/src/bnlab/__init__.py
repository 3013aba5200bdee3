"""Batch-normalization training dynamics toolkit.

Subpackages:
  tensor       float64 array ops, seeded streams, 3x3 conv, Gram spectra
  nn           layers, batch norm with ablatable components, SGD
  diagnostics  moment profiles, divergence capture, gradient coherence
  rmt          spectra of products of Gaussian matrices
  noise        minibatch gradient noise constants and bounds
  harness      configs, datasets, training loops, CSV/JSON emission, CLI
"""

__version__ = "0.1.0"
