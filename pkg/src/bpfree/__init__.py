"""Backpropagation-free training of tensor-train compressed networks.

Zeroth-order optimizers, TT layers, sparse-grid Stein derivative estimates
and the MNIST and HJB experiments built on them.
"""

__version__ = "0.1.0"
