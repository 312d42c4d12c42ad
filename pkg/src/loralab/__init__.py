"""loralab: a desk-scale continual-learning laboratory.

Weighted composition of sequentially learned low-rank adapters with QR-based
orthogonality regularization, sensitivity-driven freezing of important
parameter matrices, pseudo-feature classifier adjustment, and Mahalanobis
task-ID inference -- on small fully differentiable backbones.
"""

__version__ = "0.1.0"

from .kernels import backend as kernel_backend  # noqa: F401
