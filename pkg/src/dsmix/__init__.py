"""Doubly stochastic residual-stream mixing: Sinkhorn-Knopp projection vs exact
permutation-basis construction, with gradients and stability diagnostics."""

from .birkhoff import PermBasis, birkhoff_decompose, build_basis, combine
from .hyperblock import BlockParams, MixMaps, Variant, block_forward, compute_maps, init_params
from .matcore import CapacityError, DomainError, DSError, ds_error, relative_range
from .sinkhorn import SKReport, adverse_matrix, sk_normalize, sk_step

__version__ = "0.1.0"

__all__ = [
    "BlockParams", "CapacityError", "DSError", "DomainError", "MixMaps", "PermBasis",
    "SKReport", "Variant", "adverse_matrix", "birkhoff_decompose", "block_forward",
    "build_basis", "combine", "compute_maps", "ds_error", "init_params", "relative_range",
    "sk_normalize", "sk_step",
]
