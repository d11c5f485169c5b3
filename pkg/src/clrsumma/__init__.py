"""Clustered low-rank matrices and multiple-issue SUMMA on a simulated grid."""

from clrsumma.clr import Block, Kind
from clrsumma.gen import ClusterGeometry, coulomb_matrix, overlap_matrix
from clrsumma.runtime import ProcessGrid, spawn_grid
from clrsumma.solver import InvSqrtResult, inv_sqrt
from clrsumma.summa import multiply, multiply_single_issue, run_multiply
from clrsumma.tiling import TiledMatrix, Tiling, from_dense, gather_dense

__version__ = "0.1.0"

__all__ = [
    "Block",
    "ClusterGeometry",
    "InvSqrtResult",
    "Kind",
    "ProcessGrid",
    "TiledMatrix",
    "Tiling",
    "coulomb_matrix",
    "from_dense",
    "gather_dense",
    "inv_sqrt",
    "multiply",
    "multiply_single_issue",
    "overlap_matrix",
    "run_multiply",
    "spawn_grid",
]
