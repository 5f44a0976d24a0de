"""Distributed matrix runtime: master-worker sessions over persistent tiled matrices."""

from .core import (GridMathError, Layout, LayoutError, MatrixDescriptor, Precision, TileExtent,
                   make_col_block_layout, make_grid_layout, make_row_block_layout,
                   make_single_tile_layout, tile_owner, validate_layout)
from .ops import Elementwise
from .session import (DistMatrix, ReplicationHandle, ReplicationState, Session, WorkerError)
from .transport import CostModel, Fabric, InProcess, Kind, Simulated, create_fabric

__version__ = "0.1.0"

__all__ = [
    "GridMathError", "Layout", "LayoutError", "MatrixDescriptor", "Precision", "TileExtent",
    "make_col_block_layout", "make_grid_layout", "make_row_block_layout", "make_single_tile_layout",
    "tile_owner", "validate_layout", "Elementwise", "DistMatrix", "ReplicationHandle",
    "ReplicationState", "Session", "WorkerError", "CostModel", "Fabric", "InProcess", "Kind",
    "Simulated", "create_fabric",
]
