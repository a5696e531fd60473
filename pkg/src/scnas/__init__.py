"""Stochastic differentiable cell search for encoder-decoder segmentation networks."""

from .genotype import Genotype, derive, deserialize, serialize
from .ops import CATALOG_VERSION, FULL_CATALOG, OperationKind
from .search_space import ArchitectureParams, CellType, Network, NetworkSpec, build_network, count_flops
from .tensor import Tensor

__version__ = "0.1.0"
