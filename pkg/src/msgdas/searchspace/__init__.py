from .genotype import CELL_TYPES, Genotype, count_skip_connect, derive_genotype, uniform_genotype, validate_genotype_dict
from .network import (ArchParams, EvalNetwork, NetworkSpec, SearchNetwork, SubGraphMasks, fixed_masks,
                      mixture_forward, sample_masks, subgraph_forward, supernet_teacher_forward)
from .ops import NUM_OPS, Module, OpKind, make_op
from .topology import EDGES, NUM_EDGES, NUM_NODES

__all__ = [
    "ArchParams", "CELL_TYPES", "EDGES", "EvalNetwork", "Genotype", "Module", "NUM_EDGES", "NUM_NODES",
    "NUM_OPS", "NetworkSpec", "OpKind", "SearchNetwork", "SubGraphMasks", "count_skip_connect",
    "derive_genotype", "fixed_masks", "make_op", "mixture_forward", "sample_masks", "subgraph_forward",
    "supernet_teacher_forward", "uniform_genotype", "validate_genotype_dict",
]
