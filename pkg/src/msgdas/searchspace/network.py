"""Super-net, single-path sub-graph and derived-network forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import tensorcore as tc
from ..errors import ContractError
from ..regularizers import DropState, identity_drop_forward
from ..sampler import sample_topk, ste_coefficient
from ..tensorcore import DTensor
from .genotype import CELL_TYPES, Genotype
from .ops import NUM_OPS, FactorizedReduce, Module, OpKind, ReLUConvBN, conv_weight, make_op
from .topology import EDGES, NUM_EDGES, NUM_INPUTS, NUM_NODES, incoming

# edge index -> [(op index, coefficient)] for one cell type
EdgePlan = Callable[[int], list]


@dataclass
class NetworkSpec:
    num_cells: int = 8
    init_channels: int = 16
    num_classes: int = 10
    in_channels: int = 3
    stem_multiplier: int = 3

    @classmethod
    def full(cls, num_classes: int = 10, in_channels: int = 3) -> "NetworkSpec":
        return cls(8, 16, num_classes, in_channels)

    @classmethod
    def desk(cls, num_classes: int = 2, in_channels: int = 3) -> "NetworkSpec":
        return cls(4, 8, num_classes, in_channels)

    @property
    def reduction_positions(self) -> tuple[int, int]:
        return (self.num_cells // 3, 2 * self.num_cells // 3)

    def cell_types(self) -> list[str]:
        red = set(self.reduction_positions)
        return ["reduce" if i in red else "normal" for i in range(self.num_cells)]


class ArchParams:
    """Architecture logits shared by every cell of the same type."""

    def __init__(self, normal=None, reduce=None):
        dtype = tc.default_dtype()
        self.normal = DTensor(np.zeros((NUM_EDGES, NUM_OPS), dtype) if normal is None else
                              np.array(normal, dtype=dtype), requires_grad=True)
        self.reduce = DTensor(np.zeros((NUM_EDGES, NUM_OPS), dtype) if reduce is None else
                              np.array(reduce, dtype=dtype), requires_grad=True)

    def tensor(self, cell_type: str) -> DTensor:
        return getattr(self, cell_type)

    def array(self, cell_type: str) -> np.ndarray:
        return getattr(self, cell_type).data

    def parameters(self) -> list[DTensor]:
        return [self.normal, self.reduce]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {ct: self.array(ct).copy() for ct in CELL_TYPES}


@dataclass
class SubGraphMasks:
    """K exclusive one-hot selections per edge, per cell type."""

    k: int
    hard: dict[str, np.ndarray]            # [K, edges, ops]
    index: dict[str, np.ndarray]           # [K, edges]
    soft: dict[str, list] = field(default_factory=dict)    # K DTensors [edges, ops]
    coeff: dict[str, list] = field(default_factory=dict)   # K straight-through DTensors

    def validate(self) -> None:
        for ct in CELL_TYPES:
            hard = self.hard[ct]
            if hard.shape != (self.k, NUM_EDGES, NUM_OPS):
                raise ContractError(f"{ct} mask has shape {hard.shape}")
            if not (np.isin(hard, (0, 1)).all() and (hard.sum(axis=-1) == 1).all()):
                raise ContractError(f"{ct} mask rows must be one-hot")
            if (hard.sum(axis=0) > 1).any():
                raise ContractError(f"{ct} masks are not mutually exclusive")

    def selections(self, cell_type: str) -> set[tuple[int, int]]:
        idx = self.index[cell_type]
        return {(e, int(idx[k, e])) for k in range(self.k) for e in range(NUM_EDGES)}


def sample_masks(alpha: ArchParams, k: int, tau: float, rng: np.random.Generator) -> SubGraphMasks:
    hard, index, soft, coeff = {}, {}, {}, {}
    for ct in CELL_TYPES:
        draws = sample_topk(alpha.tensor(ct), k, tau, rng)
        hard[ct] = np.stack([d.hard for d in draws])
        index[ct] = np.stack([d.index for d in draws])
        soft[ct] = [d.soft for d in draws]
        coeff[ct] = [ste_coefficient(d) for d in draws]
    return SubGraphMasks(k=k, hard=hard, index=index, soft=soft, coeff=coeff)


def fixed_masks(indices: dict[str, np.ndarray]) -> SubGraphMasks:
    """Masks from explicit op indices ``[K, edges]`` with plain (non-differentiable) coefficients."""
    hard, index, coeff = {}, {}, {}
    for ct in CELL_TYPES:
        idx = np.asarray(indices[ct], dtype=np.int64).reshape(-1, NUM_EDGES)
        index[ct] = idx
        hard[ct] = np.eye(NUM_OPS, dtype=tc.default_dtype())[idx]
        coeff[ct] = [DTensor(h) for h in hard[ct]]
    k = index[CELL_TYPES[0]].shape[0]
    return SubGraphMasks(k=k, hard=hard, index=index, soft={}, coeff=coeff)


class EdgeOps(Module):
    def __init__(self, channels, stride, rng):
        self.ops = [make_op(kind, channels, stride, rng) for kind in OpKind]


class SearchCell(Module):
    def __init__(self, c_pp, c_p, c, reduction, reduction_prev, rng):
        self.reduction = reduction
        self.pre0 = FactorizedReduce(c_pp, c, rng) if reduction_prev else ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng)
        self.edges = [EdgeOps(c, 2 if reduction and src < NUM_INPUTS else 1, rng) for src, _ in EDGES]

    def forward(self, s0, s1, plan: EdgePlan, drop: DropState | None = None):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(NUM_NODES):
            total = None
            for e in incoming(j):
                x = states[EDGES[e][0]]
                for op_idx, coef in plan(e):
                    out = self.edges[e].ops[op_idx](x)
                    if op_idx == OpKind.SkipConnect and drop is not None and drop.drop_prob > 0:
                        out = identity_drop_forward(out, coef, drop.mask(out.shape))
                    else:
                        out = tc.mul(coef, out)
                    total = out if total is None else tc.add(total, out)
            if total is None:
                stride = 2 if self.reduction else 1
                ref = states[1].data[:, :, ::stride, ::stride]
                total = DTensor(np.zeros_like(ref))
            states.append(total)
        return tc.concat(states[NUM_INPUTS:], axis=1)


class _Backbone(Module):
    def _build_stem(self, spec, rng):
        c_stem = spec.stem_multiplier * spec.init_channels
        self.stem = conv_weight(rng, c_stem, spec.in_channels, 3)
        return c_stem

    def _build_head(self, c_in, num_classes, rng):
        bound = 1.0 / np.sqrt(c_in)
        self.classifier_w = DTensor(rng.uniform(-bound, bound, (num_classes, c_in)).astype(tc.default_dtype()),
                                    requires_grad=True)
        self.classifier_b = DTensor(np.zeros(num_classes, tc.default_dtype()), requires_grad=True)

    def stem_forward(self, x) -> DTensor:
        return tc.batch_norm(tc.conv2d(tc.as_tensor(x), self.stem, 1, 1))

    def head_forward(self, s) -> DTensor:
        return tc.linear(tc.global_avg_pool(s), self.classifier_w, self.classifier_b)


class SearchNetwork(_Backbone):
    """Stem, stacked search cells and classifier; stem and head are shared by every sub-graph."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        c_curr = self._build_stem(spec, rng)
        c_pp, c_p, c = c_curr, c_curr, spec.init_channels
        types = spec.cell_types()
        self.cells = []
        reduction_prev = False
        for ct in types:
            reduction = ct == "reduce"
            if reduction:
                c *= 2
            self.cells.append(SearchCell(c_pp, c_p, c, reduction, reduction_prev, rng))
            reduction_prev = reduction
            c_pp, c_p = c_p, NUM_NODES * c
        self.cell_types = types
        self._build_head(c_p, spec.num_classes, rng)

    def forward(self, x, plans: dict[str, EdgePlan], drop: DropState | None = None) -> DTensor:
        s0 = s1 = self.stem_forward(x)
        for cell, ct in zip(self.cells, self.cell_types):
            s0, s1 = s1, cell(s0, s1, plans[ct], drop)
        return self.head_forward(s1)

    def shared_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if ".edges." not in n}

    def edge_parameter_names(self, selections: dict[str, set[tuple[int, int]]]) -> set[str]:
        """Parameter names belonging to the selected (edge, op) pairs in every cell."""
        names = set()
        for n, _ in self.named_parameters():
            if ".edges." not in n:
                continue
            parts = n.split(".")
            cell, edge, op = int(parts[1]), int(parts[3]), int(parts[5])
            if (edge, op) in selections[self.cell_types[cell]]:
                names.add(n)
        return names


def subgraph_forward(net: SearchNetwork, x, masks: SubGraphMasks, k: int,
                     drop_state: DropState | None = None) -> DTensor:
    """Logits of the ``k``-th single-path sub-graph."""
    if not 0 <= k < masks.k:
        raise ContractError(f"sub-graph index {k} out of range for K={masks.k}")
    masks.validate()
    plans = {}
    for ct in CELL_TYPES:
        idx = masks.index[ct][k]
        coeff = masks.coeff[ct][k]
        scalars = [tc.getitem(coeff, (e, int(idx[e]))) for e in range(NUM_EDGES)]
        plans[ct] = lambda e, idx=idx, scalars=scalars: [(int(idx[e]), scalars[e])]
    return net(x, plans, drop_state)


def mixture_forward(net: SearchNetwork, x, weights: dict[str, np.ndarray]) -> DTensor:
    """Every edge outputs ``sum_o w[e, o] * o(x)``; zero weights and the Zero op are skipped."""
    plans = {}
    for ct in CELL_TYPES:
        w = np.asarray(weights[ct])
        plans[ct] = lambda e, w=w: [(o, float(w[e, o])) for o in range(1, NUM_OPS) if w[e, o] != 0]
    return net(x, plans, None)


def supernet_teacher_forward(net: SearchNetwork, x, alpha: ArchParams, tau: float) -> DTensor:
    """Class probabilities of the noise-free super-net; nothing is recorded."""
    with tc.no_record():
        weights = {}
        for ct in CELL_TYPES:
            a = alpha.array(ct).astype(np.float64) / tau
            e = np.exp(a - a.max(axis=1, keepdims=True))
            weights[ct] = e / e.sum(axis=1, keepdims=True)
        return tc.softmax(mixture_forward(net, x, weights), axis=1)


class FixedCell(Module):
    def __init__(self, pairs, c_pp, c_p, c, reduction, reduction_prev, rng):
        self.reduction = reduction
        self.pre0 = FactorizedReduce(c_pp, c, rng) if reduction_prev else ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, rng)
        self.preds = [p for p, _ in pairs]
        self.ops = [make_op(op, c, 2 if reduction and p < NUM_INPUTS else 1, rng, search=False)
                    for p, op in pairs]

    def forward(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in range(NUM_NODES):
            a, b = 2 * j, 2 * j + 1
            states.append(tc.add(self.ops[a](states[self.preds[a]]), self.ops[b](states[self.preds[b]])))
        return tc.concat(states[NUM_INPUTS:], axis=1)


class EvalNetwork(_Backbone):
    """Network built from a derived genotype, trained from scratch."""

    def __init__(self, genotype: Genotype, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = spec
        c_curr = self._build_stem(spec, rng)
        c_pp, c_p, c = c_curr, c_curr, spec.init_channels
        self.cells = []
        reduction_prev = False
        for ct in spec.cell_types():
            reduction = ct == "reduce"
            if reduction:
                c *= 2
            self.cells.append(FixedCell(genotype.cell(ct), c_pp, c_p, c, reduction, reduction_prev, rng))
            reduction_prev = reduction
            c_pp, c_p = c_p, NUM_NODES * c
        self._build_head(c_p, spec.num_classes, rng)

    def forward(self, x) -> DTensor:
        s0 = s1 = self.stem_forward(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.head_forward(s1)
