"""Cell DAGs and the encoder-decoder macro network built from them.

Layout for depth ``D``::

    stem -> [Reduction, EncoderNormal] x D -> inter (EncoderNormal structure)
         -> [Expansion, DecoderNormal] x D -> out

Every cell takes the outputs of the two previous cells (the first reduction
takes the stem output twice). Decoder-side outputs are summed with the encoder
feature of the same level before they are fed to a later cell.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ops as O
from . import tensor as T
from .ops import OperationKind
from .tensor import Tensor


class CellType(enum.IntEnum):
    EncoderNormal = 0
    Reduction = 1
    DecoderNormal = 2
    Expansion = 3


def cell_edges(num_intermediate: int) -> list[tuple[int, int]]:
    """Edges ``(i, j)`` in lexicographic order.

    Nodes 0 and 1 are the cell inputs, nodes ``2..B+1`` the intermediates.
    """
    return sorted((i, j) for j in range(2, num_intermediate + 2) for i in range(j))


@dataclass(frozen=True)
class CellTemplate:
    cell_type: CellType
    num_intermediate: int = 4

    @property
    def edges(self) -> list[tuple[int, int]]:
        return cell_edges(self.num_intermediate)

    @property
    def num_edges(self) -> int:
        return sum(2 + k for k in range(self.num_intermediate))


@dataclass
class EdgeSelection:
    """Weights for the active kinds of one edge.

    ``weights[k]`` belongs to ``kinds[k]``; kinds not listed have weight 0.
    """

    weights: Tensor
    kinds: tuple[OperationKind, ...]

    @classmethod
    def one_hot(cls, kind: OperationKind) -> EdgeSelection:
        return cls(Tensor(np.ones(1)), (OperationKind(kind),))

    @classmethod
    def relaxed(cls, weights: Tensor, catalog: Sequence[OperationKind]) -> EdgeSelection:
        return cls(weights, tuple(catalog))

    def dense(self, catalog: Sequence[OperationKind]) -> np.ndarray:
        out = np.zeros(len(catalog))
        for w, k in zip(self.weights.data, self.kinds):
            out[list(catalog).index(k)] = w
        return out


Selection = Mapping[CellType, Sequence[EdgeSelection]]


class ArchitectureParams:
    """Per cell type, a ``(num_edges, len(catalog))`` logit matrix."""

    def __init__(self, catalog: Sequence[OperationKind] = O.FULL_CATALOG, num_intermediate: int = 4,
                 init_scale: float = 1e-3, seed: int | None = 0):
        self.catalog = tuple(OperationKind(k) for k in catalog)
        self.num_intermediate = num_intermediate
        n_edges = CellTemplate(CellType.EncoderNormal, num_intermediate).num_edges
        rng = np.random.default_rng(seed)
        self.logits: dict[CellType, Tensor] = {}
        for ct in CellType:
            init = init_scale * rng.standard_normal((n_edges, len(self.catalog))) if init_scale else np.zeros(
                (n_edges, len(self.catalog)))
            self.logits[ct] = Tensor(init, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.logits[ct] for ct in CellType]

    def count(self) -> int:
        return sum(t.size for t in self.parameters())

    def probabilities(self, cell_type: CellType) -> np.ndarray:
        a = self.logits[cell_type].data
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def entropy(self, cell_type: CellType) -> float:
        """Mean entropy of softmax(alpha) over the edges of one cell type."""
        p = self.probabilities(cell_type)
        return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())

    def relaxed_selection(self, tau: float = 1.0) -> dict[CellType, list[EdgeSelection]]:
        """Plain softmax(alpha / tau) on every edge, all kinds active."""
        sel = {}
        for ct in CellType:
            rows = []
            for e in range(self.logits[ct].shape[0]):
                w = T.softmax(self.logits[ct][e] * (1.0 / tau))
                rows.append(EdgeSelection.relaxed(w, self.catalog))
            sel[ct] = rows
        return sel


@dataclass(frozen=True)
class NetworkSpec:
    stem_channels: int = 8
    depth: int = 3
    nodes: int = 4
    spatial_dims: int = 3
    input_channels: int = 1
    num_classes: int = 2
    patch: tuple[int, ...] = (16, 16, 16)

    def __post_init__(self):
        if len(self.patch) != self.spatial_dims:
            raise ValueError(f"patch {self.patch} does not have {self.spatial_dims} spatial dims")
        if self.stem_channels < 1 or self.depth < 1 or self.nodes < 1:
            raise ValueError("stem_channels, depth and nodes must be positive")
        if self.input_channels < 1 or self.num_classes < 2:
            raise ValueError("need >= 1 input channel and >= 2 classes")
        check_divisible(self.patch, self.depth)

    def width(self, level: int) -> int:
        """Cell working width at resolution level ``level``."""
        return self.stem_channels * 2**level

    def replace(self, **changes) -> NetworkSpec:
        return dataclasses.replace(self, **changes)


def check_divisible(spatial: Sequence[int], depth: int) -> None:
    f = 2**depth
    if any(s % f for s in spatial):
        raise ValueError(f"spatial extents {tuple(spatial)} are not divisible by 2^{depth}={f}")


@dataclass(frozen=True)
class CellPlan:
    index: int
    cell_type: CellType
    name: str
    level: int  # resolution level at which the DAG runs its inputs
    out_level: int
    width: int
    sources: tuple[int, int]  # feature indices (-1 is the stem)
    source_levels: tuple[int, int]
    source_channels: tuple[int, int]


def plan_network(spec: NetworkSpec) -> list[CellPlan]:
    """Static cell sequence with levels, widths and input wiring."""
    D, B = spec.depth, spec.nodes
    layout: list[tuple[CellType, str, int, int, int]] = []  # type, name, dag level, out level, width level
    for l in range(1, D + 1):
        layout.append((CellType.Reduction, f"red{l}", l - 1, l, l))
        layout.append((CellType.EncoderNormal, f"enc{l}", l, l, l))
    layout.append((CellType.EncoderNormal, "inter", D, D, D))
    for l in range(D, 0, -1):
        layout.append((CellType.Expansion, f"exp{l}", l - 1, l - 1, l - 1))
        layout.append((CellType.DecoderNormal, f"dec{l}", l - 1, l - 1, l - 1))

    feat_levels = {-1: 0}
    feat_channels = {-1: spec.stem_channels}
    plans = []
    for idx, (ct, name, level, out_level, wl) in enumerate(layout):
        s_prev = idx - 1 if idx >= 1 else -1
        s_prev2 = idx - 2 if idx >= 2 else -1
        sources = (s_prev2, s_prev)
        width = spec.width(wl)
        plans.append(CellPlan(
            idx, ct, name, level, out_level, width, sources,
            (feat_levels[s_prev2], feat_levels[s_prev]),
            (feat_channels[s_prev2], feat_channels[s_prev]),
        ))
        feat_levels[idx] = out_level
        feat_channels[idx] = B * width
    return plans


class Preprocess:
    """1^d conv + InstanceNorm mapping an input to the cell's working width.

    ``shift`` is the source level minus the level the DAG runs at: -1 means the
    source has twice the resolution (stride-2 conv), +1 half (nearest upsample
    before the conv).
    """

    def __init__(self, cin: int, cout: int, shift: int, rng: np.random.Generator, ndim: int):
        if shift not in (-1, 0, 1):
            raise ValueError(f"cannot bridge a level gap of {shift}")
        self.shift = shift
        self.cin, self.cout = cin, cout
        self.weight = O.kaiming_normal(rng, (cout, cin) + (1,) * ndim)
        self.scale = Tensor(np.ones(cout), requires_grad=True)
        self.shift_param = Tensor(np.zeros(cout), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.scale, self.shift_param]

    def __call__(self, x: Tensor) -> Tensor:
        if self.shift == 1:
            x = T.upsample_nearest(x, 2)
        y = T.conv(x, self.weight, stride=2 if self.shift == -1 else 1)
        return T.affine_channels(T.instance_norm(y, O.NORM_EPS), self.scale, self.shift_param)

    def flops(self, out_spatial: Sequence[int]) -> int:
        return preprocess_flops(self.cin, self.cout, out_spatial)


def preprocess_flops(cin: int, cout: int, out_spatial: Sequence[int]) -> int:
    return 2 * cin * cout * math.prod(out_spatial)


def cell_forward(
    template: CellTemplate,
    selection: Sequence[EdgeSelection],
    edge_ops: Sequence[Mapping[OperationKind, O.Operation]],
    in0: Tensor,
    in1: Tensor,
) -> Tensor:
    """Evaluate the cell DAG on already preprocessed inputs.

    Each intermediate node is the sum over its incoming edges of the weighted
    mixture ``sum_o z_o * o(x_i)``; the output concatenates all intermediates.
    """
    if in0.shape != in1.shape:
        raise ValueError(f"{template.cell_type.name}: preprocessed inputs differ: {in0.shape} vs {in1.shape}")
    edges = template.edges
    if len(selection) != len(edges) or len(edge_ops) != len(edges):
        raise ValueError(f"{template.cell_type.name}: expected {len(edges)} edges")
    reduce = template.cell_type == CellType.Reduction
    node_shape = in0.shape[:2] + (O.out_spatial(in0.shape[2:], 2) if reduce else in0.shape[2:])
    incoming: dict[int, list[Tensor]] = {j: [] for j in range(2, template.num_intermediate + 2)}
    nodes: dict[int, Tensor] = {0: in0, 1: in1}
    for j in range(2, template.num_intermediate + 2):
        for e, (i, jj) in enumerate(edges):
            if jj != j:
                continue
            sel = selection[e]
            x = nodes[i]
            for k, kind in enumerate(sel.kinds):
                if kind == OperationKind.Zero:
                    continue
                y = O.apply(edge_ops[e][kind], x)
                w = sel.weights
                if not w.requires_grad and len(sel.kinds) == 1 and w.data[0] == 1.0:
                    incoming[j].append(y)
                else:
                    incoming[j].append(T.getitem(w, k) * y)
        terms = incoming[j]
        nodes[j] = T.add_n(terms) if terms else T.zeros(node_shape)
    return T.concat_channels([nodes[j] for j in range(2, template.num_intermediate + 2)])


class Cell:
    def __init__(self, plan: CellPlan, spec: NetworkSpec, kinds_per_edge: Sequence[Sequence[OperationKind]],
                 rng: np.random.Generator):
        self.plan = plan
        self.template = CellTemplate(plan.cell_type, spec.nodes)
        nd = spec.spatial_dims
        c = plan.width
        expand = plan.cell_type == CellType.Expansion
        self.pre = []
        for cin, lvl in zip(plan.source_channels, plan.source_levels):
            # expansion cells receive inputs one level coarser than the DAG level
            self.pre.append(Preprocess(cin, c, lvl - plan.level, rng, nd))
        self.edge_ops: list[dict[OperationKind, O.Operation]] = []
        for e, (i, j) in enumerate(self.template.edges):
            stride = 2 if plan.cell_type == CellType.Reduction and i < 2 else 1
            ops = {}
            for kind in kinds_per_edge[e]:
                label = f"{plan.name} edge ({i},{j})"
                ops[OperationKind(kind)] = O.instantiate(kind, c, stride, rng, nd, label)
            self.edge_ops.append(ops)
        self._expand = expand

    def parameters(self) -> list[Tensor]:
        params = [p for pre in self.pre for p in pre.parameters()]
        for ops in self.edge_ops:
            for op in ops.values():
                params.extend(op.parameters())
        return params

    def __call__(self, in0: Tensor, in1: Tensor, selection: Sequence[EdgeSelection]) -> Tensor:
        s0, s1 = self.pre[0](in0), self.pre[1](in1)
        return cell_forward(self.template, selection, self.edge_ops, s0, s1)


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape)


class Network:
    """Encoder-decoder network assembled from cells.

    With ``genotype=None`` every edge carries one instance of every catalog
    kind (the relaxed super-network) and ``forward`` needs a selection. With a
    genotype each edge owns only its chosen kind.
    """

    def __init__(self, spec: NetworkSpec, catalog: Sequence[OperationKind] = O.FULL_CATALOG,
                 genotype=None, seed: int = 0):
        self.spec = spec
        self.catalog = tuple(OperationKind(k) for k in catalog)
        self.genotype = genotype
        self.plans = plan_network(spec)
        nd = spec.spatial_dims
        rng = np.random.default_rng(seed)
        S, B = spec.stem_channels, spec.nodes
        self.stem_weight = O.kaiming_normal(rng, (S, spec.input_channels) + (3,) * nd)
        self.stem_scale = Tensor(np.ones(S), requires_grad=True)
        self.stem_shift = Tensor(np.zeros(S), requires_grad=True)
        # full-resolution skip: stem features widened to the level-0 decoder width
        self.skip0 = Preprocess(S, B * S, 0, rng, nd)
        self.cells: list[Cell] = []
        n_edges = CellTemplate(CellType.EncoderNormal, B).num_edges
        for plan in self.plans:
            if genotype is None:
                kinds = [self.catalog] * n_edges
            else:
                kinds = [(k,) for k in genotype.kinds(plan.cell_type)]
            self.cells.append(Cell(plan, spec, kinds, rng))
        self.out_weight = O.kaiming_normal(rng, (spec.num_classes, B * S) + (1,) * nd)
        self.out_bias = Tensor(np.zeros(spec.num_classes), requires_grad=True)
        self.trace: list[str] = []

    def parameters(self) -> list[Tensor]:
        params = [self.stem_weight, self.stem_scale, self.stem_shift]
        params += self.skip0.parameters()
        for cell in self.cells:
            params += cell.parameters()
        params += [self.out_weight, self.out_bias]
        return params

    def fixed_selection(self) -> dict[CellType, list[EdgeSelection]]:
        if self.genotype is None:
            raise ValueError("a relaxed network needs an explicit selection")
        return {ct: [EdgeSelection.one_hot(k) for k in self.genotype.kinds(ct)] for ct in CellType}

    def forward(self, x: Tensor, selection: Selection | None = None) -> Tensor:
        x = T.as_tensor(x)
        spec = self.spec
        if x.ndim != spec.spatial_dims + 2 or x.shape[1] != spec.input_channels:
            raise ValueError(f"input shape {x.shape} does not match spec {spec}")
        check_divisible(x.shape[2:], spec.depth)
        if selection is None:
            selection = self.fixed_selection()
        stem = T.conv(x, self.stem_weight)
        stem = T.affine_channels(T.instance_norm(stem, O.NORM_EPS), self.stem_scale, self.stem_shift)
        enc_skip: dict[int, Tensor] = {0: self.skip0(stem)}
        feats: dict[int, Tensor] = {-1: stem}
        self.trace = []
        last = None
        for cell in self.cells:
            p = cell.plan
            in0, in1 = feats[p.sources[0]], feats[p.sources[1]]
            out = cell(in0, in1, selection[p.cell_type])
            self.trace.append(
                f"cell {p.index} {p.cell_type.name} in0={_shape_str(in0.shape)} "
                f"in1={_shape_str(in1.shape)} out={_shape_str(out.shape)}"
            )
            last = out
            if p.cell_type == CellType.EncoderNormal and p.name != "inter":
                enc_skip[p.out_level] = out
            if p.cell_type in (CellType.Expansion, CellType.DecoderNormal):
                skip = enc_skip[p.out_level]
                if skip.shape != out.shape:
                    raise AssertionError(f"skip shape {skip.shape} != decoder output {out.shape} at {p.name}")
                out = out + skip
            feats[p.index] = out
        logits = T.conv(last, self.out_weight)
        view = (1, -1) + (1,) * spec.spatial_dims
        return logits + T.reshape(self.out_bias, view)

    __call__ = forward


def build_network(spec: NetworkSpec, genotype=None, catalog: Sequence[OperationKind] = O.FULL_CATALOG,
                  seed: int = 0) -> Network:
    return Network(spec, catalog=catalog, genotype=genotype, seed=seed)


def count_flops(spec: NetworkSpec, genotype) -> int:
    """FLOPs of one forward pass at ``spec.patch`` for a discrete genotype.

    Counts convolutions (stem, preprocessing, edge ops, skip widening, out cell)
    as 2 x MACs plus pooling window reads; normalization and activations are
    not counted.
    """
    nd = spec.spatial_dims
    S, B = spec.stem_channels, spec.nodes
    patch = tuple(spec.patch)

    def spatial(level):
        return tuple(s // 2**level for s in patch)

    total = 2 * 3**nd * spec.input_channels * S * math.prod(patch)  # stem
    total += preprocess_flops(S, B * S, patch)  # full-resolution skip widening
    total += 2 * B * S * spec.num_classes * math.prod(patch)  # out cell
    edges = cell_edges(B)
    for plan in plan_network(spec):
        for cin in plan.source_channels:
            total += preprocess_flops(cin, plan.width, spatial(plan.level))
        for (i, j), kind in zip(edges, genotype.kinds(plan.cell_type)):
            stride = 2 if plan.cell_type == CellType.Reduction and i < 2 else 1
            src = spatial(plan.level) if stride == 2 or plan.cell_type != CellType.Reduction else spatial(
                plan.out_level)
            total += O.kind_flops(kind, plan.width, stride, src)
    return total
