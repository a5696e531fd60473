"""Discrete architectures: derivation, text format, width scaling and transfer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ops import CATALOG_VERSION, FULL_CATALOG, OperationKind
from .search_space import ArchitectureParams, CellType, Network, NetworkSpec, cell_edges

FORMAT_HEADER = "scnas-genotype v1"


class GenotypeError(ValueError):
    pass


class CatalogVersionError(GenotypeError):
    def __init__(self, found: str, expected: str = CATALOG_VERSION):
        super().__init__(f"catalog version mismatch: file has {found}, this build has {expected}")
        self.found = found
        self.expected = expected


@dataclass(frozen=True)
class Genotype:
    cells: dict  # CellType -> tuple of ((i, j), OperationKind), lexicographic edge order
    num_intermediate: int = 4
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        edges = cell_edges(self.num_intermediate)
        for ct in CellType:
            if ct not in self.cells:
                raise GenotypeError(f"missing cell type {ct.name}")
            got = [e for e, _ in self.cells[ct]]
            if got != edges:
                raise GenotypeError(f"[{ct.name}] edges {got} do not match template {edges}")

    @classmethod
    def from_kinds(cls, kinds: dict, num_intermediate: int = 4, provenance: dict | None = None) -> Genotype:
        edges = cell_edges(num_intermediate)
        cells = {
            CellType(ct): tuple((e, OperationKind(k)) for e, k in zip(edges, kinds[ct])) for ct in CellType
        }
        return cls(cells, num_intermediate, dict(provenance or {}))

    @classmethod
    def uniform(cls, kind: OperationKind, num_intermediate: int = 4) -> Genotype:
        n = len(cell_edges(num_intermediate))
        return cls.from_kinds({ct: [kind] * n for ct in CellType}, num_intermediate)

    def kinds(self, cell_type: CellType) -> list[OperationKind]:
        return [k for _, k in self.cells[CellType(cell_type)]]

    def structural_hash(self) -> str:
        payload = serialize(self, with_provenance=False)
        return hashlib.sha256(payload.encode()).hexdigest()

    def __hash__(self):
        return hash(self.structural_hash())

    def __eq__(self, other):
        if not isinstance(other, Genotype):
            return NotImplemented
        return self.num_intermediate == other.num_intermediate and all(
            self.cells[ct] == other.cells[ct] for ct in CellType
        )


def derive(alpha: ArchitectureParams, provenance: dict | None = None) -> Genotype:
    """Pick the highest-logit kind on every edge; ties go to the lower catalog index."""
    kinds = {}
    for ct in CellType:
        logits = alpha.logits[ct].data
        if not np.all(np.isfinite(logits)):
            raise ValueError(f"non-finite logits in {ct.name}")
        kinds[ct] = [alpha.catalog[int(np.argmax(row))] for row in logits]
    return Genotype.from_kinds(kinds, alpha.num_intermediate, provenance)


def random_genotype(rng: np.random.Generator, catalog: Sequence[OperationKind] = FULL_CATALOG,
                    num_intermediate: int = 4) -> Genotype:
    n = len(cell_edges(num_intermediate))
    kinds = {ct: [catalog[int(i)] for i in rng.integers(0, len(catalog), size=n)] for ct in CellType}
    return Genotype.from_kinds(kinds, num_intermediate)


def serialize(g: Genotype, with_provenance: bool = True) -> str:
    lines = [FORMAT_HEADER, f"catalog {CATALOG_VERSION}", f"nodes {g.num_intermediate}"]
    if with_provenance and g.provenance:
        items = " ".join(f"{k}={g.provenance[k]}" for k in sorted(g.provenance))
        lines.append(f"provenance {items}")
    for ct in CellType:
        lines.append(f"[{ct.name}]")
        for (i, j), kind in g.cells[ct]:
            lines.append(f"edge {i} {j} {kind.name}")
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> Genotype:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise GenotypeError(f"line 1: expected header {FORMAT_HEADER!r}")
    nodes = 4
    provenance: dict = {}
    blocks: dict[CellType, dict] = {}
    current: CellType | None = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("catalog "):
            version = line.split(None, 1)[1]
            if version != CATALOG_VERSION:
                raise CatalogVersionError(version)
        elif line.startswith("nodes "):
            try:
                nodes = int(line.split()[1])
            except (IndexError, ValueError):
                raise GenotypeError(f"line {lineno}: malformed nodes line {line!r}") from None
            if nodes < 1:
                raise GenotypeError(f"line {lineno}: nodes must be >= 1")
        elif line.startswith("provenance"):
            for item in line.split()[1:]:
                key, _, value = item.partition("=")
                provenance[key] = value
        elif line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            try:
                current = CellType[name]
            except KeyError:
                raise GenotypeError(f"line {lineno}: unknown cell type {name!r}") from None
            if current in blocks:
                raise GenotypeError(f"line {lineno}: duplicate block [{name}]")
            blocks[current] = {}
        elif line.startswith("edge "):
            parts = line.split()
            if current is None:
                raise GenotypeError(f"line {lineno}: edge outside of a cell block")
            if len(parts) != 4:
                raise GenotypeError(f"line {lineno}: malformed edge line {line!r}")
            try:
                i, j = int(parts[1]), int(parts[2])
            except ValueError:
                raise GenotypeError(f"line {lineno}: malformed edge line {line!r}") from None
            if not i < j:
                raise GenotypeError(f"line {lineno}: edge ({i}, {j}) violates i < j")
            try:
                kind = OperationKind.parse(parts[3])
            except ValueError:
                raise GenotypeError(f"line {lineno}: unknown operation kind {parts[3]!r}") from None
            if (i, j) in blocks[current]:
                raise GenotypeError(f"line {lineno}: duplicate edge ({i}, {j}) in [{current.name}]")
            blocks[current][(i, j)] = kind
        else:
            raise GenotypeError(f"line {lineno}: unrecognized line {line!r}")
    edges = cell_edges(nodes)
    cells = {}
    for ct in CellType:
        if ct not in blocks:
            raise GenotypeError(f"missing block [{ct.name}]")
        found = blocks[ct]
        for e in edges:
            if e not in found:
                raise GenotypeError(f"missing edge ({e[0]}, {e[1]}) in [{ct.name}]")
        extra = set(found) - set(edges)
        if extra:
            e = sorted(extra)[0]
            raise GenotypeError(f"edge ({e[0]}, {e[1]}) in [{ct.name}] is not part of a {nodes}-node cell")
        cells[ct] = tuple((e, found[e]) for e in edges)
    return Genotype(cells, nodes, provenance)


def save(g: Genotype, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(g))


def load(path) -> Genotype:
    with open(path) as fh:
        return deserialize(fh.read())


def scale_channels(spec: NetworkSpec, stem_channels: int) -> NetworkSpec:
    if stem_channels < 1:
        raise ValueError("stem channels must be >= 1")
    return spec.replace(stem_channels=stem_channels)


def transfer(g: Genotype, spec: NetworkSpec, input_channels: int, num_classes: int,
             seed: int = 0) -> tuple[NetworkSpec, Network]:
    """Rebuild ``g`` for a task with different input channels / classes, with fresh parameters."""
    new_spec = spec.replace(input_channels=input_channels, num_classes=num_classes, nodes=g.num_intermediate)
    return new_spec, Network(new_spec, genotype=g, seed=seed)
