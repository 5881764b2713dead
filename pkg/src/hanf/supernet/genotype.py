"""Discrete cell architectures and the arch-weight -> genotype projection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..diffcore import PRIMITIVES

Triple = tuple[str, int, int]  # (primitive, source node, target node)


def cell_edges(nodes: int) -> list[tuple[int, int]]:
    """Edges ``(i, j)`` of a cell: every earlier node feeds every intermediate node.

    Nodes 0 and 1 are the two cell inputs; edges are ordered by target, then source.
    """
    if nodes < 3:
        raise ValueError(f"a cell needs at least 3 nodes (2 inputs + 1 intermediate), got {nodes}")
    return [(i, j) for j in range(2, nodes) for i in range(j)]


def edge_softmax(arch: np.ndarray) -> np.ndarray:
    z = np.exp(arch - arch.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Genotype:
    normal: tuple[Triple, ...]
    reduce: tuple[Triple, ...]
    nodes: int
    k: int = 2

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple((str(p), int(s), int(t)) for p, s, t in self.normal))
        object.__setattr__(self, "reduce", tuple((str(p), int(s), int(t)) for p, s, t in self.reduce))
        self.validate()

    def validate(self) -> None:
        for kind in ("normal", "reduce"):
            triples = getattr(self, kind)
            seen = set()
            per_node: dict[int, int] = {}
            for prim, src, dst in triples:
                if prim not in PRIMITIVES or prim == "zero":
                    raise ValueError(f"genotype {kind}: primitive {prim!r} is not allowed")
                if not (2 <= dst < self.nodes and 0 <= src < dst):
                    raise ValueError(f"genotype {kind}: edge {src}->{dst} invalid for a {self.nodes}-node cell")
                if (src, dst) in seen:
                    raise ValueError(f"genotype {kind}: duplicate edge {src}->{dst}")
                seen.add((src, dst))
                per_node[dst] = per_node.get(dst, 0) + 1
            for dst in range(2, self.nodes):
                if per_node.get(dst, 0) != min(self.k, dst):
                    raise ValueError(
                        f"genotype {kind}: node {dst} has {per_node.get(dst, 0)} inputs, expected {min(self.k, dst)}"
                    )

    def cell(self, reduction: bool) -> tuple[Triple, ...]:
        return self.reduce if reduction else self.normal

    def to_dict(self) -> dict:
        return {
            "normal": [list(t) for t in self.normal],
            "reduce": [list(t) for t in self.reduce],
            "nodes": self.nodes,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Genotype":
        return cls(
            normal=tuple(tuple(t) for t in d["normal"]),
            reduce=tuple(tuple(t) for t in d["reduce"]),
            nodes=int(d["nodes"]),
            k=int(d.get("k", 2)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Genotype":
        return cls.from_json(Path(path).read_text())


def _discretize_cell(weights: np.ndarray, nodes: int, k: int, primitives: Sequence[str]) -> tuple[Triple, ...]:
    edges = cell_edges(nodes)
    if weights.shape != (len(edges), len(primitives)):
        raise ValueError(f"arch matrix has shape {weights.shape}, expected {(len(edges), len(primitives))}")
    probs = edge_softmax(weights)
    allowed = [p for p, name in enumerate(primitives) if name != "zero"]
    out: list[Triple] = []
    for dst in range(2, nodes):
        candidates = []
        for e, (src, d) in enumerate(edges):
            if d != dst:
                continue
            row = probs[e, allowed]
            best = int(np.argmax(row))  # first maximum -> lowest primitive index
            candidates.append((-row[best], allowed[best], src))
        candidates.sort()
        kept = sorted(candidates[: min(k, dst)], key=lambda c: c[2])
        out.extend((primitives[p], src, dst) for _, p, src in kept)
    return tuple(out)


def discretize(arch: Mapping[str, np.ndarray], nodes: int, k: int = 2, primitives: Sequence[str] = PRIMITIVES) -> Genotype:
    """Keep, for every intermediate node, the ``k`` incoming edges whose best
    non-zero primitive carries the most softmax weight.

    Ties are broken by lower primitive index, then lower source node. Nodes
    with fewer than ``k`` incoming edges keep all of them.
    ``arch`` maps ``"normal"``/``"reduce"`` to ``[edges x primitives]`` arrays.
    """
    def arr(v):
        return np.asarray(getattr(v, "data", v), dtype=np.float64)

    return Genotype(
        normal=_discretize_cell(arr(arch["normal"]), nodes, k, primitives),
        reduce=_discretize_cell(arr(arch["reduce"]), nodes, k, primitives),
        nodes=nodes,
        k=k,
    )
