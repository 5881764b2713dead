"""Cell-based networks: the weight-sharing supernet and the discrete evaluation net.

Both networks name their parameters identically
(``cells.<i>.edges.<src>-<dst>.<primitive>.<param>``), so weights can be
moved between them by name.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..diffcore import PRIMITIVES, Tape, Tensor, forward_primitive, init_params, ops, primitive_param_specs
from .genotype import Genotype, cell_edges, discretize


@dataclass(frozen=True)
class CellSpec:
    nodes: int = 5
    primitives: tuple[str, ...] = PRIMITIVES

    def __post_init__(self):
        if self.nodes < 3:
            raise ValueError(f"cells need at least 3 nodes, got {self.nodes}")
        unknown = set(self.primitives) - set(PRIMITIVES)
        if unknown:
            raise ValueError(f"unknown primitives {sorted(unknown)}")

    @property
    def edges(self) -> list[tuple[int, int]]:
        return cell_edges(self.nodes)

    @property
    def intermediate(self) -> int:
        return self.nodes - 2


@dataclass(frozen=True)
class NetworkSpec:
    cell_count: int = 8
    channels: int = 16
    num_classes: int = 10
    in_channels: int = 1
    path_dropout: float = 0.0

    def __post_init__(self):
        if self.cell_count < 2:
            raise ValueError(f"cell_count must be at least 2, got {self.cell_count}")
        if self.channels < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("channels, num_classes and in_channels must be positive (num_classes >= 2)")
        if not 0.0 <= self.path_dropout < 1.0:
            raise ValueError(f"path_dropout must lie in [0, 1), got {self.path_dropout}")

    @property
    def reduction_indices(self) -> tuple[int, ...]:
        return tuple(sorted({self.cell_count // 3, 2 * self.cell_count // 3}))


class _Builder:
    """Collects (name, kind, shape) parameter specs in construction order."""

    def __init__(self):
        self.specs: list[tuple[str, str, tuple[int, ...]]] = []

    def add(self, prefix: str, specs) -> list[str]:
        names = []
        for suffix, kind, shape in specs:
            name = f"{prefix}.{suffix}"
            self.specs.append((name, kind, tuple(shape)))
            names.append(name)
        return names

    def rcb(self, prefix: str, c_in: int, c_out: int) -> list[str]:
        return self.add(prefix, [("w", "conv", (c_out, c_in, 1, 1)), ("gamma", "bn_scale", (c_out,)), ("beta", "bn_shift", (c_out,))])


@dataclass
class _CellLayout:
    reduction: bool
    reduction_prev: bool
    channels: int
    pre0: list[str]
    pre1: list[str]
    # (src, dst) -> {primitive: [param names]}
    ops: dict[tuple[int, int], dict[str, list[str]]]


class Network:
    """Shared machinery: named parameters, stem/preprocessing/head, state copies."""

    spec: NetworkSpec
    nodes: int
    params: dict[str, Tensor]
    arch: dict[str, Tensor]

    def _build_frame(self, b: _Builder, edge_prims) -> None:
        spec = self.spec
        c = spec.channels
        self._stem = b.add("stem", [("w", "conv", (c, spec.in_channels, 3, 3)), ("gamma", "bn_scale", (c,)), ("beta", "bn_shift", (c,))])
        c_pp, c_p, c_cur = c, c, c
        red_prev = False
        self._cells: list[_CellLayout] = []
        for ci in range(spec.cell_count):
            red = ci in spec.reduction_indices
            if red:
                c_cur *= 2
            pre0 = b.rcb(f"cells.{ci}.pre0", c_pp, c_cur)
            pre1 = b.rcb(f"cells.{ci}.pre1", c_p, c_cur)
            layout_ops = {}
            for src, dst, prims in edge_prims(red):
                stride = 2 if red and src < 2 else 1
                layout_ops[(src, dst)] = {
                    p: b.add(f"cells.{ci}.edges.{src}-{dst}.{p}", primitive_param_specs(p, c_cur, stride)) for p in prims
                }
            self._cells.append(_CellLayout(red, red_prev, c_cur, pre0, pre1, layout_ops))
            c_pp, c_p = c_p, c_cur * (self.nodes - 2)
            red_prev = red
        self._head = b.add("head", [("w", "linear", (spec.num_classes, c_p)), ("b", "bias", (spec.num_classes,))])

    def _init(self, b: _Builder, seed: int) -> None:
        self.params = {t.name: t for t in init_params(b.specs, seed)}

    def _p(self, names: Sequence[str]) -> list[Tensor]:
        return [self.params[n] for n in names]

    def _stem_forward(self, tape, x):
        w, g, bt = self._p(self._stem)
        return ops.batch_norm(tape, ops.conv2d(tape, x, w, padding=1), g, bt)

    def _preprocess(self, tape, cell: _CellLayout, s0, s1):
        w0, g0, b0 = self._p(cell.pre0)
        w1, g1, b1 = self._p(cell.pre1)
        stride0 = 2 if cell.reduction_prev else 1
        t0 = ops.batch_norm(tape, ops.conv2d(tape, ops.relu(tape, s0), w0, stride=stride0), g0, b0)
        t1 = ops.batch_norm(tape, ops.conv2d(tape, ops.relu(tape, s1), w1), g1, b1)
        return t0, t1

    def _head_forward(self, tape, s):
        w, b = self._p(self._head)
        return ops.linear(tape, ops.global_avg_pool(tape, s), w, b)

    def _apply(self, tape, cell: _CellLayout, prim: str, src: int, dst: int, x: Tensor) -> Tensor:
        stride = 2 if cell.reduction and src < 2 else 1
        return forward_primitive(tape, prim, x, self._p(cell.ops[(src, dst)][prim]), {"stride": stride})

    def forward(self, tape: Tape | None, x, training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    # -- state exchange -------------------------------------------------------

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_weights(self, weights: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            v = np.asarray(weights[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"weight {k}: shape {v.shape} does not match {t.shape}")
            t.data = v.copy()

    def get_arch(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.arch.items()}

    def set_arch(self, arch: Mapping[str, np.ndarray]) -> None:
        for k, t in self.arch.items():
            v = np.asarray(arch[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"arch {k}: shape {v.shape} does not match {t.shape}")
            t.data = v.copy()

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def mixed_op_forward(
    tape: Tape | None,
    x: Tensor,
    edge_arch: Tensor,
    op_params: Mapping[str, Sequence[Tensor]],
    stride: int = 1,
    primitives: Sequence[str] = PRIMITIVES,
) -> Tensor:
    """``sum_o softmax(edge_arch)_o * o(x)`` over ``primitives``."""
    if edge_arch.shape != (len(primitives),):
        raise ValueError(f"edge arch has shape {edge_arch.shape}, expected ({len(primitives)},)")
    weights = ops.softmax(tape, edge_arch)
    outs = [
        None if p == "zero" else forward_primitive(tape, p, x, op_params.get(p, ()), {"stride": stride})
        for p in primitives
    ]
    if all(o is None for o in outs):
        return forward_primitive(tape, "zero", x, (), {"stride": stride})
    return ops.weighted_sum(tape, outs, weights)


class SuperNet(Network):
    """Weight-sharing supernet whose edges are softmax mixtures over the catalog.

    ``arch`` holds one ``[edges x primitives]`` matrix for normal cells and one
    for reduction cells; every cell of a kind reads the same matrix.
    """

    def __init__(self, spec: NetworkSpec, cell: CellSpec = CellSpec(), seed: int = 0):
        self.spec, self.cell_spec, self.nodes = spec, cell, cell.nodes
        self.primitives = tuple(cell.primitives)
        edges = cell.edges
        b = _Builder()
        self._build_frame(b, lambda red: [(s, d, self.primitives) for s, d in edges])
        self._init(b, seed)
        shape = (len(edges), len(self.primitives))
        self.arch = {
            "normal": Tensor(np.zeros(shape), requires_grad=True, name="arch.normal"),
            "reduce": Tensor(np.zeros(shape), requires_grad=True, name="arch.reduce"),
        }

    def _cell_forward(self, tape, cell: _CellLayout, s0, s1, weights: Tensor) -> Tensor:
        states = list(self._preprocess(tape, cell, s0, s1))
        edges = self.cell_spec.edges
        e = 0
        for dst in range(2, self.nodes):
            terms = []
            for src in range(dst):
                assert edges[e] == (src, dst)
                row = ops.take(tape, weights, e)
                outs = [
                    None if p == "zero" else self._apply(tape, cell, p, src, dst, states[src]) for p in self.primitives
                ]
                if all(o is None for o in outs):
                    stride = 2 if cell.reduction and src < 2 else 1
                    terms.append(forward_primitive(tape, "zero", states[src], (), {"stride": stride}))
                else:
                    terms.append(ops.weighted_sum(tape, outs, row))
                e += 1
            states.append(ops.add_n(tape, terms))
        return ops.concat(tape, states[2:], axis=1)

    def forward(self, tape: Tape | None, x, training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        w_norm = ops.softmax(tape, self.arch["normal"])
        w_red = ops.softmax(tape, self.arch["reduce"])
        s0 = s1 = self._stem_forward(tape, x)
        for cell in self._cells:
            s0, s1 = s1, self._cell_forward(tape, cell, s0, s1, w_red if cell.reduction else w_norm)
        return self._head_forward(tape, s1)

    def genotype(self, k: int = 2) -> Genotype:
        return discretize(self.get_arch(), self.nodes, k, self.primitives)


def cell_forward(tape: Tape | None, net: SuperNet, index: int, s0: Tensor, s1: Tensor) -> Tensor:
    """Run cell ``index`` of ``net`` on the input pair, using the net's shared arch."""
    cell = net._cells[index]
    weights = ops.softmax(tape, net.arch["reduce" if cell.reduction else "normal"])
    return net._cell_forward(tape, cell, s0, s1, weights)


class EvalNet(Network):
    """Discrete network built from a genotype; each node sums its chosen ops.

    During training each op output is dropped per sample with probability
    ``spec.path_dropout`` and survivors are rescaled by ``1 / (1 - p)``.
    """

    def __init__(self, genotype: Genotype, spec: NetworkSpec, seed: int = 0, cell: CellSpec | None = None):
        if cell is not None and cell.nodes != genotype.nodes:
            raise ValueError(f"genotype has {genotype.nodes} nodes but the cell spec asks for {cell.nodes}")
        genotype.validate()
        self.spec, self.genotype, self.nodes = spec, genotype, genotype.nodes
        self.path_dropout = spec.path_dropout
        b = _Builder()
        self._build_frame(b, lambda red: [(s, d, (p,)) for p, s, d in genotype.cell(red)])
        self._init(b, seed)
        self.arch = {}

    def _drop(self, tape, x: Tensor, rng) -> Tensor:
        keep = 1.0 - self.path_dropout
        mask = (rng.random(x.shape[0]) < keep).astype(np.float64) / keep
        return ops.mul_const(tape, x, mask[:, None, None, None])

    def _cell_forward(self, tape, cell: _CellLayout, s0, s1, drop, rng) -> Tensor:
        states = list(self._preprocess(tape, cell, s0, s1))
        triples = self.genotype.cell(cell.reduction)
        for dst in range(2, self.nodes):
            terms = []
            for prim, src, d in triples:
                if d != dst:
                    continue
                h = self._apply(tape, cell, prim, src, dst, states[src])
                if drop:
                    h = self._drop(tape, h, rng)
                terms.append(h)
            states.append(ops.add_n(tape, terms))
        return ops.concat(tape, states[2:], axis=1)

    def forward(self, tape: Tape | None, x, training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        drop = training and self.path_dropout > 0
        if drop and rng is None:
            raise ValueError("path dropout during training needs an rng")
        s0 = s1 = self._stem_forward(tape, x)
        for cell in self._cells:
            s0, s1 = s1, self._cell_forward(tape, cell, s0, s1, drop, rng)
        return self._head_forward(tape, s1)


def build_supernet(spec: NetworkSpec, cell: CellSpec = CellSpec(), seed: int = 0) -> SuperNet:
    return SuperNet(spec, cell, seed)


def build_eval_network(genotype: Genotype, spec: NetworkSpec, seed: int = 0, cell: CellSpec | None = None) -> EvalNet:
    return EvalNet(genotype, spec, seed, cell)
