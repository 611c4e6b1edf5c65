# hiernas/search_space.py
"""
Discrete two-level search space: cell genotypes, the resolution trellis,
path validation, enumeration and exact counting.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import (
    FACTORS,
    NON_ZERO_OPERATORS,
    OperatorKind,
    ResourceLimitError,
    StartConvention,
    ValidationError,
    InvalidArgumentError,
)

ENUMERATION_CAP = 10**6

Node = Tuple[int, int]  # (layer, downsample factor)


@dataclass(frozen=True)
class BlockGenotype:
    # 0 = H^{l-2}, 1 = H^{l-1}, 2.. = earlier blocks of the same cell
    input1: int
    input2: int
    op1: OperatorKind
    op2: OperatorKind

    def violations(self, position: int) -> List[str]:
        problems = []
        for name, idx in (("input1", self.input1), ("input2", self.input2)):
            if not 0 <= idx < position + 2:
                problems.append(f"block {position}: {name}={idx} outside 0..{position + 1}")
        for name, op in (("op1", self.op1), ("op2", self.op2)):
            if not isinstance(op, OperatorKind):
                problems.append(f"block {position}: {name}={op!r} is not an operator")
            elif op.is_zero:
                problems.append(f"block {position}: {name} is 'zero'")
        return problems


@dataclass(frozen=True)
class CellGenotype:
    blocks: Tuple[BlockGenotype, ...]

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def violations(self, num_blocks: Optional[int] = None) -> List[str]:
        problems = []
        if num_blocks is not None and len(self.blocks) != num_blocks:
            problems.append(f"expected {num_blocks} blocks, got {len(self.blocks)}")
        if not self.blocks:
            problems.append("cell has no blocks")
        for position, block in enumerate(self.blocks):
            problems.extend(block.violations(position))
        return problems

    def check(self, num_blocks: Optional[int] = None) -> "CellGenotype":
        problems = self.violations(num_blocks)
        if problems:
            raise ValidationError("invalid cell genotype: " + "; ".join(problems))
        return self


@dataclass(frozen=True)
class NetworkPath:
    resolutions: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.resolutions)

    def __iter__(self):
        return iter(self.resolutions)

    def __getitem__(self, layer_index: int) -> int:
        return self.resolutions[layer_index]


@dataclass(frozen=True)
class Trellis:
    num_layers: int
    nodes: FrozenSet[Node]
    edges: FrozenSet[Tuple[Node, Node]]

    def factors_at(self, layer: int) -> Tuple[int, ...]:
        """
        Feasible factors at `layer`; layer 0 is the stem (factor 4 only).
        """
        if layer <= 0:
            return (4,)
        return tuple(s for s in FACTORS if (layer, s) in self.nodes)

    def successors(self, layer: int, s: int) -> Tuple[int, ...]:
        if layer == 0:
            return tuple(t for t in self.factors_at(1) if t in (4, 8))
        return tuple(t for t in FACTORS if ((layer, s), (layer + 1, t)) in self.edges)

    def has_node(self, layer: int, s: int) -> bool:
        return (layer <= 0 and s == 4) or (layer, s) in self.nodes


def _neighbours(s: int) -> Tuple[int, ...]:
    return tuple(t for t in (s // 2, s, s * 2) if t in FACTORS)


@lru_cache(maxsize=64)
def build_trellis(num_layers: int) -> Trellis:
    """
    Layer-by-layer reachability from the first layer {4, 8}.
    """
    if not isinstance(num_layers, (int, np.integer)) or num_layers < 1:
        raise InvalidArgumentError(f"number of layers must be >= 1, got {num_layers!r}")
    num_layers = int(num_layers)
    nodes = {(1, 4), (1, 8)}
    edges = set()
    frontier = (4, 8)
    for layer in range(1, num_layers):
        nxt = sorted({t for s in frontier for t in _neighbours(s)})
        for s in frontier:
            for t in _neighbours(s):
                edges.add(((layer, s), (layer + 1, t)))
        nodes.update((layer + 1, t) for t in nxt)
        frontier = tuple(nxt)
    logger.trace("Built trellis L={} with {} nodes, {} edges", num_layers, len(nodes), len(edges))
    return Trellis(num_layers, frozenset(nodes), frozenset(edges))


def validate_path(path: NetworkPath, trellis: Trellis) -> List[str]:
    """
    Return the list of rule violations; empty means the path is valid.
    """
    report = []
    seq = list(path.resolutions)
    if len(seq) != trellis.num_layers:
        report.append(f"expected {trellis.num_layers} layers, got {len(seq)}")
    for layer, s in enumerate(seq, start=1):
        if s not in FACTORS:
            report.append(f"layer {layer}: factor {s} is not one of 4, 8, 16, 32")
    if seq and seq[0] not in (4, 8):
        report.append("first layer must be 4 or 8")
    for layer in range(1, len(seq)):
        prev, cur = seq[layer - 1], seq[layer]
        if prev in FACTORS and cur in FACTORS and cur not in _neighbours(prev):
            report.append(f"illegal jump {prev}→{cur} at layer {layer + 1}")
    return report


def check_path(path: NetworkPath, trellis: Trellis) -> NetworkPath:
    report = validate_path(path, trellis)
    if report:
        raise ValidationError("invalid network path: " + "; ".join(report))
    return path


def _completions(num_layers: int) -> List[Dict[int, int]]:
    """
    completions[l][s]: number of ways to finish a path standing at (l+1, s).
    """
    table = [dict() for _ in range(num_layers)]
    table[-1] = {s: 1 for s in FACTORS}
    for layer in range(num_layers - 2, -1, -1):
        table[layer] = {s: sum(table[layer + 1][t] for t in _neighbours(s)) for s in FACTORS}
    return table


def count_paths(
    num_layers: int, start_convention: StartConvention = StartConvention.FIRST_LAYER_4_OR_8
) -> int:
    if not isinstance(num_layers, (int, np.integer)) or num_layers < 1:
        raise InvalidArgumentError(f"number of layers must be >= 1, got {num_layers!r}")
    first = _completions(int(num_layers))[0]
    return sum(first[s] for s in start_convention.start_factors)


def count_cell_genotypes(num_blocks: int, num_ops: int) -> int:
    """
    Number of (I1, I2, O1, O2) choices over all blocks, combiner fixed to addition.
    """
    if num_blocks < 1 or num_ops < 1:
        raise InvalidArgumentError(
            f"blocks and operators must be >= 1, got B={num_blocks}, ops={num_ops}"
        )
    total = 1
    for i in range(1, num_blocks + 1):
        total *= (i + 1) ** 2 * num_ops**2
    return total


def enumerate_paths(
    trellis: Trellis,
    start_convention: StartConvention = StartConvention.FIRST_LAYER_4_OR_8,
    cap: int = ENUMERATION_CAP,
) -> Iterator[NetworkPath]:
    """
    Yield every valid path once, in lexicographic order of factor sequences.
    """
    total = count_paths(trellis.num_layers, start_convention)
    if total > cap:
        raise ResourceLimitError(f"{total} paths exceed the enumeration cap of {cap}")
    num_layers = trellis.num_layers

    # explicit stack keeps deep trellises off the recursion limit
    stack = [(s,) for s in reversed(start_convention.start_factors)]
    while stack:
        prefix = stack.pop()
        if len(prefix) == num_layers:
            yield NetworkPath(prefix)
            continue
        for t in reversed(_neighbours(prefix[-1])):
            stack.append(prefix + (t,))


@lru_cache(maxsize=16)
def path_matrix(
    num_layers: int, start_convention: StartConvention = StartConvention.FIRST_LAYER_4_OR_8
) -> np.ndarray:
    """
    All paths as a read-only (count, L) integer array, lexicographic row order.
    """
    trellis = build_trellis(num_layers)
    rows = np.array([p.resolutions for p in enumerate_paths(trellis, start_convention)], dtype=np.int64)
    rows.setflags(write=False)
    return rows


def random_genotype(
    num_blocks: int, trellis: Trellis, seed: int
) -> Tuple[CellGenotype, NetworkPath]:
    """
    Uniform random decoded-style genotype (distinct inputs, no zero op) and a
    uniformly random path, sampled through the completion counts.
    """
    if num_blocks < 1:
        raise InvalidArgumentError(f"number of blocks must be >= 1, got {num_blocks}")
    rng = np.random.default_rng(seed)
    blocks = []
    for position in range(num_blocks):
        i1, i2 = rng.choice(position + 2, size=2, replace=False)
        o1, o2 = rng.integers(len(NON_ZERO_OPERATORS), size=2)
        blocks.append(
            BlockGenotype(int(i1), int(i2), NON_ZERO_OPERATORS[o1], NON_ZERO_OPERATORS[o2])
        )

    table = _completions(trellis.num_layers)
    options = (4, 8)
    seq = []
    for layer in range(trellis.num_layers):
        weights = np.array([table[layer][s] for s in options], dtype=np.float64)
        s = options[rng.choice(len(options), p=weights / weights.sum())]
        seq.append(int(s))
        options = _neighbours(s)
    return CellGenotype(tuple(blocks)), NetworkPath(tuple(seq))


def genotype_to_dict(cell: CellGenotype, path: NetworkPath) -> dict:
    return {
        "B": cell.num_blocks,
        "blocks": [
            {"i1": b.input1, "i2": b.input2, "o1": b.op1.value, "o2": b.op2.value}
            for b in cell.blocks
        ],
        "path": [int(s) for s in path.resolutions],
    }


def genotype_from_dict(payload: dict) -> Tuple[CellGenotype, NetworkPath]:
    try:
        blocks = tuple(
            BlockGenotype(int(b["i1"]), int(b["i2"]), OperatorKind(b["o1"]), OperatorKind(b["o2"]))
            for b in payload["blocks"]
        )
        path = NetworkPath(tuple(int(s) for s in payload["path"]))
        num_blocks = int(payload["B"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed genotype JSON: {e}")
    cell = CellGenotype(blocks).check(num_blocks)
    check_path(path, build_trellis(max(len(path), 1)))
    return cell, path
