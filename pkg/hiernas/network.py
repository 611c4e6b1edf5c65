# hiernas/network.py
"""
Building blocks shared by the supernet and the discrete network: a layer
factory that creates named parameters on first use, operators, connectors,
stems, ASPP heads and the discrete cell.

Parameter names depend only on (layer, factor, block, input, operator), so a
discrete network can run on a supernet's ParamStore unchanged.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import (
    FACTOR_INDEX,
    FACTORS,
    OPERATOR_INDEX,
    Direction,
    InvalidArgumentError,
    OperatorKind,
    ShapeError,
)
from hiernas.microtensor import (
    ParamStore,
    Tensor,
    add_n,
    avg_pool_3x3,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    global_avg_pool,
    identity,
    max_pool_3x3,
    no_grad,
    relu,
    separable_conv,
    zero_op,
)
from hiernas.search_space import CellGenotype, NetworkPath, build_trellis, check_path

DEEP_STEM_FILTERS = (64, 64, 128)
DEEP_STEM_STRIDES = (2, 1, 2)
ASPP_BASE_RATE = 96
ASPP_FULL_RATES = (6, 12, 18)


def node_channels(num_blocks: int, filter_multiplier: int, s: int) -> int:
    return num_blocks * filter_multiplier * s // 4


def aspp_rates(s: int, branches: int = 3) -> Tuple[int, ...]:
    """
    Dilation rates of the atrous branches at factor `s`: 96/s for the
    three-branch head, (6, 12, 18) scaled by 16/s for the five-branch head.
    """
    if branches == 3:
        return (max(1, ASPP_BASE_RATE // s),)
    if branches == 5:
        return tuple(max(1, r * 16 // s) for r in ASPP_FULL_RATES)
    raise InvalidArgumentError(f"ASPP supports 3 or 5 branches, got {branches}")


def check_image_size(images: Tensor) -> None:
    if images.ndim != 4:
        raise ShapeError("network input", images.shape, ("N", "C", "H", "W"))
    h, w = images.shape[2:]
    if h % 32 or w % 32:
        raise InvalidArgumentError(f"input size {h}x{w} is not divisible by 32")


class Layers:
    """
    Layer factory bound to a ParamStore. Weights are He-normal, biases zero,
    batch-norm scale one and shift zero; a name that already exists is reused.
    """

    def __init__(self, store: ParamStore, seed: int = 0, batch_norm: bool = True):
        self.store = store
        self.rng = np.random.default_rng(seed)
        self.batch_norm = batch_norm

    def param(self, name: str, shape: Tuple[int, ...], init: str = "he") -> Tensor:
        if name in self.store:
            existing = self.store[name]
            if existing.shape != tuple(shape):
                raise ShapeError(f"parameter {name}", existing.shape, shape)
            return existing
        if init == "he":
            fan_in = int(np.prod(shape[1:]))
            value = self.rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif init == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        logger.trace("new parameter {} {}", name, shape)
        return self.store.add(name, value)

    # ---------------------------------------------------------------- primitives

    def conv(
        self,
        name: str,
        x: Tensor,
        c_out: int,
        k: int = 1,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = False,
    ) -> Tensor:
        weight = self.param(f"{name}.w", (c_out, x.shape[1] // groups, k, k))
        b = self.param(f"{name}.b", (c_out,), init="zeros") if bias else None
        return conv2d(x, weight, b, stride=stride, dilation=dilation, groups=groups)

    def bn(self, name: str, x: Tensor) -> Tensor:
        if not self.batch_norm:
            return x
        c = x.shape[1]
        return batch_norm(x, self.param(f"{name}.gamma", (c,), "ones"), self.param(f"{name}.beta", (c,), "zeros"))

    def sep_conv(self, name: str, x: Tensor, k: int, dilation: int = 1) -> Tensor:
        """ReLU, depthwise k x k, pointwise 1 x 1, BN."""
        c = x.shape[1]
        dw = self.param(f"{name}.dw", (c, 1, k, k))
        pw = self.param(f"{name}.pw", (c, c, 1, 1))
        return self.bn(f"{name}.bn", separable_conv(relu(x), dw, pw, dilation=dilation))

    def operator(self, op: OperatorKind, name: str, x: Tensor) -> Tensor:
        if op.is_conv:
            return self.sep_conv(f"{name}.{op.value}", x, op.kernel_size, op.dilation)
        if op is OperatorKind.AVG_POOL_3X3:
            return avg_pool_3x3(x)
        if op is OperatorKind.MAX_POOL_3X3:
            return max_pool_3x3(x)
        if op is OperatorKind.SKIP_CONNECT:
            return identity(x)
        return zero_op(x)

    def preprocess(self, name: str, x: Tensor, c_out: int) -> Tensor:
        return self.bn(f"{name}.bn", self.conv(name, relu(x), c_out))

    # ---------------------------------------------------------------- resolution changes

    def connector(self, name: str, x: Tensor, src: int, dst: int, c_out: int, size: Tuple[int, int]) -> Tensor:
        """
        One trellis step: stride-2 3x3 conv to descend (src = dst/2),
        bilinear resize plus 1x1 conv to ascend (src = 2 dst).
        """
        if src == dst:
            return x
        if dst == 2 * src:
            return self.bn(f"{name}.bn", self.conv(name, relu(x), c_out, k=3, stride=2))
        if src == 2 * dst:
            return self.bn(f"{name}.bn", self.conv(name, bilinear_resize(x, *size), c_out))
        raise InvalidArgumentError(f"{name}: no single connector from factor {src} to {dst}")

    def chain(
        self, layer: int, x: Tensor, src: int, dst: int, channels, image_hw: Tuple[int, int]
    ) -> Tensor:
        """
        Walk from factor `src` to `dst` one connector at a time (`channels(s)`
        gives the width at factor s).
        """
        h, w = image_hw
        cur = src
        while cur != dst:
            nxt = cur * 2 if dst > cur else cur // 2
            x = self.connector(f"chain{layer}.{cur}to{nxt}", x, cur, nxt, channels(nxt), (h // nxt, w // nxt))
            cur = nxt
        return x

    # ---------------------------------------------------------------- stems and heads

    def search_stem(self, x: Tensor, c_out: int) -> Tensor:
        """Two stride-2 3x3 convs: factor 2 at ceil(c/2) channels, then factor 4 at c."""
        h = relu(self.bn("stem0.bn", self.conv("stem0", x, -(-c_out // 2), k=3, stride=2)))
        return self.bn("stem1.bn", self.conv("stem1", h, c_out, k=3, stride=2))

    def deep_stem(self, x: Tensor) -> Tensor:
        """Three 3x3 convs with 64, 64, 128 filters and strides 2, 1, 2."""
        for i, (c, stride) in enumerate(zip(DEEP_STEM_FILTERS, DEEP_STEM_STRIDES)):
            x = relu(self.bn(f"stem{i}.bn", self.conv(f"stem{i}", x, c, k=3, stride=stride)))
        return x

    def aspp(self, name: str, x: Tensor, s: int, num_classes: int, c_branch: int, branches: int = 3) -> Tensor:
        """
        1x1 branch, atrous 3x3 branch(es), image pooling; concat; 1x1 classifier.
        """
        outs = [relu(self.bn(f"{name}.b0.bn", self.conv(f"{name}.b0", x, c_branch)))]
        for i, rate in enumerate(aspp_rates(s, branches), start=1):
            outs.append(relu(self.bn(f"{name}.b{i}.bn", self.conv(f"{name}.b{i}", x, c_branch, k=3, dilation=rate))))
        pooled = relu(self.conv(f"{name}.pool", global_avg_pool(x), c_branch, bias=True))
        outs.append(bilinear_resize(pooled, *x.shape[2:]))
        return self.conv(f"{name}.cls", concat_channels(outs), num_classes, bias=True)


@dataclass
class CellWeights:
    """Where a cell's parameters live: the factory plus the node prefix."""

    layers: Layers
    prefix: str
    num_blocks: int
    block_channels: int

    def edge(self, block: int, source: int) -> str:
        return f"{self.prefix}.b{block}.in{source}"

    def preprocess(self, h_prev: Tensor, h_pprev: Tensor) -> List[Tensor]:
        if h_prev.shape[0] != h_pprev.shape[0] or h_prev.shape[2:] != h_pprev.shape[2:]:
            raise ShapeError("cell_forward", h_prev.shape, h_pprev.shape)
        return [
            self.layers.preprocess(f"{self.prefix}.pre0", h_pprev, self.block_channels),
            self.layers.preprocess(f"{self.prefix}.pre1", h_prev, self.block_channels),
        ]


def discrete_cell_forward(h_prev: Tensor, h_pprev: Tensor, genotype: CellGenotype, weights: CellWeights) -> Tensor:
    """
    Each block adds its two chosen operators; the cell concatenates all blocks.
    """
    states = weights.preprocess(h_prev, h_pprev)
    for i, block in enumerate(genotype.blocks):
        a = weights.layers.operator(block.op1, weights.edge(i, block.input1), states[block.input1])
        b = weights.layers.operator(block.op2, weights.edge(i, block.input2), states[block.input2])
        states.append(add_n([a, b]))
    return concat_channels(states[2:])


class DiscreteNet:
    """
    The decoded cell repeated along the decoded path, with one ASPP head at
    the final factor upsampled to the input size.
    """

    def __init__(
        self,
        cell: CellGenotype,
        path: NetworkPath,
        filter_multiplier: int,
        num_classes: int,
        in_channels: int = 3,
        store: Optional[ParamStore] = None,
        seed: int = 0,
        stem: str = "search",
        aspp_branches: int = 3,
        batch_norm: bool = True,
    ):
        if stem not in ("search", "deep"):
            raise InvalidArgumentError(f"unknown stem {stem!r}")
        self.cell = cell.check()
        self.path = check_path(path, build_trellis(max(len(path), 1)))
        self.num_blocks = cell.num_blocks
        self.filter_multiplier = filter_multiplier
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.stem = stem
        self.aspp_branches = aspp_branches
        self.params = ParamStore() if store is None else store
        self.layers = Layers(self.params, seed=seed, batch_norm=batch_norm)
        with no_grad():
            self.forward(np.zeros((1, in_channels, 32, 32)))
        logger.debug("DiscreteNet over path {} holds {} parameter tensors", list(path), len(self.params))

    def channels(self, s: int) -> int:
        return node_channels(self.num_blocks, self.filter_multiplier, s)

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        check_image_size(x)
        hw = x.shape[2:]
        layers = self.layers
        stem = layers.search_stem(x, self.channels(4)) if self.stem == "search" else layers.deep_stem(x)

        history: List[Tuple[int, Tensor]] = [(4, stem)]
        for l, s in enumerate(self.path, start=1):
            size = (hw[0] // s, hw[1] // s)
            prev_s, prev = history[-1]
            h_in = layers.connector(f"conn{l}.{prev_s}to{s}", prev, prev_s, s, self.channels(s), size)
            pp_s, pp = history[-2] if l >= 2 else history[0]
            pp = layers.chain(l, pp, pp_s, s, self.channels, hw)
            weights = CellWeights(layers, f"cell{l}.{s}", self.num_blocks, self.filter_multiplier * s // 4)
            history.append((s, discrete_cell_forward(h_in, pp, self.cell, weights)))

        last_s, last = history[-1]
        logits = layers.aspp(f"head.{last_s}", last, last_s, self.num_classes, self.channels(last_s), self.aspp_branches)
        return bilinear_resize(logits, *hw)

    __call__ = forward


def one_hot_alpha(cell: CellGenotype) -> np.ndarray:
    """
    Operator-mixing probabilities that select exactly the cell's edges:
    the chosen operator on kept edges, `zero` everywhere else.
    """
    rows = []
    for i, block in enumerate(cell.blocks):
        for j in range(i + 2):
            row = np.zeros(len(OPERATOR_INDEX))
            chosen = [op for src, op in ((block.input1, block.op1), (block.input2, block.op2)) if src == j]
            row[OPERATOR_INDEX[chosen[0] if chosen else OperatorKind.ZERO]] = 1.0
            rows.append(row)
    return np.array(rows)


def path_beta(path: NetworkPath) -> np.ndarray:
    """
    Transition probabilities with 1 on the path's edges and 0 elsewhere,
    laid out (source layer, source factor, direction).
    """
    beta = np.zeros((len(path), len(FACTORS), len(Direction)))
    prev = 4
    for layer, s in enumerate(path):
        beta[layer, FACTOR_INDEX[prev], Direction.between(prev, s)] = 1.0
        prev = s
    return beta
