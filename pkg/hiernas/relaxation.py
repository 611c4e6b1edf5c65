# hiernas/relaxation.py
"""
Continuous relaxation of the two-level space.

Operator mixing: every cell edge (block i, input j) mixes the 8 operators
with softmax(alpha[i, j]); one alpha tensor serves every layer.

Trellis transitions: beta[l, s, d] scores the edge leaving node (l, s) in
direction d (stem is layer 0), normalized over the feasible directions of
each node. A node sums its incoming cells weighted by the incoming edges'
probabilities.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from hiernas.common import (
    FACTOR_INDEX,
    FACTORS,
    OPERATORS,
    Direction,
    InternalConsistencyError,
    NumericError,
    ShapeError,
    ValidationError,
)
from hiernas.microtensor import (
    ParamStore,
    Tensor,
    add_n,
    bilinear_resize,
    concat_channels,
    mul,
    no_grad,
    select,
    softmax,
    zero_op,
)
from hiernas.network import CellWeights, Layers, check_image_size, node_channels
from hiernas.search_space import Trellis, build_trellis

ARCH_INIT_SCALE = 1e-3
SNAPSHOT_FORMAT = "hiernas-snapshot/1"

Probs = Union[Tensor, np.ndarray]


def alpha_edges(num_blocks: int) -> List[Tuple[int, int]]:
    """(block, input) pairs in row order; block i sees inputs 0..i+1."""
    return [(i, j) for i in range(num_blocks) for j in range(i + 2)]


def edge_row(block: int, source: int) -> int:
    return block * (block + 3) // 2 + source


@dataclass
class AlphaLogits:
    num_blocks: int
    tensor: Tensor

    def __post_init__(self):
        expected = (len(alpha_edges(self.num_blocks)), len(OPERATORS))
        if self.tensor.shape != expected:
            raise ShapeError("AlphaLogits", self.tensor.shape, expected)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return alpha_edges(self.num_blocks)


def beta_mask(trellis: Trellis) -> np.ndarray:
    """
    mask[l, s, d]: node (l, s) exists (layer 0 is the stem at factor 4) and
    its step in direction d lands on a node of layer l + 1.
    """
    mask = np.zeros((trellis.num_layers, len(FACTORS), len(Direction)), dtype=bool)
    for layer in range(trellis.num_layers):
        for s in FACTORS:
            if not trellis.has_node(layer, s):
                continue
            for d in Direction:
                t = d.target(s)
                mask[layer, FACTOR_INDEX[s], d] = t in FACTOR_INDEX and trellis.has_node(layer + 1, t)
    return mask


@dataclass
class BetaLogits:
    trellis: Trellis
    tensor: Tensor

    def __post_init__(self):
        expected = (self.trellis.num_layers, len(FACTORS), len(Direction))
        if self.tensor.shape != expected:
            raise ShapeError("BetaLogits", self.tensor.shape, expected)
        self.mask = beta_mask(self.trellis)


def _require_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{name} logits contain non-finite values")


def normalize_alpha(alpha: AlphaLogits) -> Tensor:
    _require_finite("alpha", alpha.tensor.data)
    return softmax(alpha.tensor, axis=-1)


def normalize_beta(beta: BetaLogits) -> Tensor:
    _require_finite("beta", beta.tensor.data)
    trellis = beta.trellis
    for layer in range(trellis.num_layers):
        for s in trellis.factors_at(layer):
            if not beta.mask[layer, FACTOR_INDEX[s]].any():
                raise InternalConsistencyError(f"node ({layer}, {s}) has no feasible outgoing direction")
    return softmax(beta.tensor, axis=-1, mask=beta.mask)


def _weight(probs: Probs, index) -> Optional[Union[Tensor, float]]:
    """Scalar mixing weight, or None when it is a constant exact zero."""
    if isinstance(probs, Tensor):
        return select(probs, index)
    value = float(probs[index])
    return None if value == 0.0 else value


def mixed_operator(h: Tensor, probs: Probs, layers: Layers, name: str) -> Tensor:
    """
    sum_k probs[k] * O_k(h). Constant zero weights are skipped.
    """
    shape = probs.shape if isinstance(probs, Tensor) else np.shape(probs)
    if tuple(shape) != (len(OPERATORS),):
        raise ShapeError("mixed_operator", shape, (len(OPERATORS),))
    terms = []
    for k, op in enumerate(OPERATORS):
        w = _weight(probs, k)
        if w is None:
            continue
        out = layers.operator(op, name, h)
        terms.append(out if (not isinstance(w, Tensor) and w == 1.0) else mul(w, out))
    return add_n(terms) if terms else zero_op(h)


def cell_forward(h_prev: Tensor, h_pprev: Tensor, alpha_probs: Probs, weights: CellWeights) -> Tensor:
    """
    Every block sums the mixed operators over all its candidate inputs; the
    cell concatenates the block outputs.
    """
    expected = (len(alpha_edges(weights.num_blocks)), len(OPERATORS))
    got = alpha_probs.shape if isinstance(alpha_probs, Tensor) else np.shape(alpha_probs)
    if tuple(got) != expected:
        raise ShapeError("cell_forward", got, expected)
    states = weights.preprocess(h_prev, h_pprev)
    for i in range(weights.num_blocks):
        terms = []
        for j in range(i + 2):
            row = alpha_probs[edge_row(i, j)]
            terms.append(mixed_operator(states[j], row, weights.layers, weights.edge(i, j)))
        states.append(add_n(terms))
    return concat_channels(states[2:])


class SuperNet:
    """
    Every trellis node runs its own cell weights; connectors per edge; one
    ASPP head per factor at the last layer. Architecture logits live in
    `arch`, network weights in `params`.
    """

    def __init__(
        self,
        num_layers: int,
        num_blocks: int,
        filter_multiplier: int,
        num_classes: int,
        in_channels: int = 3,
        seed: int = 0,
        batch_norm: bool = True,
    ):
        rng = np.random.default_rng(seed)
        self.trellis = build_trellis(num_layers)
        self.num_layers = num_layers
        self.num_blocks = num_blocks
        self.filter_multiplier = filter_multiplier
        self.num_classes = num_classes
        self.in_channels = in_channels

        self.arch = ParamStore()
        n_edges = len(alpha_edges(num_blocks))
        alpha = self.arch.add("alpha", ARCH_INIT_SCALE * rng.standard_normal((n_edges, len(OPERATORS))))
        beta = self.arch.add(
            "beta", ARCH_INIT_SCALE * rng.standard_normal((num_layers, len(FACTORS), len(Direction)))
        )
        self.alpha = AlphaLogits(num_blocks, alpha)
        self.beta = BetaLogits(self.trellis, beta)

        self.params = ParamStore()
        self.layers = Layers(self.params, seed=int(rng.integers(2**31)), batch_norm=batch_norm)
        self._materialize()
        logger.debug(
            "SuperNet L={} B={} F={}: {} weight tensors, {} weights",
            num_layers,
            num_blocks,
            filter_multiplier,
            len(self.params),
            self.params.num_elements(),
        )

    def channels(self, s: int) -> int:
        return node_channels(self.num_blocks, self.filter_multiplier, s)

    def cell_weights(self, layer: int, s: int) -> CellWeights:
        return CellWeights(self.layers, f"cell{layer}.{s}", self.num_blocks, self.filter_multiplier * s // 4)

    def _materialize(self) -> None:
        """
        Create every parameter up front: one dry pass with all nodes live,
        then every single-step chain connector of every layer.
        """
        with no_grad():
            supernet_forward(np.zeros((1, self.in_channels, 32, 32)), self)
            for layer in range(1, self.num_layers + 1):
                for a in FACTORS:
                    for b in (a // 2, a * 2):
                        if b in FACTOR_INDEX:
                            x = Tensor(np.zeros((1, self.channels(a), 32 // a, 32 // a)))
                            self.layers.chain(layer, x, a, b, self.channels, (32, 32))

    def __call__(self, images, alpha_probs: Optional[Probs] = None, beta_probs: Optional[Probs] = None) -> Tensor:
        return supernet_forward(images, self, alpha_probs, beta_probs)


def _nearest(live: List[int], s: int) -> int:
    return min(live, key=lambda t: (abs(FACTOR_INDEX[t] - FACTOR_INDEX[s]), t))


def supernet_forward(
    images, net: SuperNet, alpha_probs: Optional[Probs] = None, beta_probs: Optional[Probs] = None
) -> Tensor:
    """
    Per-pixel class logits at input resolution.

    `alpha_probs` / `beta_probs` override the normalized logits (constant
    arrays allow exact one-hot architectures). A node is live when some
    live predecessor reaches it with nonzero probability; the layer l-2
    input of a cell comes from the nearest live factor of that layer (the
    stem for l <= 2), walked over by chain connectors.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    check_image_size(x)
    hw = x.shape[2:]
    a = normalize_alpha(net.alpha) if alpha_probs is None else alpha_probs
    b = normalize_beta(net.beta) if beta_probs is None else beta_probs
    b_values = b.data if isinstance(b, Tensor) else np.asarray(b)
    if b_values.shape != net.beta.tensor.shape:
        raise ShapeError("supernet_forward", b_values.shape, net.beta.tensor.shape)

    layers = net.layers
    states: Dict[Tuple[int, int], Tensor] = {(0, 4): layers.search_stem(x, net.channels(4))}

    for l in range(1, net.num_layers + 1):
        pp_layer = max(l - 2, 0)
        live_pp = [t for t in FACTORS if (pp_layer, t) in states]
        pp_cache: Dict[int, Tensor] = {}
        for s in net.trellis.factors_at(l):
            size = (hw[0] // s, hw[1] // s)
            terms = []
            for src in (s // 2, s, s * 2):
                if (l - 1, src) not in states:
                    continue
                index = (l - 1, FACTOR_INDEX[src], Direction.between(src, s))
                if b_values[index] == 0.0:
                    continue
                h_in = layers.connector(f"conn{l}.{src}to{s}", states[(l - 1, src)], src, s, net.channels(s), size)
                if s not in pp_cache:
                    t = _nearest(live_pp, s)
                    pp_cache[s] = layers.chain(l, states[(pp_layer, t)], t, s, net.channels, hw)
                out = cell_forward(h_in, pp_cache[s], a, net.cell_weights(l, s))
                w = _weight(b, index)
                terms.append(out if (not isinstance(w, Tensor) and w == 1.0) else mul(w, out))
            if terms:
                states[(l, s)] = add_n(terms)

    heads = []
    for s in FACTORS:
        if (net.num_layers, s) in states:
            logits = layers.aspp(f"head.{s}", states[(net.num_layers, s)], s, net.num_classes, net.channels(s))
            heads.append(bilinear_resize(logits, *hw))
    if not heads:
        raise InternalConsistencyError("no live node at the last layer")
    return add_n(heads)


# ---------------------------------------------------------------- summaries


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def alpha_entropy(alpha_probs: np.ndarray) -> float:
    """Mean per-edge entropy of the operator distributions (nats)."""
    return float(_entropy_rows(alpha_probs).mean())


def beta_entropy(beta_probs: np.ndarray, mask: np.ndarray) -> float:
    """Mean entropy over trellis nodes that have feasible directions."""
    rows = mask.any(axis=-1)
    return float(_entropy_rows(beta_probs)[rows].mean())


# ---------------------------------------------------------------- snapshots


@dataclass
class ArchSnapshot:
    num_blocks: int
    trellis: Trellis
    alpha_logits: np.ndarray
    beta_logits: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return beta_mask(self.trellis)

    def alpha_probs(self) -> np.ndarray:
        with no_grad():
            return normalize_alpha(AlphaLogits(self.num_blocks, Tensor(self.alpha_logits))).data

    def beta_probs(self) -> np.ndarray:
        with no_grad():
            return normalize_beta(BetaLogits(self.trellis, Tensor(self.beta_logits))).data

    @classmethod
    def of(cls, net: SuperNet) -> "ArchSnapshot":
        return cls(net.num_blocks, net.trellis, net.alpha.tensor.data.copy(), net.beta.tensor.data.copy())


def snapshot_to_dict(snapshot: ArchSnapshot) -> dict:
    mask = snapshot.mask
    trellis = snapshot.trellis
    beta = {}
    for layer in range(trellis.num_layers):
        for s in trellis.factors_at(layer):
            row = snapshot.beta_logits[layer, FACTOR_INDEX[s]]
            beta[f"beta[{layer}][{s}]"] = [
                float(v) if ok else None for v, ok in zip(row, mask[layer, FACTOR_INDEX[s]])
            ]
    return {
        "format": SNAPSHOT_FORMAT,
        "num_blocks": snapshot.num_blocks,
        "num_layers": trellis.num_layers,
        "operators": [op.value for op in OPERATORS],
        "factors": list(FACTORS),
        "directions": [d.name.lower() for d in Direction],
        "trellis": sorted([list(n) for n in trellis.nodes]),
        "alpha": {
            f"alpha[{i}][{j}]": [float(v) for v in snapshot.alpha_logits[edge_row(i, j)]]
            for i, j in alpha_edges(snapshot.num_blocks)
        },
        "beta": beta,
    }


def snapshot_from_dict(payload: dict) -> ArchSnapshot:
    try:
        if payload["format"] != SNAPSHOT_FORMAT:
            raise ValidationError(f"unsupported snapshot format {payload['format']!r}")
        if payload["operators"] != [op.value for op in OPERATORS]:
            raise ValidationError("snapshot operator list does not match this engine")
        num_blocks = int(payload["num_blocks"])
        trellis = build_trellis(int(payload["num_layers"]))
        if num_blocks < 1:
            raise ValidationError(f"snapshot has {num_blocks} blocks")

        alpha = np.zeros((len(alpha_edges(num_blocks)), len(OPERATORS)))
        if set(payload["alpha"]) != {f"alpha[{i}][{j}]" for i, j in alpha_edges(num_blocks)}:
            raise ValidationError("snapshot alpha keys do not match the cell layout")
        for i, j in alpha_edges(num_blocks):
            row = payload["alpha"][f"alpha[{i}][{j}]"]
            if len(row) != len(OPERATORS):
                raise ValidationError(f"alpha[{i}][{j}] has {len(row)} entries")
            alpha[edge_row(i, j)] = [float(v) for v in row]

        mask = beta_mask(trellis)
        beta = np.zeros(mask.shape)
        expected = {f"beta[{l}][{s}]" for l in range(trellis.num_layers) for s in trellis.factors_at(l)}
        if set(payload["beta"]) != expected:
            raise ValidationError("snapshot beta keys do not match the trellis")
        for l in range(trellis.num_layers):
            for s in trellis.factors_at(l):
                row = payload["beta"][f"beta[{l}][{s}]"]
                if len(row) != len(Direction):
                    raise ValidationError(f"beta[{l}][{s}] has {len(row)} entries")
                for d, v in enumerate(row):
                    if (v is None) == bool(mask[l, FACTOR_INDEX[s], d]):
                        raise ValidationError(f"beta[{l}][{s}] direction {d} disagrees with the trellis mask")
                    beta[l, FACTOR_INDEX[s], d] = 0.0 if v is None else float(v)
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed snapshot: {e}")
    _require_finite("alpha", alpha)
    _require_finite("beta", beta)
    return ArchSnapshot(num_blocks, trellis, alpha, beta)


def check_normalized(alpha_probs: np.ndarray, beta_probs: np.ndarray, mask: np.ndarray, tol: float = 1e-12) -> None:
    """
    Raise InternalConsistencyError unless every operator distribution and
    every feasible node's transitions sum to one and masked entries are 0.
    """
    if np.max(np.abs(alpha_probs.sum(axis=-1) - 1.0)) > tol:
        raise InternalConsistencyError("alpha distributions do not sum to 1")
    rows = mask.any(axis=-1)
    if np.max(np.abs(beta_probs.sum(axis=-1)[rows] - 1.0), initial=0.0) > tol:
        raise InternalConsistencyError("beta transitions do not sum to 1")
    if np.any(beta_probs[~mask] != 0.0):
        raise InternalConsistencyError("masked beta entries carry probability")

