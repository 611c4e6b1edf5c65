# hiernas/decoder.py
"""
Turn mixing probabilities into a discrete architecture.

Cells keep the two strongest inputs per block (strength = best non-zero
operator probability). The path is the maximum-probability walk through the
trellis, found by Viterbi over log transition probabilities. Ties go to the
lower factor, both for the final node and for every back-pointer.
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Tuple

import numpy as np
from loguru import logger

from hiernas.common import (
    FACTOR_INDEX,
    FACTORS,
    NON_ZERO_OPERATORS,
    OPERATOR_INDEX,
    OPERATORS,
    Direction,
    ResourceLimitError,
    ValidationError,
)
from hiernas.relaxation import ArchSnapshot, alpha_edges, beta_mask, edge_row
from hiernas.search_space import (
    ENUMERATION_CAP,
    BlockGenotype,
    CellGenotype,
    NetworkPath,
    Trellis,
    count_paths,
    genotype_to_dict,
    path_matrix,
)

_NON_ZERO_COLUMNS = np.array([OPERATOR_INDEX[op] for op in NON_ZERO_OPERATORS])
PROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DecodedArchitecture:
    cell: CellGenotype
    path: NetworkPath
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.provenance:
            raise ValidationError("decoded architecture needs provenance")

    def to_dict(self) -> dict:
        payload = genotype_to_dict(self.cell, self.path)
        payload["provenance"] = dict(self.provenance)
        return payload


# ---------------------------------------------------------------- cell


def edge_strengths(alpha_probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per edge: the largest non-zero operator probability and that operator's
    position in NON_ZERO_OPERATORS (first in list order on ties).
    """
    nz = alpha_probs[:, _NON_ZERO_COLUMNS]
    return nz.max(axis=1), nz.argmax(axis=1)


def decode_cell(alpha_probs: np.ndarray, num_blocks: int) -> CellGenotype:
    if num_blocks < 1:
        raise ValidationError(f"cannot decode a cell with {num_blocks} blocks")
    alpha_probs = np.asarray(alpha_probs, dtype=np.float64)
    expected = (len(alpha_edges(num_blocks)), len(OPERATORS))
    if alpha_probs.shape != expected:
        raise ValidationError(f"alpha has shape {alpha_probs.shape}, expected {expected}")
    if not np.all(np.isfinite(alpha_probs)) or np.any(alpha_probs < 0):
        raise ValidationError("alpha probabilities must be finite and non-negative")

    strength, best_op = edge_strengths(alpha_probs)
    blocks = []
    for i in range(num_blocks):
        rows = [edge_row(i, j) for j in range(i + 2)]
        kept = sorted(range(i + 2), key=lambda j: (-strength[rows[j]], j))[:2]
        i1, i2 = sorted(kept)
        blocks.append(
            BlockGenotype(
                i1,
                i2,
                NON_ZERO_OPERATORS[best_op[rows[i1]]],
                NON_ZERO_OPERATORS[best_op[rows[i2]]],
            )
        )
    return CellGenotype(tuple(blocks)).check(num_blocks)


# ---------------------------------------------------------------- path


def _check_beta(beta_probs: np.ndarray, trellis: Trellis) -> np.ndarray:
    beta_probs = np.asarray(beta_probs, dtype=np.float64)
    mask = beta_mask(trellis)
    if beta_probs.shape != mask.shape:
        raise ValidationError(f"beta has shape {beta_probs.shape}, expected {mask.shape}")
    if not np.all(np.isfinite(beta_probs)) or np.any(beta_probs < 0):
        raise ValidationError("beta probabilities must be finite and non-negative")
    if np.any(beta_probs[~mask] != 0):
        raise ValidationError("beta assigns probability to an infeasible transition")
    rows = mask.any(axis=-1)
    if np.any(np.abs(beta_probs.sum(axis=-1)[rows] - 1.0) > PROB_TOLERANCE):
        raise ValidationError("beta transitions of some node do not sum to 1")
    return beta_probs


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def decode_path_viterbi(beta_probs: np.ndarray, trellis: Trellis) -> NetworkPath:
    """
    Maximize the product of transition probabilities from the stem through
    layer L. Scores accumulate left to right in log space.
    """
    logb = _log(_check_beta(beta_probs, trellis))
    num_layers = trellis.num_layers
    n = len(FACTORS)
    score = np.full((num_layers, n), -np.inf)
    back = np.zeros((num_layers, n), dtype=np.int64)

    stem = FACTOR_INDEX[4]
    for t in trellis.factors_at(1):
        score[0, FACTOR_INDEX[t]] = logb[0, stem, Direction.between(4, t)]
    for layer in range(1, num_layers):
        for t in trellis.factors_at(layer + 1):
            ti = FACTOR_INDEX[t]
            for src in (t // 2, t, t * 2):
                if src not in FACTOR_INDEX:
                    continue
                si = FACTOR_INDEX[src]
                candidate = score[layer - 1, si] + logb[layer, si, Direction.between(src, t)]
                # strict '>' keeps the lower predecessor on ties
                if candidate > score[layer, ti]:
                    score[layer, ti] = candidate
                    back[layer, ti] = si

    last = int(np.argmax(score[-1]))
    if not np.isfinite(score[-1, last]):
        raise ValidationError("beta admits no path of nonzero probability")
    seq = [last]
    for layer in range(num_layers - 1, 0, -1):
        seq.append(int(back[layer, seq[-1]]))
    return NetworkPath(tuple(FACTORS[i] for i in reversed(seq)))


def path_log_probs(beta_probs: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """
    Log probability of every row of `paths`, summed left to right.
    """
    logb = _log(beta_probs)
    factor_pos = np.zeros(max(FACTORS) + 1, dtype=np.int64)
    factor_pos[list(FACTORS)] = np.arange(len(FACTORS))
    src = np.full(len(paths), 4)
    total = np.zeros(len(paths))
    for layer in range(paths.shape[1]):
        dst = paths[:, layer]
        direction = np.where(dst < src, Direction.TO_HALF, np.where(dst > src, Direction.TO_DOUBLE, Direction.STAY))
        total = total + logb[layer, factor_pos[src], direction]
        src = dst
    return total


def _enumerable(trellis: Trellis, cap: int) -> np.ndarray:
    total = count_paths(trellis.num_layers)
    if total > cap:
        raise ResourceLimitError(f"{total} paths exceed the enumeration cap of {cap}")
    return path_matrix(trellis.num_layers)


def brute_force_best_path(beta_probs: np.ndarray, trellis: Trellis, cap: int = ENUMERATION_CAP) -> NetworkPath:
    """
    Exhaustive argmax; among equal scores the path whose factors are smallest
    reading from the last layer backwards wins (same rule as Viterbi).
    """
    beta_probs = _check_beta(beta_probs, trellis)
    paths = _enumerable(trellis, cap)
    scores = path_log_probs(beta_probs, paths)
    best = paths[scores == scores.max()]
    # np.lexsort: last key is the primary one
    winner = best[np.lexsort(tuple(best[:, c] for c in range(best.shape[1])))[0]]
    return NetworkPath(tuple(int(s) for s in winner))


class ScoredPath(NamedTuple):
    path: NetworkPath
    log_prob: float


def k_best_paths(beta_probs: np.ndarray, trellis: Trellis, k: int = 5, cap: int = ENUMERATION_CAP) -> List[ScoredPath]:
    """Debug listing of the k most probable paths, by enumeration."""
    beta_probs = _check_beta(beta_probs, trellis)
    paths = _enumerable(trellis, cap)
    scores = path_log_probs(beta_probs, paths)
    order = np.argsort(-scores, kind="stable")[:k]
    return [ScoredPath(NetworkPath(tuple(int(s) for s in paths[i])), float(scores[i])) for i in order]


class Connection(NamedTuple):
    layer: int
    source: int
    target: int
    probability: float


def strongest_connections(beta_probs: np.ndarray, trellis: Trellis) -> List[Connection]:
    """
    For every node with outgoing edges, its most probable transition.
    """
    beta_probs = _check_beta(beta_probs, trellis)
    mask = beta_mask(trellis)
    out = []
    for layer in range(trellis.num_layers):
        for s in trellis.factors_at(layer):
            si = FACTOR_INDEX[s]
            row = np.where(mask[layer, si], beta_probs[layer, si], -1.0)
            d = Direction(int(np.argmax(row)))
            out.append(Connection(layer, s, d.target(s), float(beta_probs[layer, si, d])))
    return out


# ---------------------------------------------------------------- snapshot


DECODE_SETTINGS = {
    "cell": "top2 inputs by max non-zero operator probability",
    "path": "viterbi over transition log-probabilities from the factor-4 stem",
    "ties": "lower input, operator list order, lower factor",
}


def decode_snapshot(snapshot: ArchSnapshot, source_sha256: str) -> DecodedArchitecture:
    alpha = snapshot.alpha_probs()
    beta = snapshot.beta_probs()
    cell = decode_cell(alpha, snapshot.num_blocks)
    path = decode_path_viterbi(beta, snapshot.trellis)
    logger.debug("Decoded path {} from snapshot {}", list(path), source_sha256[:12])
    return DecodedArchitecture(cell, path, {"snapshot_sha256": source_sha256, **DECODE_SETTINGS})
