# hiernas/selftest.py
"""
Oracle suites behind `hiernas selftest`: exact counting, Viterbi against
enumeration, finite-difference gradients, one-hot collapse.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import OPERATORS, InvalidArgumentError, StartConvention
from hiernas.decoder import brute_force_best_path, decode_path_viterbi
from hiernas.microtensor import (
    Tensor,
    avg_pool_3x3,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    cross_entropy_spatial,
    global_avg_pool,
    gradient_check,
    max_pool_3x3,
    mul,
    no_grad,
    relu,
    separable_conv,
    softmax,
    split_channels,
    total,
)
from hiernas.network import DiscreteNet, one_hot_alpha, path_beta
from hiernas.relaxation import SuperNet, beta_mask
from hiernas.search_space import (
    build_trellis,
    count_cell_genotypes,
    count_paths,
    enumerate_paths,
    random_genotype,
)

THREADS_ENV = "HIERNAS_THREADS"
GRAD_TOLERANCE = 1e-4
COLLAPSE_TOLERANCE = 1e-9


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------- shared fixtures


def random_beta(trellis, rng: np.random.Generator, spread: float = 2.0) -> np.ndarray:
    """Normalized random transition probabilities respecting the trellis mask."""
    mask = beta_mask(trellis)
    logits = np.where(mask, spread * rng.standard_normal(mask.shape), -np.inf)
    peak = np.max(logits, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(logits - peak)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z == 0, 1.0, z)


def primitive_cases(seed: int = 0) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Tensor]]]:
    """
    name -> (scalar function, parameters) for every differentiable primitive.
    Each output is contracted with a fixed random tensor.
    """
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def contract(out: Tensor) -> Tensor:
        weights = Tensor(np.random.default_rng(seed + 1).standard_normal(out.shape))
        return total(mul(out, weights))

    x = leaf(2, 4, 6, 6)
    w_full, w_dw, w_grp, w_pw = leaf(3, 4, 3, 3), leaf(4, 1, 5, 5), leaf(6, 2, 3, 3), leaf(5, 4, 1, 1)
    bias = leaf(3)
    gamma, beta = leaf(4), leaf(4)
    small = leaf(2, 3, 4, 4)
    logits = leaf(2, 3, 4, 4)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, 0] = 255
    vec = leaf(3, 4)
    mask = np.array([[1, 1, 0, 1]] * 3, dtype=bool)

    return {
        "conv2d": (lambda: contract(conv2d(x, w_full, bias)), {"x": x, "w": w_full, "b": bias}),
        "conv2d_stride2": (lambda: contract(conv2d(x, w_full, stride=2)), {"x": x, "w": w_full}),
        "conv2d_dilated": (lambda: contract(conv2d(x, w_full, dilation=2)), {"x": x, "w": w_full}),
        "conv2d_depthwise": (lambda: contract(conv2d(x, w_dw, groups=4, dilation=2)), {"x": x, "w": w_dw}),
        "conv2d_grouped": (lambda: contract(conv2d(x, w_grp, groups=2)), {"x": x, "w": w_grp}),
        "separable_conv": (lambda: contract(separable_conv(x, w_dw, w_pw)), {"x": x, "dw": w_dw, "pw": w_pw}),
        "relu": (lambda: contract(relu(x)), {"x": x}),
        "avg_pool_3x3": (lambda: contract(avg_pool_3x3(x)), {"x": x}),
        "max_pool_3x3": (lambda: contract(max_pool_3x3(x)), {"x": x}),
        "global_avg_pool": (lambda: contract(global_avg_pool(x)), {"x": x}),
        "bilinear_up": (lambda: contract(bilinear_resize(small, 8, 8)), {"x": small}),
        "bilinear_down": (lambda: contract(bilinear_resize(x, 3, 3)), {"x": x}),
        "batch_norm": (lambda: contract(batch_norm(x, gamma, beta)), {"x": x, "gamma": gamma, "beta": beta}),
        "softmax_masked": (lambda: contract(softmax(vec, axis=-1, mask=mask)), {"x": vec}),
        "cross_entropy": (lambda: cross_entropy_spatial(logits, labels), {"logits": logits}),
        "concat_split": (
            lambda: contract(concat_channels(split_channels(x, [1, 3])[::-1])),
            {"x": x},
        ),
    }


def tiny_supernet_case(seed: int = 0):
    """Cross-entropy of an L=3, B=2, F=2 supernet on one 32x32 image."""
    rng = np.random.default_rng(seed)
    net = SuperNet(3, 2, 2, num_classes=3, seed=seed)
    images = rng.uniform(size=(1, 3, 32, 32))
    labels = rng.integers(0, 3, size=(1, 32, 32))
    params = {
        "alpha": net.arch["alpha"],
        "beta": net.arch["beta"],
        "stem0.w": net.params["stem0.w"],
        "cell1.4.b0.in1.sep_conv_3x3.pw": net.params["cell1.4.b0.in1.sep_conv_3x3.pw"],
        "head.4.cls.w": net.params["head.4.cls.w"],
    }
    return (lambda: cross_entropy_spatial(net(images), labels)), params


# ---------------------------------------------------------------- suites


def suite_counting() -> SuiteResult:
    problems = []
    if count_cell_genotypes(5, len(OPERATORS)) != 556627761561600:
        problems.append("cell genotype count for B=5")
    if count_paths(12, StartConvention.FIRST_LAYER_4) != 28657:
        problems.append("path count L=12 first4")
    if count_paths(12, StartConvention.FIRST_LAYER_4_OR_8) != 75025:
        problems.append("path count L=12 first4or8")
    for layers in range(1, 13):
        trellis = build_trellis(layers)
        for convention in StartConvention:
            if sum(1 for _ in enumerate_paths(trellis, convention)) != count_paths(layers, convention):
                problems.append(f"enumeration L={layers} {convention.value}")
    return SuiteResult("counting", not problems, "; ".join(problems) or "exact counts reproduced")


def suite_viterbi(draws: int = 100, num_layers: int = 12, seed: int = 0) -> SuiteResult:
    trellis = build_trellis(num_layers)
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(draws):
        beta = random_beta(trellis, rng)
        if decode_path_viterbi(beta, trellis) != brute_force_best_path(beta, trellis):
            mismatches += 1
    return SuiteResult("viterbi", mismatches == 0, f"{mismatches}/{draws} draws disagree with enumeration")


def suite_gradients(max_coords: int = 8) -> SuiteResult:
    failures, notes = [], 0
    for name, (f, params) in primitive_cases().items():
        report = gradient_check(f, params, h=1e-4, tolerance=GRAD_TOLERANCE, max_coords=max_coords)
        notes += len(report.notes)
        if not report.passed:
            failures.append(f"{name} ({report.max_rel_error:.2e})")
    f, params = tiny_supernet_case()
    report = gradient_check(f, params, h=1e-4, tolerance=GRAD_TOLERANCE, max_coords=4)
    notes += len(report.notes)
    if not report.passed:
        failures.append(f"supernet ({report.max_rel_error:.2e})")
    detail = "; ".join(failures) if failures else f"all within {GRAD_TOLERANCE:g} ({notes} kink notes)"
    return SuiteResult("gradients", not failures, detail)


def suite_collapse(samples: int = 10, seed: int = 0) -> SuiteResult:
    net = SuperNet(4, 2, 2, num_classes=3, seed=seed)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(samples):
        cell, path = random_genotype(2, net.trellis, seed=seed + k)
        images = rng.uniform(size=(1, 3, 64, 64))
        with no_grad():
            relaxed = net(images, one_hot_alpha(cell), path_beta(path)).data
            discrete = DiscreteNet(cell, path, 2, 3, store=net.params).forward(images).data
        worst = max(worst, float(np.max(np.abs(relaxed - discrete))))
    return SuiteResult("collapse", worst <= COLLAPSE_TOLERANCE, f"max abs difference {worst:.3e}")


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "counting": suite_counting,
    "viterbi": suite_viterbi,
    "gradients": suite_gradients,
    "collapse": suite_collapse,
}


def _timed(name: str, suite: Callable[[], SuiteResult]) -> SuiteResult:
    started = time.monotonic()
    try:
        result = suite()
    except Exception as e:  # a crashing suite is a failed suite
        logger.exception("Suite {} crashed", name)
        result = SuiteResult(name, False, f"{type(e).__name__}: {e}")
    result.seconds = time.monotonic() - started
    return result


def worker_count(requested: Optional[int] = None) -> int:
    raw = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise InvalidArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if cap < 1:
            raise InvalidArgumentError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return max(1, min(cap, requested or len(SUITES)))


def run_selftest(names: Optional[List[str]] = None) -> List[SuiteResult]:
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise InvalidArgumentError(f"unknown suites {unknown}; choose from {', '.join(SUITES)}")
    workers = worker_count(len(names))
    logger.info("Running {} suite(s) on {} thread(s)", len(names), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda n: _timed(n, SUITES[n]), names))
    for r in results:
        (logger.success if r.passed else logger.error)("{}: {} ({:.1f}s)", r.name, r.detail, r.seconds)
    return results
