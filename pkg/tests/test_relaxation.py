import json

import numpy as np
import pytest

from hiernas.common import (
    FACTOR_INDEX,
    OPERATOR_INDEX,
    OPERATORS,
    InternalConsistencyError,
    NumericError,
    OperatorKind,
    ShapeError,
    ValidationError,
)
from hiernas.microtensor import ParamStore, Tensor, backward, cross_entropy_spatial, gradient_check, no_grad
from hiernas.network import CellWeights, DiscreteNet, Layers, one_hot_alpha, path_beta
from hiernas.relaxation import (
    ARCH_INIT_SCALE,
    AlphaLogits,
    ArchSnapshot,
    SuperNet,
    alpha_edges,
    alpha_entropy,
    beta_entropy,
    beta_mask,
    cell_forward,
    check_normalized,
    edge_row,
    mixed_operator,
    normalize_alpha,
    normalize_beta,
    snapshot_from_dict,
    snapshot_to_dict,
)
from hiernas.search_space import NetworkPath, build_trellis, random_genotype
from hiernas.selftest import random_beta, tiny_supernet_case


@pytest.fixture(scope="module")
def supernet():
    return SuperNet(4, 2, 2, num_classes=3, seed=0)


def test_alpha_rows_follow_blocks():
    edges = alpha_edges(3)
    assert len(edges) == 3 * (3 + 3) // 2
    assert [edge_row(i, j) for i, j in edges] == list(range(len(edges)))


def test_beta_mask_layout():
    mask = beta_mask(build_trellis(3))
    # stem (layer 0, factor 4) can stay or double
    assert mask[0, FACTOR_INDEX[4]].tolist() == [False, True, True]
    assert not mask[0, FACTOR_INDEX[8]].any()
    # factor 4 never halves; factor 32 never doubles
    assert not mask[:, FACTOR_INDEX[4], 0].any()
    assert not mask[:, FACTOR_INDEX[32], 2].any()
    assert mask[2, FACTOR_INDEX[16]].tolist() == [True, True, True]


def test_initial_logits_are_small(supernet):
    assert np.abs(supernet.arch["alpha"].data).max() < 10 * ARCH_INIT_SCALE
    assert supernet.arch["beta"].shape == (4, 4, 3)


def test_normalized_distributions_sum_to_one(supernet):
    with no_grad():
        a = normalize_alpha(supernet.alpha).data
        b = normalize_beta(supernet.beta).data
    check_normalized(a, b, supernet.beta.mask)
    assert np.all(b[~supernet.beta.mask] == 0.0)


def test_normalize_rejects_non_finite_logits():
    alpha = AlphaLogits(1, Tensor(np.full((2, 8), np.nan)))
    with pytest.raises(NumericError):
        normalize_alpha(alpha)
    with pytest.raises(ShapeError):
        AlphaLogits(2, Tensor(np.zeros((2, 8))))


def test_check_normalized_rejects_unnormalized_rows(supernet):
    b = path_beta(NetworkPath((4, 8, 8, 8)))
    b[3, FACTOR_INDEX[4], 0] = 0.5
    with pytest.raises(InternalConsistencyError):
        check_normalized(np.full((5, 8), 1 / 8), b, supernet.beta.mask)


@pytest.mark.parametrize("seed", range(10))
def test_one_hot_collapse_matches_discrete_net(supernet, seed):
    cell, path = random_genotype(2, supernet.trellis, seed=seed)
    images = np.random.default_rng(seed).uniform(size=(1, 3, 64, 64))
    with no_grad():
        relaxed = supernet(images, one_hot_alpha(cell), path_beta(path)).data
        discrete = DiscreteNet(cell, path, 2, 3, store=supernet.params).forward(images).data
    assert np.max(np.abs(relaxed - discrete)) <= 1e-9


def test_discrete_net_adds_no_parameters_to_supernet_store(supernet):
    before = len(supernet.params)
    for seed in range(5):
        cell, path = random_genotype(2, supernet.trellis, seed=seed)
        DiscreteNet(cell, path, 2, 3, store=supernet.params)
    assert len(supernet.params) == before


def test_supernet_output_and_arch_gradients(supernet):
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(1, 3, 32, 32))
    labels = rng.integers(0, 3, size=(1, 32, 32))
    logits = supernet(images)
    assert logits.shape == (1, 3, 32, 32)
    supernet.arch.zero_grad()
    backward(cross_entropy_spatial(logits, labels))
    alpha_grad = supernet.arch["alpha"].grad
    beta_grad = supernet.arch["beta"].grad
    assert np.abs(alpha_grad).sum() > 0
    # infeasible transitions never receive gradient
    assert np.all(beta_grad[~supernet.beta.mask] == 0.0)


def test_dead_nodes_are_skipped(supernet):
    # all mass on the factor-4 row: nothing at 16 or 32 is live
    beta = path_beta(NetworkPath((4, 4, 4, 4)))
    alpha = np.full((5, 8), 1 / 8)
    with no_grad():
        out = supernet(np.zeros((1, 3, 32, 32)), alpha, beta)
    assert out.shape == (1, 3, 32, 32)


def test_mixed_operator_is_the_weighted_sum_of_operators():
    rng = np.random.default_rng(4)
    layers = Layers(ParamStore(), seed=0)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    logits = rng.standard_normal(len(OPERATORS))
    probs = np.exp(logits) / np.exp(logits).sum()
    with no_grad():
        mixed = mixed_operator(x, probs, layers, "edge").data
        expected = sum(p * layers.operator(op, "edge", x).data for p, op in zip(probs, OPERATORS))
    np.testing.assert_allclose(mixed, expected, rtol=0, atol=1e-12)


def test_single_block_cell_with_one_hot_skip_passes_input_through():
    rng = np.random.default_rng(5)
    weights = CellWeights(Layers(ParamStore(), seed=0), "cell1.4", 1, 4)
    h_prev = Tensor(rng.standard_normal((1, 6, 8, 8)))
    h_pprev = Tensor(rng.standard_normal((1, 6, 8, 8)))
    alpha = np.zeros((len(alpha_edges(1)), len(OPERATORS)))
    alpha[edge_row(0, 0), OPERATOR_INDEX[OperatorKind.ZERO]] = 1.0
    alpha[edge_row(0, 1), OPERATOR_INDEX[OperatorKind.SKIP_CONNECT]] = 1.0
    with no_grad():
        out = cell_forward(h_prev, h_pprev, alpha, weights).data
        expected = weights.preprocess(h_prev, h_pprev)[1].data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_samples_are_independent_without_batch_norm():
    net = SuperNet(2, 1, 2, num_classes=3, seed=1, batch_norm=False)
    images = np.random.default_rng(6).uniform(size=(3, 3, 32, 32))
    with no_grad():
        batched = net(images).data
        alone = net(images[1:2]).data
    np.testing.assert_allclose(batched[1:2], alone, rtol=0, atol=1e-10)


def test_every_cell_reads_the_same_alpha(supernet, monkeypatch):
    import hiernas.relaxation as relaxation

    seen = []
    original = relaxation.cell_forward

    def recording(h_prev, h_pprev, alpha_probs, weights):
        seen.append((alpha_probs, weights.prefix))
        return original(h_prev, h_pprev, alpha_probs, weights)

    monkeypatch.setattr(relaxation, "cell_forward", recording)
    alpha = np.full((len(alpha_edges(2)), len(OPERATORS)), 1 / len(OPERATORS))
    with no_grad():
        supernet(np.zeros((1, 3, 32, 32)), alpha)
    assert len({prefix for _, prefix in seen}) > supernet.num_layers
    assert all(a is alpha for a, _ in seen)
    assert list(supernet.arch) == ["alpha", "beta"]


def test_supernet_rejects_bad_beta_shape(supernet):
    with pytest.raises(ShapeError):
        supernet(np.zeros((1, 3, 32, 32)), None, np.zeros((3, 4, 3)))


def test_entropies():
    uniform = np.full((4, 8), 1 / 8)
    assert alpha_entropy(uniform) == pytest.approx(np.log(8))
    trellis = build_trellis(6)
    assert beta_entropy(path_beta(NetworkPath((4, 8, 8, 16, 16, 8))), beta_mask(trellis)) == pytest.approx(0.0)
    assert beta_entropy(random_beta(trellis, np.random.default_rng(0)), beta_mask(trellis)) > 0


def test_snapshot_round_trip(supernet):
    snap = ArchSnapshot.of(supernet)
    payload = json.loads(json.dumps(snapshot_to_dict(snap)))
    assert payload["beta"]["beta[0][4]"][0] is None
    back = snapshot_from_dict(payload)
    np.testing.assert_array_equal(back.alpha_logits, snap.alpha_logits)
    np.testing.assert_array_equal(back.beta_logits[snap.mask], snap.beta_logits[snap.mask])
    np.testing.assert_allclose(back.beta_probs(), snap.beta_probs(), atol=0)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda p: p.update(format="other/1"),
        lambda p: p["alpha"].pop("alpha[0][0]"),
        lambda p: p["beta"]["beta[0][4]"].__setitem__(0, 1.0),
        lambda p: p["operators"].reverse(),
    ],
)
def test_snapshot_from_dict_rejects(supernet, mutate):
    payload = json.loads(json.dumps(snapshot_to_dict(ArchSnapshot.of(supernet))))
    mutate(payload)
    with pytest.raises(ValidationError):
        snapshot_from_dict(payload)


def test_tiny_supernet_gradients():
    f, params = tiny_supernet_case()
    report = gradient_check(f, params, h=1e-4, tolerance=1e-4, max_coords=2)
    assert report.passed, (report.max_rel_error, report.notes)
    assert sum(e.checked for e in report.entries) > 0
