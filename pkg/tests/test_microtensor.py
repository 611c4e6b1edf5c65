import numpy as np
import pytest

from hiernas.common import InvalidArgumentError, ShapeError, ValidationError
from hiernas.microtensor import (
    ParamStore,
    Tensor,
    avg_pool_3x3,
    backward,
    batch_norm,
    bilinear_resize,
    bilinear_upsample_x2,
    concat_channels,
    conv2d,
    cross_entropy_spatial,
    global_avg_pool,
    gradient_check,
    interpolation_matrix,
    max_pool_3x3,
    mul,
    no_grad,
    relu,
    softmax,
    softmax_over_channel,
    split_channels,
    tensor,
    total,
)
from hiernas.selftest import primitive_cases


def naive_conv(x, w, stride=1, dilation=1, groups=1):
    n, c_in, h, wd = x.shape
    c_out, c_group, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out, w_out = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    og = c_out // groups
    for o in range(c_out):
        g = o // og
        for r in range(h_out):
            for c in range(w_out):
                for i in range(k):
                    for j in range(k):
                        patch = xp[:, g * c_group : (g + 1) * c_group, r * stride + i * dilation, c * stride + j * dilation]
                        out[:, o, r, c] += patch @ w[o, :, i, j]
    return out


@pytest.mark.parametrize(
    "c_in, c_out, k, stride, dilation, groups",
    [
        (3, 4, 3, 1, 1, 1),
        (3, 4, 3, 2, 1, 1),
        (2, 2, 5, 1, 2, 1),
        (4, 4, 3, 1, 2, 4),
        (4, 6, 3, 2, 1, 2),
        (3, 5, 1, 1, 1, 1),
    ],
)
def test_conv2d_matches_direct_loop(rng, c_in, c_out, k, stride, dilation, groups):
    x = rng.standard_normal((2, c_in, 7, 6))
    w = rng.standard_normal((c_out, c_in // groups, k, k))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation, groups=groups)
    np.testing.assert_allclose(out.data, naive_conv(x, w, stride, dilation, groups), atol=1e-12)


def test_conv2d_stride2_output_size(rng):
    out = conv2d(Tensor(rng.standard_normal((1, 1, 9, 8))), Tensor(rng.standard_normal((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 1, 5, 4)


def test_conv2d_dilation_wider_than_input(rng):
    # every off-centre tap falls into padding; only the centre tap contributes
    x = rng.standard_normal((1, 2, 2, 2))
    w = rng.standard_normal((3, 2, 5, 5))
    out = conv2d(Tensor(x), Tensor(w), dilation=4)
    np.testing.assert_allclose(out.data, np.einsum("nchw,oc->nohw", x, w[:, :, 2, 2]), atol=1e-12)


@pytest.mark.parametrize(
    "x_shape, w_shape, groups",
    [((1, 3, 4, 4), (2, 2, 3, 3), 1), ((1, 4, 4, 4), (4, 1, 2, 2), 4), ((1, 3, 4), (1, 3, 1, 1), 1)],
)
def test_conv2d_shape_errors(x_shape, w_shape, groups):
    with pytest.raises(ShapeError, match="conv2d"):
        conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), groups=groups)


def test_avg_pool_excludes_padding():
    x = Tensor(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
    out = avg_pool_3x3(x).data[0, 0]
    assert out[0, 0] == pytest.approx((0 + 1 + 3 + 4) / 4)
    assert out[1, 1] == pytest.approx(4.0)


def test_max_pool_first_maximum_takes_gradient():
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    out = max_pool_3x3(x)
    backward(total(out))
    # every window picks its first tap in row-major order
    expected = np.zeros((3, 3))
    expected[0, 0], expected[0, 1], expected[1, 0], expected[1, 1] = 4, 2, 2, 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_global_avg_pool_and_concat_split(rng):
    x = Tensor(rng.standard_normal((2, 5, 4, 4)))
    assert global_avg_pool(x).shape == (2, 5, 1, 1)
    parts = split_channels(x, [2, 3])
    np.testing.assert_array_equal(concat_channels(parts).data, x.data)
    with pytest.raises(ShapeError):
        split_channels(x, [2, 2])


def test_interpolation_rows_sum_to_one():
    for n_out, n_in in ((8, 4), (3, 6), (5, 5), (1, 7)):
        np.testing.assert_allclose(interpolation_matrix(n_out, n_in).sum(axis=1), 1.0)


def test_bilinear_preserves_constants(rng):
    x = Tensor(np.full((1, 2, 4, 4), 3.5))
    np.testing.assert_allclose(bilinear_upsample_x2(x).data, 3.5)
    np.testing.assert_allclose(bilinear_resize(x, 2, 2).data, 3.5)
    y = Tensor(rng.standard_normal((1, 1, 4, 4)))
    np.testing.assert_array_equal(bilinear_resize(y, 4, 4).data, y.data)


def test_masked_softmax_rows():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    mask = np.array([[True, False, True], [False, False, False]])
    p = softmax(x, mask=mask).data
    assert p[0, 1] == 0.0
    assert p[0].sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(p[1], 0.0)


def test_softmax_invariant_to_shift(rng):
    x = rng.standard_normal((4, 8))
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 17.0)).data, atol=1e-12)


def test_batch_norm_normalizes(rng):
    x = Tensor(3.0 + 2.0 * rng.standard_normal((4, 3, 5, 5)))
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-5)


@pytest.mark.parametrize("scale", [1e-2, 1e-3])
def test_batch_norm_normalizes_low_variance_channels(rng, scale):
    x = Tensor(scale * rng.standard_normal((4, 3, 5, 5)))
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_softmax_over_channel(rng):
    x = rng.standard_normal((2, 5, 3, 4))
    p = softmax_over_channel(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    e = np.exp(x[1, :, 2, 3])
    np.testing.assert_allclose(p[1, :, 2, 3], e / e.sum(), rtol=1e-12)


def test_cross_entropy_uniform_logits_and_ignore():
    logits = Tensor(np.zeros((1, 4, 2, 2)))
    labels = np.array([[[0, 1], [255, 3]]])
    assert cross_entropy_spatial(logits, labels).item() == pytest.approx(np.log(4))


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValidationError):
        cross_entropy_spatial(logits, np.full((1, 2, 2), 5))
    with pytest.raises(ShapeError):
        cross_entropy_spatial(logits, np.zeros((1, 3, 2)))


def test_backward_accumulates_shared_leaves():
    a = tensor([2.0, -1.0], requires_grad=True)
    loss = total(mul(a, a) + a)
    backward(loss)
    np.testing.assert_allclose(a.grad, [5.0, -1.0])


def test_backward_requires_scalar():
    with pytest.raises(InvalidArgumentError):
        backward(Tensor(np.zeros(3), requires_grad=True))


def test_no_grad_records_nothing():
    a = tensor([1.0], requires_grad=True)
    with no_grad():
        out = relu(a * 2.0)
    assert not out.requires_grad
    assert out.parents == ()


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradients(name):
    f, params = primitive_cases()[name]
    report = gradient_check(f, params, h=1e-4, tolerance=1e-4, max_coords=12)
    assert report.passed, (name, report.max_rel_error, report.notes)
    assert sum(e.checked for e in report.entries) > 0


def test_gradient_check_flags_relu_kink():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    report = gradient_check(lambda: total(relu(x)), {"x": x})
    assert report["x"].skipped == 1
    assert report.notes == ["x: 1 nondifferentiable point(s), skipped"]


def test_param_store_save_load(tmp_path, rng):
    store = ParamStore()
    store.add("cell1.4.pre0.w", rng.standard_normal((4, 3, 1, 1)))
    store.add("head.4.cls.b", np.zeros(3))
    store.state["cell1.4.pre0.w"] = {"momentum": np.ones((4, 3, 1, 1))}
    loaded = ParamStore.load(store.save(tmp_path / "w.ckpt"))
    assert list(loaded) == list(store)
    np.testing.assert_array_equal(loaded["cell1.4.pre0.w"].data, store["cell1.4.pre0.w"].data)
    np.testing.assert_array_equal(loaded.state["cell1.4.pre0.w"]["momentum"], 1.0)
    assert loaded.num_elements() == 15


def test_param_store_rejects_duplicates_and_foreign_files(tmp_path):
    store = ParamStore()
    store.add("a", np.zeros(2))
    with pytest.raises(ValidationError):
        store.add("a", np.zeros(2))
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        ParamStore.load(bogus)
    with pytest.raises(ShapeError):
        store.load_arrays({"a": np.zeros(3)})


def test_gradient_check_skips_max_pool_ties():
    x = Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True)
    report = gradient_check(lambda: total(max_pool_3x3(x)), {"x": x})
    assert report["x"].skipped == 2
    assert report["x"].checked == 0
    assert report.passed


def test_gradient_check_relative_error_uses_larger_magnitude():
    x = Tensor(np.array([1.0]), requires_grad=True)
    # forward doubles, backward claims a slope of 3
    report = gradient_check(lambda: total(Tensor(2.0 * x.data, True, "wrong", (x,), lambda g: (3.0 * g,))), {"x": x})
    assert report.max_rel_error == pytest.approx(1 / 3, rel=1e-6)
    assert not report.passed
