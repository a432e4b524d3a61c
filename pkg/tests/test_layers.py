import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kanice import functional as F
from kanice.gradcheck import check_function, check_layer
from kanice.layers import (ICB, Activation, BatchNorm2D, Conv2D, Flatten, GroupMismatch, KANLinear,
                           KANLinearMini, Linear, MaxPool2D, NegativeLambda, Normalize,
                           layer_grid_extend, spline_l1_penalty)
from kanice.tensor import ShapeMismatch, Tape, Tensor

from . import oracles


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ------------------------------------------------------------ activations

def test_gelu_values():
    assert F.gelu(f64([0.0])).data[0] == 0.0
    assert F.gelu(f64([10.0])).data[0] == pytest.approx(10.0, abs=1e-4)
    assert F.gelu(f64([1.0])).data[0] == pytest.approx(oracles.gelu(1.0), abs=1e-15)


@given(st.lists(st.floats(-8, 8), min_size=1, max_size=30))
def test_gelu_matches_erf_oracle(xs):
    got = F.gelu(f64(xs)).data
    np.testing.assert_allclose(got, [oracles.gelu(x) for x in xs], rtol=1e-12, atol=1e-15)


def test_silu_definition_and_gradient():
    x = np.linspace(-5, 5, 21)
    np.testing.assert_allclose(F.silu(f64(x)).data, [oracles.silu(v) for v in x], atol=1e-14)
    assert F.silu(f64([0.0])).data[0] == 0.0
    t = Tensor(np.array([1.0]), requires_grad=True)
    with Tape() as tape:
        y = F.silu(t).sum()
    g = tape.backward(y)[id(t)].data[0]
    h = 1e-5
    fd = (oracles.silu(1 + h) - oracles.silu(1 - h)) / (2 * h)
    assert abs(g - fd) / abs(fd) < 1e-4


# ------------------------------------------------------------ convolution

def test_identity_1x1_kernel_returns_input():
    conv = Conv2D(3, 3, 1)
    conv.weight.data = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    conv.bias.data[:] = 0
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(conv(x).data, x)


def test_ones_kernel_on_constant_input_sums_to_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, 9.0)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (2, 2, 0)])
def test_conv_matches_naive_loops(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    got = F.conv2d(f64(x), f64(w), f64(b), stride, pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), atol=1e-10)


def test_conv_output_size_formula():
    for h, k, s, p in [(28, 3, 1, 1), (7, 3, 2, 0), (32, 5, 1, 2), (10, 4, 3, 1)]:
        conv = Conv2D(1, 1, k, stride=s, padding=p)
        assert conv(np.zeros((1, 1, h, h), dtype=np.float32)).shape[2] == (h + 2 * p - k) // s + 1


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        Conv2D(3, 4, 3)(np.zeros((1, 2, 5, 5), dtype=np.float32))


# ------------------------------------------------------------ ICB

def test_icb_zero_first_path_annihilates():
    icb = ICB(2, 4)
    icb.conv3.weight.data[:] = 0
    x = np.random.default_rng(1).normal(size=(2, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(icb(x).data, 0.0)


def test_icb_preserves_spatial_size():
    assert ICB(1, 64)(np.zeros((1, 1, 28, 28), dtype=np.float32)).shape == (1, 64, 28, 28)


def test_icb_single_pixel_is_product_of_gelus():
    icb = ICB(1, 1).to(np.float64)
    a, b = 0.7, -1.3
    icb.conv3.weight.data[:] = 0
    icb.conv5.weight.data[:] = 0
    icb.conv3.weight.data[0, 0, 1, 1] = a
    icb.conv5.weight.data[0, 0, 2, 2] = b
    out = icb(np.full((1, 1, 1, 1), 2.0)).data
    assert out[0, 0, 0, 0] == pytest.approx(oracles.gelu(2 * a) * oracles.gelu(2 * b), rel=1e-12)


def test_icb_is_symmetric_in_its_two_paths():
    rng = np.random.default_rng(2)
    icb = ICB(2, 3).to(np.float64)
    x = rng.normal(size=(2, 2, 7, 7))
    swapped = ICB(2, 3).to(np.float64)
    # a 3x3 kernel is a 5x5 kernel with a zero border, so the two paths can trade places
    w3 = icb.conv3.weight.data
    w5 = icb.conv5.weight.data
    swapped.conv3 = Conv2D(2, 3, 5, padding=2, bias=False, dtype=np.float64)
    swapped.conv5 = Conv2D(2, 3, 3, padding=1, bias=False, dtype=np.float64)
    swapped.conv3.weight.data = w5.copy()
    swapped.conv5.weight.data = w3.copy()
    np.testing.assert_allclose(swapped(x).data, icb(x).data, rtol=1e-12, atol=1e-14)


# ------------------------------------------------------------ batch norm

def test_batchnorm_constant_channel_goes_to_zero():
    bn = BatchNorm2D(2)
    x = np.ones((4, 2, 3, 3), dtype=np.float32) * np.array([3.0, -1.0], dtype=np.float32)[:, None, None]
    np.testing.assert_array_equal(bn(x).data, 0.0)


def test_batchnorm_already_normalized_input():
    bn = BatchNorm2D(1).to(np.float64)
    x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
    np.testing.assert_allclose(bn(x).data.ravel(), np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5))


def test_batchnorm_random_batch_statistics():
    bn = BatchNorm2D(3)
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(8, 3, 5, 5)).astype(np.float32)
    out = bn(x).data.astype(np.float64)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batchnorm_running_stats_and_eval_mode():
    bn = BatchNorm2D(1).to(np.float64)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    bn(x)
    assert bn.running_mean[0] == pytest.approx(0.1 * 3.5)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))
    bn.eval()
    before = bn.running_mean.copy()
    y = bn(x).data
    np.testing.assert_array_equal(bn.running_mean, before)
    np.testing.assert_allclose(y, (x - before[0]) / np.sqrt(bn.running_var[0] + 1e-5))


def test_batchnorm_needs_more_than_one_value_in_training():
    with pytest.raises(F.BatchTooSmall):
        BatchNorm2D(2)(np.zeros((1, 2, 1, 1), dtype=np.float32))
    BatchNorm2D(2).eval()(np.zeros((1, 2, 1, 1), dtype=np.float32))


# ------------------------------------------------------------ pooling

def test_maxpool_window_max_and_constant_input():
    assert F.maxpool2d(f64([[[[1, 2], [3, 4]]]])).data.item() == 4.0
    out = MaxPool2D(2)(np.full((1, 2, 6, 4), 3.0, dtype=np.float32))
    assert out.shape == (1, 2, 3, 2)
    np.testing.assert_array_equal(out.data, 3.0)


def test_maxpool_drops_odd_trailing_row():
    assert MaxPool2D(2)(np.zeros((1, 1, 7, 5), dtype=np.float32)).shape == (1, 1, 3, 2)


def test_maxpool_gradient_goes_to_argmax_only_and_first_on_ties():
    x = Tensor(np.array([[[[1.0, 5.0], [2.0, 0.0]], ]]), requires_grad=True)
    with Tape() as tape:
        y = F.maxpool2d(x).sum()
    np.testing.assert_array_equal(tape.backward(y)[id(x)].data, [[[[0, 1], [0, 0]]]])
    tie = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    with Tape() as tape:
        y = F.maxpool2d(tie).sum()
    np.testing.assert_array_equal(tape.backward(y)[id(tie)].data, [[[[1, 0], [0, 0]]]])


def test_maxpool_gradient_matches_finite_difference():
    x = np.random.default_rng(4).permutation(36).reshape(1, 1, 6, 6) / 7.0
    assert check_function(lambda t: F.maxpool2d(t), [x], dtype=np.float64)[0] < 1e-6


# ------------------------------------------------------------ gradients of every layer

def _small_layers():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(2, 2, 6, 6))
    vec = rng.normal(size=(3, 4)) * 0.8
    unit = rng.uniform(0.05, 0.95, size=(3, 4))
    return [
        ("conv", Conv2D(2, 3, 3, padding=1, rng=rng), img),
        ("conv_stride", Conv2D(2, 3, 3, stride=2, padding=1, rng=rng), img),
        ("icb", ICB(2, 3, rng=rng), img),
        ("batchnorm", BatchNorm2D(2), img),
        ("maxpool", MaxPool2D(2), rng.permutation(144).reshape(2, 2, 6, 6) / 50.0),
        ("gelu", Activation("gelu"), img),
        ("silu", Activation("silu"), img),
        ("linear", Linear(4, 5, rng=rng), vec),
        ("kan", KANLinear(4, 3, rng=rng), vec),
        ("mini_shared", KANLinearMini(4, 2, groups=2, rng=rng), unit),
        ("mini_per_input", KANLinearMini(4, 2, shared=False, rng=rng), unit),
        ("mini_functional", KANLinearMini(4, 2, shared=False, literal_x_gate=False, rng=rng), unit),
    ]


@pytest.mark.parametrize("name,layer,x", _small_layers(), ids=[n for n, _, _ in _small_layers()])
def test_layer_gradients_match_finite_differences(name, layer, x):
    errors = check_layer(layer, x)
    assert max(errors.values()) < 1e-3, errors


# ------------------------------------------------------------ linear and flatten

def test_linear_and_flatten_shapes():
    assert Linear(10, 5).num_parameters() == 55
    assert Flatten()(np.zeros((2, 3, 4, 5), dtype=np.float32)).shape == (2, 60)


def test_normalize_layer():
    layer = Normalize([0.5, 0.25], [0.5, 0.25])
    x = np.array([0.5, 1.0], dtype=np.float32).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(layer(x).data.ravel(), [0.0, 3.0])
    with pytest.raises(ValueError):
        Normalize([0.0], [0.0])


# ------------------------------------------------------------ KANLinear

def test_kan_all_zero_gives_zero():
    kan = KANLinear(3, 2)
    kan.base_weight.data[:] = 0
    kan.spline_coef.data[:] = 0
    assert np.all(kan(np.ones((4, 3), dtype=np.float32)).data == 0)


def test_kan_zero_spline_is_weighted_silu():
    kan = KANLinear(3, 3).to(np.float64)
    kan.spline_coef.data[:] = 0
    kan.base_weight.data = np.eye(3)
    x = np.random.default_rng(6).normal(size=(5, 3)) * 2
    np.testing.assert_array_equal(kan(x).data, F.silu(Tensor(x)).data)
    w = np.random.default_rng(7).normal(size=(3, 3))
    kan.base_weight.data = w
    np.testing.assert_allclose(kan(x).data, F.silu(Tensor(x)).data @ w.T, atol=1e-12)


def test_kan_matches_double_loop_oracle():
    rng = np.random.default_rng(8)
    kan = KANLinear(2, 1, grid_size=5, rng=rng).to(np.float64)
    kan.spline_coef.data = rng.normal(size=kan.spline_coef.shape)
    x = rng.uniform(-1.3, 1.3, size=(6, 2))
    want = oracles.kan_linear(x, kan.base_weight.data, kan.spline_coef.data, 5, 3, -1.0, 1.0)
    np.testing.assert_allclose(kan(x).data, want, atol=1e-10)


def test_kan_parameter_count_formula():
    for p, q, g, k in [(6, 4, 5, 3), (3, 7, 8, 2)]:
        assert KANLinear(p, q, grid_size=g, degree=k).num_parameters() == q * p * (g + k + 1)


def test_kan_output_is_finite_for_extreme_inputs():
    x = np.array([[1e6, -1e6, 0.0]], dtype=np.float32)
    assert np.all(np.isfinite(KANLinear(3, 2)(x).data))


# ------------------------------------------------------------ KANLinearMini

def test_mini_with_dead_spline_equals_plain_linear():
    rng = np.random.default_rng(9)
    mini = KANLinearMini(5, 3, rng=rng).to(np.float64)
    mini.spline_weight.data[:] = 0
    x = rng.normal(size=(4, 5))
    w = mini.base_weight.data.reshape(3, 5)
    np.testing.assert_allclose(mini(x).data, x @ w.T + mini.bias.data, atol=1e-12)


def test_mini_shared_constant_rows_collapse_by_partition_of_unity():
    mini = KANLinearMini(6, 2).to(np.float64)
    mini.base_weight.data[:] = 0
    mini.bias.data[:] = 0
    mini.spline_weight.data[:] = 0.25
    x = np.random.default_rng(10).uniform(-0.5, 1.5, size=(3, 6))
    np.testing.assert_allclose(mini(x).data, 6 * 0.25, atol=1e-12)


@pytest.mark.parametrize("shared,literal", [(True, None), (False, True), (False, False)])
def test_mini_matches_loop_oracle(shared, literal):
    rng = np.random.default_rng(11)
    mini = KANLinearMini(4, 2, groups=2, shared=shared, literal_x_gate=literal,
                         input_range=(-1.0, 2.0), rng=rng).to(np.float64)
    mini.spline_weight.data = rng.normal(size=mini.spline_weight.shape)
    x = rng.uniform(-1.5, 2.5, size=(5, 4))
    want = oracles.kan_mini(x, mini.base_weight.data, mini.bias.data, mini.spline_weight.data,
                            8, 3, 2, shared, mini.literal_x_gate, -1.0, 2.0)
    np.testing.assert_allclose(mini(x).data, want, atol=1e-10)


def test_mini_grouped_equals_block_diagonal_single_group():
    rng = np.random.default_rng(12)
    grouped = KANLinearMini(6, 4, groups=2, rng=rng).to(np.float64)
    single = KANLinearMini(6, 4, groups=1, rng=rng).to(np.float64)
    dense = np.zeros((4, 6))
    dense[:2, :3] = grouped.base_weight.data[0]
    dense[2:, 3:] = grouped.base_weight.data[1]
    single.base_weight.data = dense.reshape(1, 4, 6)
    single.bias.data = grouped.bias.data.copy()
    single.spline_weight.data = grouped.spline_weight.data.copy()
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(grouped(x).data, single(x).data, atol=1e-12)


def test_mini_group_mismatch_and_counts():
    with pytest.raises(GroupMismatch):
        KANLinearMini(6, 4, groups=4)
    m, n, g, k = 4, 6, 8, 3
    assert KANLinearMini(n, m).num_parameters() == m * n + m + m * (g + k)
    assert KANLinearMini(n, m, groups=2).num_parameters() == m * n // 2 + m + m * (g + k)
    assert KANLinearMini(n, m, shared=False).num_parameters() == m * n + m + m * n * (g + k)


def test_mini_shared_spline_starts_near_zero_for_wide_inputs():
    mini = KANLinearMini(4096, 8)
    mini.base_weight.data[:] = 0
    mini.bias.data[:] = 0
    assert np.abs(mini(np.zeros((2, 4096), dtype=np.float32)).data).max() < 0.1


# ------------------------------------------------------------ L1 penalty

def test_penalty_values_and_gradient():
    kan = KANLinear(1, 1, grid_size=1, degree=2).to(np.float64)
    kan.spline_coef.data = np.array([[[1.0, -2.0, 3.0]]])
    assert spline_l1_penalty(kan, 0.1).data == pytest.approx(0.6)
    kan.spline_coef.data[:] = 0
    assert spline_l1_penalty(kan, 0.1).data == 0.0
    mini = KANLinearMini(3, 2).to(np.float64)
    mini.spline_weight.data = np.random.default_rng(13).normal(size=mini.spline_weight.shape)
    with Tape() as tape:
        pen = spline_l1_penalty(mini, 0.3)
    g = tape.backward(pen)[id(mini.spline_weight)].data
    np.testing.assert_array_equal(g, 0.3 * np.sign(mini.spline_weight.data))
    with pytest.raises(NegativeLambda):
        spline_l1_penalty(mini, -1e-3)


# ------------------------------------------------------------ grid extension on a layer

def _kan_with_samples(seed, spread):
    rng = np.random.default_rng(seed)
    kan = KANLinear(3, 2, grid_size=5, rng=rng).to(np.float64)
    kan.spline_coef.data = rng.normal(size=kan.spline_coef.shape)
    return kan, rng.uniform(-spread, spread, size=(400, 3))


def test_layer_grid_extension_same_grid_is_idempotent():
    kan, samples = _kan_with_samples(14, 1.0)
    before = kan(samples).data
    layer_grid_extend(kan, 5, samples)
    assert np.abs(kan(samples).data - before).max() < 1e-5


def test_layer_grid_extension_refines_without_changing_outputs():
    kan, samples = _kan_with_samples(15, 1.0)
    before = kan(samples).data
    w = kan.base_weight.data.copy()
    layer_grid_extend(kan, 10, samples)
    assert kan.basis.grid_size == 10 and kan.spline_coef.shape == (2, 3, 13)
    np.testing.assert_array_equal(kan.base_weight.data, w)
    assert np.sqrt(np.mean((kan(samples).data - before) ** 2)) < 1e-4


def test_layer_grid_extension_covers_wider_samples():
    kan, samples = _kan_with_samples(16, 1.2)
    layer_grid_extend(kan, 10, samples)
    assert kan.basis.lo <= -1.2 + 1e-12 and kan.basis.hi >= samples.max() - 1e-12
    out = kan(samples).data
    assert np.all(np.isfinite(out))
    inside = np.random.default_rng(17).uniform(-1, 1, size=(100, 3))
    ref, _ = _kan_with_samples(16, 1.2)
    assert np.abs(kan(inside).data - ref(inside).data).max() < 1e-4
