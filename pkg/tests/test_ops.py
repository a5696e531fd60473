import numpy as np
import pytest

from scnas import ops as O
from scnas import tensor as T
from scnas.ops import FULL_CATALOG, OperationKind
from scnas.tensor import Tensor

from oracles import conv_nested, gradcheck, instance_norm_direct


def leaky(x, slope=O.LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def test_catalog_order_is_fixed():
    names = [k.name for k in FULL_CATALOG]
    assert names == [
        "Conv3", "SepDilConv3Rate2", "SepDilConv3Rate3", "SepDilConv3Rate4",
        "MaxPool3", "AvgPool3", "Identity", "Zero",
    ]
    assert [int(k) for k in FULL_CATALOG] == list(range(8))


@pytest.mark.parametrize("bad", ["Conv5", 8, -1])
def test_unknown_kind_rejected(bad):
    with pytest.raises(ValueError, match="unknown operation kind"):
        O.instantiate(bad, 2)


@pytest.mark.parametrize("channels,stride", [(0, 1), (2, 3)])
def test_bad_arguments_rejected(channels, stride):
    with pytest.raises(ValueError):
        O.instantiate(OperationKind.Conv3, channels, stride)


def test_identity_passes_through(rng):
    x = Tensor(rng.standard_normal((1, 4, 5, 5, 5)), requires_grad=True)
    op = O.instantiate(OperationKind.Identity, 4)
    y = O.apply(op, x)
    np.testing.assert_array_equal(y.data, x.data)
    T.backward(T.tsum(y * 3.0))
    np.testing.assert_array_equal(x.grad, 3.0)


def test_zero_output_and_gradient(rng):
    x = Tensor(rng.standard_normal((1, 4, 5, 5, 5)), requires_grad=True)
    op = O.instantiate(OperationKind.Zero, 4)
    y = O.apply(op, x)
    assert np.all(y.data == 0) and y.shape == x.shape
    g, = T.grad(T.tsum(y * 2.0) + T.tsum(x * 0.0), [x])
    assert np.all(g == 0)


def test_identity_and_zero_own_no_parameters():
    for k in (OperationKind.Identity, OperationKind.Zero, OperationKind.MaxPool3, OperationKind.AvgPool3):
        assert O.instantiate(k, 3).parameters() == []


def test_sepdil_matches_composed_oracle(rng):
    op = O.instantiate(OperationKind.SepDilConv3Rate2, 2, seed=5)
    x = rng.standard_normal((1, 2, 8, 8, 8))
    y = O.apply(op, Tensor(x)).data
    assert y.shape == x.shape
    h = conv_nested(leaky(x), op.depthwise.data, stride=1, dilation=2, groups=2)
    h = conv_nested(h, op.pointwise.data)
    expected = instance_norm_direct(h, O.NORM_EPS)  # scale 1, shift 0 at init
    np.testing.assert_allclose(y, expected, atol=1e-8)


def test_conv3_matches_oracle_at_stride_two(rng):
    op = O.instantiate(OperationKind.Conv3, 2, stride=2, seed=1)
    x = rng.standard_normal((1, 2, 6, 6, 6))
    expected = instance_norm_direct(conv_nested(leaky(x), op.weight.data, stride=2), O.NORM_EPS)
    np.testing.assert_allclose(O.apply(op, Tensor(x)).data, expected, atol=1e-8)


@pytest.mark.parametrize("kind", FULL_CATALOG)
@pytest.mark.parametrize("stride", [1, 2])
def test_output_shape_independent_of_kind(rng, kind, stride):
    x = Tensor(rng.standard_normal((2, 3, 8, 7, 5)))
    y = O.apply(O.instantiate(kind, 3, stride=stride), x)
    assert y.shape == (2, 3) + O.out_spatial((8, 7, 5), stride)


@pytest.mark.parametrize("kind", FULL_CATALOG)
def test_stride_two_on_eight_cubed(rng, kind):
    y = O.apply(O.instantiate(kind, 2, stride=2), Tensor(rng.standard_normal((1, 2, 8, 8, 8))))
    assert y.shape == (1, 2, 4, 4, 4)


def test_maxpool_constant(rng):
    x = np.full((1, 2, 4, 4, 4), -1.25)
    y = O.apply(O.instantiate(OperationKind.MaxPool3, 2), Tensor(x)).data
    np.testing.assert_array_equal(y, x)


def test_channel_mismatch_names_edge():
    op = O.instantiate(OperationKind.Conv3, 4, label="edge (0, 2) of EncoderNormal")
    with pytest.raises(ValueError, match=r"edge \(0, 2\)"):
        O.apply(op, Tensor(np.zeros((1, 3, 4, 4, 4))))


def test_seeded_initialization_is_deterministic():
    a = O.instantiate(OperationKind.SepDilConv3Rate3, 3, seed=7)
    b = O.instantiate(OperationKind.SepDilConv3Rate3, 3, seed=7)
    c = O.instantiate(OperationKind.SepDilConv3Rate3, 3, seed=8)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.depthwise.data, c.depthwise.data)


def test_instances_do_not_share_parameters():
    rng = np.random.default_rng(0)
    a = O.instantiate(OperationKind.Conv3, 2, seed=rng)
    b = O.instantiate(OperationKind.Conv3, 2, seed=rng)
    assert a.weight is not b.weight
    assert not np.array_equal(a.weight.data, b.weight.data)


def test_kaiming_scale():
    w = O.kaiming_normal(np.random.default_rng(0), (64, 32, 3, 3, 3)).data
    expected = np.sqrt(2.0 / (1 + O.LEAKY_SLOPE**2)) / np.sqrt(32 * 27)
    assert abs(w.std() / expected - 1) < 0.02


def param_names(op):
    ids = {id(p) for p in op.parameters()}
    return [n for n, v in vars(op).items() if id(v) in ids]


@pytest.mark.parametrize("kind", FULL_CATALOG)
@pytest.mark.parametrize("stride", [1, 2])
def test_gradients_match_finite_differences(kind, stride):
    rng = np.random.default_rng(int(kind) * 10 + stride)
    op = O.instantiate(kind, 2, stride=stride, seed=3)
    names = param_names(op)
    arrays = [rng.standard_normal((1, 2, 4, 4, 4))] + [getattr(op, n).data.copy() for n in names]

    def fn(x, *params):
        for n, p in zip(names, params):
            setattr(op, n, p)
        return O.apply(op, x)

    assert gradcheck(fn, arrays, seed=int(kind)) < 1e-4


def test_flops_closed_forms():
    assert O.flops(O.instantiate(OperationKind.Identity, 4), (4, 4, 4)) == 0
    assert O.flops(O.instantiate(OperationKind.Zero, 4), (4, 4, 4)) == 0
    assert O.flops(O.instantiate(OperationKind.Conv3, 1), (4, 4, 4)) == 3456
    assert O.flops(O.instantiate(OperationKind.Conv3, 3, stride=2), (8, 8, 8)) == 2 * 27 * 9 * 64
    sep = O.flops(O.instantiate(OperationKind.SepDilConv3Rate4, 4), (4, 4))
    assert sep == 2 * (9 * 4 + 16) * 16


@pytest.mark.parametrize("channels", [2, 3, 8, 32])
def test_separable_cheaper_than_full(channels):
    shape = (6, 6, 6)
    full = O.kind_flops(OperationKind.Conv3, channels, 1, shape)
    for k in (OperationKind.SepDilConv3Rate2, OperationKind.SepDilConv3Rate3, OperationKind.SepDilConv3Rate4):
        assert O.kind_flops(k, channels, 1, shape) < full


def test_flops_counts_match_direct_enumeration():
    # count multiply-accumulates of a 1-channel 3^3 conv by walking every output voxel and tap
    n = 4
    macs = 0
    for _ in np.ndindex(n, n, n):
        for _ in np.ndindex(3, 3, 3):
            macs += 1
    assert O.kind_flops(OperationKind.Conv3, 1, 1, (n, n, n)) == 2 * macs
