import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import conv_oracle, fc_oracle, pool_oracle, tolist

from lepcnn.errors import DimensionError
from lepcnn.model import NetworkSpec, alexnet, random_params
from lepcnn.tensor import (ConvParams, ConvSpec, FcParams, FcSpec, PoolSpec, ReluSpec, Tensor3, conv_forward,
                           conv_linear, fc_forward, fc_linear, flatten, infer_plain, layer_flops,
                           nonlinear_flops, pool, relu)


def rand_conv(rng, spec, wr=9, br=50):
    return ConvParams(rng.integers(-wr, wr + 1, size=(spec.H, spec.k, spec.k, spec.D)),
                      rng.integers(-br, br + 1, size=spec.H))


# ---------------------------------------------------------------- Tensor3

def test_tensor3_shape_and_immutability():
    t = Tensor3.from_flat(2, 3, 4, range(24))
    assert (t.height, t.width, t.depth) == (2, 3, 4)
    assert t.size == 24 and t.elements[5] == 5
    with pytest.raises(ValueError):
        t.array[0, 0, 0] = 9


@pytest.mark.parametrize("shape", [(0, 2, 2), (2, 2)])
def test_tensor3_rejects_bad_shapes(shape):
    with pytest.raises(DimensionError):
        Tensor3(np.zeros(shape, dtype=np.int64))


def test_from_flat_count_mismatch():
    with pytest.raises(DimensionError):
        Tensor3.from_flat(2, 2, 2, range(7))


# ---------------------------------------------------------------- conv

def test_conv_4x4_kernel2_stride2_matches_loop_oracle():
    rng = np.random.default_rng(1)
    spec = ConvSpec(n=4, D=1, k=2, H=1, s=2, p=0)
    params = rand_conv(rng, spec)
    x = rng.integers(-9, 10, size=(4, 4, 1))
    out = conv_forward(Tensor3(x), spec, params)
    assert out.shape == (2, 2, 1)
    assert tolist(out.array) == conv_oracle(x.tolist(), params.kernels.tolist(), params.bias.tolist(), 2, 0)


def test_conv_zero_input_zero_bias_is_zero():
    spec = ConvSpec(n=5, D=2, k=3, H=3, s=1, p=1)
    params = ConvParams(np.ones((3, 3, 3, 2), dtype=np.int64), np.zeros(3, dtype=np.int64))
    assert not np.any(conv_forward(Tensor3.zeros(5, 5, 2), spec, params).array)


def test_alexnet_conv1_output_shape():
    spec = ConvSpec(n=227, D=3, k=11, H=96, s=4, p=0)
    assert spec.out_shape == (55, 55, 96)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 1), st.integers(0, 2 ** 32 - 1))
def test_conv_matches_loop_oracle(n, D, k, H, s, p, seed):
    if k > n + 2 * p or (n - k + 2 * p) % s:
        return
    rng = np.random.default_rng(seed)
    spec = ConvSpec(n, D, k, H, s, p)
    params = rand_conv(rng, spec, wr=1 << 15, br=1 << 40)
    x = [[[int(v) for v in row] for row in plane]
         for plane in rng.integers(-(1 << 62), 1 << 62, size=(n, n, D)).astype(object) << 40]
    got = conv_forward(Tensor3(np.array(x, dtype=object)), spec, params)
    assert tolist(got.array) == conv_oracle(x, params.kernels.tolist(), params.bias.tolist(), s, p)


@pytest.mark.parametrize("bad", [dict(n=5, D=1, k=2, H=1, s=2, p=0), dict(n=2, D=1, k=5, H=1, s=1, p=0),
                                 dict(n=4, D=1, k=2, H=1, s=0, p=0)])
def test_conv_spec_rejects_bad_geometry(bad):
    with pytest.raises(DimensionError):
        ConvSpec(**bad)


def test_conv_shape_mismatch():
    spec = ConvSpec(4, 1, 2, 1)
    with pytest.raises(DimensionError):
        conv_forward(Tensor3.zeros(5, 5, 1), spec, rand_conv(np.random.default_rng(0), spec))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_conv_linearity(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(6, 2, 3, 3, 1, 1)
    params = rand_conv(rng, spec)
    zero_bias = ConvParams(params.kernels, np.zeros(3, dtype=np.int64))
    a = rng.integers(-1000, 1000, size=(6, 6, 2)).astype(object)
    b = rng.integers(0, 1 << 62, size=(6, 6, 2)).astype(object) << 90
    lhs = conv_forward(Tensor3(a + b), spec, zero_bias)
    assert lhs.array.tolist() == (conv_forward(Tensor3(a), spec, zero_bias).array
                                  + conv_forward(Tensor3(b), spec, zero_bias).array).tolist()
    # with bias the correction is exactly one bias
    biased = conv_forward(Tensor3(a + b), spec, params).array
    parts = conv_forward(Tensor3(a), spec, params).array + conv_forward(Tensor3(b), spec, params).array
    assert (biased - parts + params.bias.astype(object)).tolist() == np.zeros_like(biased).tolist()


def test_full_window_conv_degenerates_to_fc():
    rng = np.random.default_rng(3)
    spec = ConvSpec(n=4, D=3, k=4, H=1, s=1, p=0)
    params = rand_conv(rng, spec)
    x = rng.integers(-50, 50, size=(4, 4, 3))
    fc = FcSpec(48, 1)
    fparams = FcParams(params.kernels.reshape(1, -1).T, params.bias)
    assert conv_forward(Tensor3(x), spec, params).array.reshape(-1).tolist() == \
        fc_forward(x.reshape(-1), fc, fparams).tolist()


# ---------------------------------------------------------------- fc

def test_fc_worked_example():
    out = fc_forward(np.array([2, 4]), FcSpec(2, 1), FcParams(np.array([[3], [5]]), np.array([7])))
    assert out.tolist() == [33]


def test_fc_identity():
    v = np.array([5, -3, 8, 0])
    assert fc_forward(v, FcSpec(4, 4), FcParams(np.eye(4, dtype=np.int64), np.zeros(4, dtype=np.int64))).tolist() \
        == v.tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_fc_matches_oracle(m, T, seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(-(1 << 15), 1 << 15, size=(m, T))
    b = rng.integers(-(1 << 30), 1 << 30, size=T)
    v = [int(x) << 120 for x in rng.integers(-(1 << 40), 1 << 40, size=m)]
    got = fc_forward(np.array(v, dtype=object), FcSpec(m, T), FcParams(w, b))
    assert got.tolist() == fc_oracle(v, w.tolist(), b.tolist())


def test_fc_length_mismatch():
    with pytest.raises(DimensionError):
        fc_linear(np.zeros(3, dtype=np.int64), FcSpec(4, 2), FcParams(np.zeros((4, 2), np.int64), np.zeros(2, np.int64)))


def test_fc3_output_length():
    spec = FcSpec(4096, 1000)
    params = FcParams(np.ones((4096, 1000), dtype=np.int32), np.zeros(1000, dtype=np.int64))
    assert fc_forward(np.ones(4096, dtype=np.int64), spec, params).shape == (1000,)


# ---------------------------------------------------------------- relu / pool

def test_relu_examples():
    assert relu(np.array([-1, 0, 5])).tolist() == [0, 0, 5]
    x = np.array([0, 3, 9], dtype=object)
    assert relu(x).tolist() == x.tolist()


@given(st.lists(st.integers(-(1 << 200), 1 << 200), min_size=1, max_size=30))
def test_relu_matches_max(values):
    assert relu(np.array(values, dtype=object)).tolist() == [max(v, 0) for v in values]


def test_pool_examples():
    x = Tensor3(np.array([[1, 2], [3, 4]]).reshape(2, 2, 1))
    assert pool(x, "max", 2, 2).elements.tolist() == [4]
    const = Tensor3(np.full((4, 4, 2), 7))
    for kind in ("max", "avg"):
        assert set(pool(const, kind, 2, 2).elements.tolist()) == {7}


def test_avg_pool_floors_toward_negative_infinity():
    x = Tensor3(np.array([[-1, 0], [0, 0]]).reshape(2, 2, 1))
    assert pool(x, "avg", 2, 2).elements.tolist() == [-1]


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["max", "avg"]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_pool_matches_window_scan(kind, q, stride, seed):
    n = 4 + (stride - (4 - q) % stride) % stride if q <= 4 else q
    rng = np.random.default_rng(seed)
    x = rng.integers(-1000, 1000, size=(n, n, 2))
    got = pool(Tensor3(x), kind, q, stride)
    assert tolist(got.array) == pool_oracle(x.tolist(), kind, q, stride)


def test_pool_non_tiling_is_rejected():
    with pytest.raises(DimensionError):
        pool(Tensor3.zeros(5, 5, 1), "max", 2, 2)


# ---------------------------------------------------------------- networks

def test_relu_only_net():
    net = NetworkSpec((2, 2, 1), [ReluSpec()])
    x = Tensor3(np.array([[-3, 2], [0, -1]]).reshape(2, 2, 1))
    assert infer_plain(x, net, {}).tolist() == [0, 2, 0, 0]


def test_two_layer_composition():
    rng = np.random.default_rng(5)
    spec = ConvSpec(5, 2, 3, 2, 1, 0)
    params = rand_conv(rng, spec)
    net = NetworkSpec((5, 5, 2), [spec, ReluSpec()])
    x = Tensor3(rng.integers(-20, 20, size=(5, 5, 2)))
    assert infer_plain(x, net, {0: params}).tolist() == flatten(relu(conv_forward(x, spec, params))).tolist()


def test_alexnet_runs_to_length_1000():
    net = alexnet()
    params = random_params(net, np.random.default_rng(0), weight_range=1, bias_range=0)
    x = Tensor3(np.random.default_rng(1).integers(-2, 3, size=(227, 227, 3)))
    assert infer_plain(x, net, params).shape == (1000,)


def test_network_chain_is_validated():
    with pytest.raises(DimensionError):
        NetworkSpec((8, 8, 1), [ConvSpec(8, 1, 3, 2), FcSpec(10, 2)])


# ---------------------------------------------------------------- FLOP accounting

TABLE3 = {  # local (enc + dec) and offloaded FLOPs per AlexNet layer
    "Conv-1": (444_987, 210_830_400), "Conv-2": (256_608, 895_795_200), "Conv-3": (108_160, 299_040_768),
    "Conv-4": (129_792, 448_561_152), "Conv-5": (108_160, 299_040_768),
    "FC-1": (13_312, 75_497_472), "FC-2": (8_192, 33_554_432), "FC-3": (5_096, 8_192_000),
}


def test_layer_flops_alexnet_reference():
    net = alexnet()
    got = [(layer_flops(net.layers[i]).local, layer_flops(net.layers[i]).offloaded) for i in net.linear_indices()]
    assert got == list(TABLE3.values())


def test_layer_flops_trivial_conv():
    f = layer_flops(ConvSpec(1, 1, 1, 1, 1, 0))
    assert f.offloaded == 2 and f.local == 2


def test_alexnet_paddings_are_the_unique_fit():
    # search p in 0..5 per conv layer for the reference local FLOP counts
    net = alexnet()
    found = []
    for i, (name, (local, offloaded)) in zip(net.conv_indices(), list(TABLE3.items())[:5]):
        base = net.layers[i]
        fits = [p for p in range(6)
                if (base.n - base.k + 2 * p) % base.s == 0
                and layer_flops(ConvSpec(base.n, base.D, base.k, base.H, base.s, p)) .local == local
                and layer_flops(ConvSpec(base.n, base.D, base.k, base.H, base.s, p)).offloaded == offloaded]
        found.append(fits)
    assert found == [[0], [2], [1], [1], [1]]


def test_nonlinear_counts():
    assert nonlinear_flops(ReluSpec(), (2, 3, 4)) == 24
    assert nonlinear_flops(PoolSpec("max", 3, 2), (55, 55, 96)) == 27 * 27 * 96 * 9
