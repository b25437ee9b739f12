import numpy as np
import pytest

from lepcnn.errors import DimensionError, ModelFormatError, ParameterViolation
from lepcnn.fixedpoint import FpParams
from lepcnn.model import (NetworkSpec, accumulator_bits, alexnet, dump_model, format_arch, load_model, model_digest, parse_arch,
                          parse_model, quantize_params, random_params, save_model, validate_model)
from lepcnn.tensor import ConvParams, ConvSpec, FcSpec

from conftest import ROOT, toy_net


def test_model_file_round_trip(tmp_path, toy):
    net, params = toy
    digest = save_model(tmp_path / "m.lepm", net, params)
    net2, params2, digest2 = load_model(tmp_path / "m.lepm")
    assert net2 == net and digest2 == digest == model_digest(net, params)
    for i in net.linear_indices():
        assert params2[i].weight_matrix().tolist() == params[i].weight_matrix().tolist()
        assert params2[i].bias.tolist() == params[i].bias.tolist()


def test_model_file_header(toy):
    data = dump_model(*toy)
    assert data[:4] == b"LEPM" and int.from_bytes(data[4:6], "little") == 1


def test_digest_changes_with_weights(toy):
    net, params = toy
    p2 = dict(params)
    k = params[0].kernels.copy()
    k[0, 0, 0, 0] += 1
    p2[0] = ConvParams(k, params[0].bias)
    assert model_digest(net, p2) != model_digest(net, params)


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-1],
    lambda d: d[:40] + bytes([d[40] ^ 1]) + d[41:],
    lambda d: d + b"\0",
])
def test_corrupt_model_rejected(toy, mutate):
    with pytest.raises(ModelFormatError):
        parse_model(mutate(dump_model(*toy)))


def test_arch_round_trip_and_shipped_files():
    net = parse_arch((ROOT / "models" / "alexnet.arch").read_text())
    assert net == alexnet()
    assert parse_arch(format_arch(net)) == net
    assert parse_arch((ROOT / "models" / "toy.arch").read_text()) == toy_net()


@pytest.mark.parametrize("text", ["conv H=1 k=1", "input 4 4 1\nconv H=2", "input 4 4 1\nwarp x=1",
                                  "input 4 4 1\nconv H=1 k=3 s=2", "input 4 4\n"])
def test_bad_arch_rejected(text):
    with pytest.raises(ModelFormatError):
        parse_arch(text)


def test_validate_model_checks(toy):
    net, params = toy
    validate_model(net, params)
    with pytest.raises(ModelFormatError):
        validate_model(net, {k: v for k, v in params.items() if k != 0})
    big = dict(params)
    big[0] = ConvParams(params[0].kernels * 100, params[0].bias)
    with pytest.raises(ParameterViolation):
        validate_model(net, big)
    with pytest.raises(ParameterViolation):
        validate_model(toy_net(FpParams(gamma=30, lam=200, weight_bits=4)), params)  # lambda+1 > 192 bits


def test_width_bound():
    fp = FpParams()
    assert accumulator_bits(fp, 3456) == 160 + 16 + 12 + 2
    worst = max(accumulator_bits(fp, alexnet().layers[i].fan_in) for i in alexnet().linear_indices())
    assert worst <= 256
    # the bound only bites for absurd reductions once lambda and w are capped at 191 and 32 bits
    assert accumulator_bits(FpParams(gamma=8, lam=191, weight_bits=32), 1 << 31) == 256
    assert accumulator_bits(FpParams(gamma=8, lam=191, weight_bits=32), (1 << 31) + 1) == 257


def test_quantize_params_scales():
    fp = FpParams(scale_exponent=4)
    net = NetworkSpec((2, 2, 1), [ConvSpec(2, 1, 2, 1), FcSpec(1, 1)], fp)
    real = {0: (np.full((1, 2, 2, 1), 0.5), np.array([1.0])), 1: (np.array([[2.0]]), np.array([1.0]))}
    params = quantize_params(net, real)
    assert params[0].kernels.reshape(-1).tolist() == [8] * 4
    assert params[0].bias.tolist() == [256]      # output of layer 0 has scale 2**8
    assert params[1].bias.tolist() == [4096]     # output of layer 1 has scale 2**12
    assert net.output_scale_exponent() == 12


def test_shape_chain_error():
    with pytest.raises(DimensionError):
        NetworkSpec((4, 4, 1), [FcSpec(15, 2)])
