from decimal import Decimal
from fractions import Fraction

import pytest

from lepcnn.metrics import analyze, round_half_up, storage_overhead
from lepcnn.model import NetworkSpec, alexnet
from lepcnn.tensor import ConvSpec, FcSpec

from conftest import GOLDEN

AUDIT_R = ["0.002", "0.003", "0.008", "0.008", "0.011"]

# reference per-layer values: (client FLOPs, offloaded FLOPs, offload %, comm KB)
ALEX_COSTS = {
    "Conv-1": (444_987, 210_830_400, "99.79", "8691.15"), "Conv-2": (256_608, 895_795_200, "99.97", "5011.88"),
    "Conv-3": (108_160, 299_040_768, "99.96", "2112.50"), "Conv-4": (129_792, 448_561_152, "99.97", "2535.00"),
    "Conv-5": (108_160, 299_040_768, "99.96", "2112.50"), "FC-1": (13_312, 75_497_472, "99.98", "260.00"),
    "FC-2": (8_192, 33_554_432, "99.98", "160.00"), "FC-3": (5_096, 8_192_000, "99.94", "99.53"),
}
# with audits: (client FLOPs, offload %, comm KB, storage KB)
ALEX_AUDITED = {
    "Conv-1": (866_793, "99.59", "8691.27", "8918.03"), "Conv-2": (2_944_608, "99.67", "5011.98", "5136.88"),
    "Conv-3": (2_504_320, "99.16", "2112.60", "2180.00"), "Conv-4": (3_724_032, "99.17", "2535.10", "2602.50"),
    "Conv-5": (3_398_272, "98.86", "2112.59", "2157.50"),
}


def d(x):
    return Decimal(x)


def test_round_half_up():
    assert round_half_up(Fraction(12345, 1000)) == d("12.35")
    assert round_half_up(Fraction(-1, 200)) == d("-0.01")
    assert round_half_up(Fraction(1, 3), 4) == d("0.3333")


def test_alexnet_costs_per_layer():
    rep = analyze(alexnet())
    for name, (client, off, pct, kb) in ALEX_COSTS.items():
        row = rep.row(name)
        assert (row.client_flops, row.offloaded_flops) == (client, off)
        assert round_half_up(row.offload_pct) == d(pct)
        assert round_half_up(row.comm_kb) == round_half_up(row.storage_kb) == d(kb)


def test_alexnet_cost_totals():
    rep = analyze(alexnet())
    assert rep.client_flops == 1_074_307 and rep.offloaded_flops == 2_270_512_192
    assert round_half_up(rep.offload_pct) == d("99.95")
    assert round_half_up(rep.comm_mb) == round_half_up(rep.storage_mb) == d("20.49")
    assert rep.comm_elements * 20 == sum(r.comm_bytes20 for r in rep.rows)


def test_alexnet_costs_with_audit():
    rep = analyze(alexnet(), audit=AUDIT_R, theta="0.01")
    for name, (client, pct, comm, storage) in ALEX_AUDITED.items():
        row = rep.row(name)
        assert row.client_flops == client
        assert round_half_up(row.offload_pct) == d(pct)
        assert round_half_up(row.comm_kb_audit) == d(comm)
        assert round_half_up(row.storage_kb) == d(storage)
    # fc rows are not audited
    assert rep.row("FC-1").validation_flops == 0 and rep.row("FC-1").storage_elements == 9216 + 4096


def test_audit_storage_deltas():
    rep_on = analyze(alexnet(), audit=AUDIT_R, theta="0.01")
    rep_off = analyze(alexnet())
    deltas = [rep_on.row(f"Conv-{i}").storage_kb - rep_off.row(f"Conv-{i}").storage_kb for i in range(1, 6)]
    assert deltas[4] == 45
    assert round(max(deltas)) == 227
    # relative communication increase, computed from the displayed KB values
    increments = [(round_half_up(rep_on.row(f"Conv-{i}").comm_kb_audit) / round_half_up(rep_off.row(f"Conv-{i}").comm_kb)
                   - 1) * 100 for i in range(1, 6)]
    assert max(increments) < d("4.74e-3")


def test_storage_overhead_matches_comm_without_audit():
    net = alexnet()
    off = storage_overhead(net)
    for i in net.linear_indices():
        assert off[i] == net.layers[i].in_size + net.layers[i].out_size
    on = storage_overhead(net, audit=True)
    assert on[0] - off[0] == 96 * 11 * 11  # H k^2, as accounted in the reference costs


def test_nonlinear_counts_and_share():
    rep = analyze(alexnet())
    assert rep.pool_flops == 1_102_176
    conv_relu = sum(alexnet().layers[i].out_size for i in alexnet().conv_indices())
    assert conv_relu == 650_080
    assert rep.relu_flops == conv_relu + 2 * 4096
    share = Fraction(rep.nonlinear_flops, rep.offloaded_flops) * 100
    assert round_half_up(share) == d("0.08")


def test_overall_offload_with_audit_and_local_layers():
    # counting the local non-linear layers as client work gives the 99.33% headline
    rep = analyze(alexnet(), audit=AUDIT_R, theta="0.01")
    client = rep.client_flops + 650_080 + 1_102_176
    assert round_half_up(100 * (1 - Fraction(client, rep.offloaded_flops))) == d("99.33")


def test_single_1x1_conv_share_is_half():
    rep = analyze(NetworkSpec((1, 1, 1), [ConvSpec(1, 1, 1, 1)]))
    assert rep.rows[0].offload_share == 50
    assert rep.offload_share == 50


def test_offload_share_definition():
    rep = analyze(alexnet(), audit=AUDIT_R, theta="0.01")
    for r in rep.rows:
        assert r.offload_share == 100 * Fraction(r.offloaded_flops, r.offloaded_flops + r.local_flops
                                                 + r.validation_flops)
    # the two conventions diverge once validation work is large
    assert round_half_up(rep.row("Conv-5").offload_share) == d("98.88")


def test_rate_list_must_cover_conv_layers():
    with pytest.raises(ValueError):
        analyze(alexnet(), audit=["0.01"] * 3)


def test_fc_only_net():
    rep = analyze(NetworkSpec((1, 1, 4), [FcSpec(4, 2)]))
    assert rep.row("FC-1").offloaded_flops == 16 and rep.comm_elements == 6


@pytest.mark.parametrize("name,kwargs,fmt", [
    ("alexnet.csv", {}, "csv"), ("alexnet_audit.csv", {"audit": AUDIT_R, "theta": "0.01"}, "csv"),
    ("alexnet.txt", {}, "text")])
def test_golden_reports(name, kwargs, fmt):
    rep = analyze(alexnet(), **kwargs)
    text = rep.to_csv() if fmt == "csv" else rep.to_text()
    assert text == (GOLDEN / name).read_text()
