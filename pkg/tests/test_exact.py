import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lepcnn.codec import bytes_to_ints, ints_to_bytes
from lepcnn.exact import exact_matmul, exact_rowdot, from_float_blocks, plan_limbs, to_limbs

big = st.integers(min_value=-(1 << 200), max_value=1 << 200)
small = st.integers(min_value=-(1 << 15), max_value=1 << 15)


def py_matmul(a, b):
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.data())
def test_exact_matmul_matches_python_ints(m, k, n, data):
    a = [[data.draw(big) for _ in range(k)] for _ in range(m)]
    b = [[data.draw(small) for _ in range(n)] for _ in range(k)]
    got = exact_matmul(np.array(a, dtype=object), np.array(b, dtype=object))
    assert got.tolist() == py_matmul(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 7), st.data())
def test_exact_rowdot_matches_python_ints(m, k, data):
    a = [[data.draw(big) for _ in range(k)] for _ in range(m)]
    b = [[data.draw(big) for _ in range(k)] for _ in range(m)]
    got = exact_rowdot(np.array(a, dtype=object), np.array(b, dtype=object))
    assert got.tolist() == [sum(x * y for x, y in zip(ra, rb)) for ra, rb in zip(a, b)]


@given(st.lists(big, min_size=1, max_size=20), st.integers(5, 40))
def test_limbs_reassemble(values, limb_bits):
    arr = np.array(values, dtype=object)
    limbs = to_limbs(arr, limb_bits)
    back = from_float_blocks(list(limbs), [i * limb_bits for i in range(len(limbs))])
    assert back.tolist() == values


@given(st.integers(1, 200), st.integers(1, 40), st.integers(1, 1 << 20))
def test_plan_limbs_respects_float_budget(a_bits, b_bits, terms):
    la, lb = plan_limbs(a_bits, b_bits, terms)
    assert la >= 1 and lb >= 1
    assert la + lb + (terms - 1).bit_length() <= 53


def test_large_reduction_is_exact():
    # 3456 terms of 160-bit x 16-bit products, the Conv-1-size worst case
    rng = np.random.default_rng(0)
    a = np.array([[int(v) for v in rng.integers(0, 1 << 62, 3456)]], dtype=object) << 98
    b = rng.integers(-(1 << 15), 1 << 15, size=(3456, 1)).astype(object)
    want = sum(int(x) * int(y) for x, y in zip(a[0], b[:, 0]))
    assert exact_matmul(a, b)[0, 0] == want


@given(st.lists(st.integers(0, (1 << 192) - 1), max_size=30))
def test_unsigned_codec_round_trip(values):
    buf = ints_to_bytes(values, 24)
    assert len(buf) == 24 * len(values)
    assert bytes_to_ints(buf, 24).tolist() == values


@given(st.lists(st.integers(-(1 << 255), (1 << 255) - 1), max_size=30))
def test_signed_codec_round_trip(values):
    assert bytes_to_ints(ints_to_bytes(values, 32, signed=True), 32, signed=True).tolist() == values


def test_codec_layout_is_little_endian():
    assert ints_to_bytes([1], 24) == b"\x01" + bytes(23)
    assert ints_to_bytes([-1], 32, signed=True) == b"\xff" * 32


@pytest.mark.parametrize("values,width,signed", [
    ([1 << 192], 24, False), ([-1], 24, False), ([1 << 255], 32, True), ([-(1 << 255) - 1], 32, True)])
def test_codec_rejects_out_of_range(values, width, signed):
    with pytest.raises(OverflowError):
        ints_to_bytes(values, width, signed)
