"""Exact integer linear algebra on arbitrary-precision values.

Elements live in numpy ``object`` arrays of Python ints.  Products are
computed by splitting both operands into signed limbs small enough that
every float64 partial sum stays below 2**53, so BLAS matmul is exact
regardless of summation order.  The limb results are shifted back together
as Python ints.
"""

import numpy as np

# |partial sum| < 2**53 keeps every float64 intermediate exact.
FLOAT_EXACT_BITS = 53


def as_object(a):
    """Return ``a`` as an object array of Python ints (no copy if already one)."""
    a = np.asarray(a)
    if a.dtype == object:
        return a
    if a.dtype.kind not in "iub":
        raise TypeError(f"expected an integer array, got dtype {a.dtype}")
    return a.astype(object)


def max_bits(a):
    """Bit length of the largest magnitude in ``a`` (0 for an all-zero/empty array)."""
    a = np.asarray(a)
    if a.size == 0:
        return 0
    if a.dtype == object:
        return max(int(np.max(a)).bit_length(), int(np.min(a)).bit_length())
    lo, hi = int(a.min()), int(a.max())
    return max(lo.bit_length(), hi.bit_length())


def plan_limbs(a_bits, b_bits, terms):
    """Pick limb widths ``(la, lb)`` for a sum of ``terms`` products.

    Guarantees ``la + lb + ceil(log2(terms)) <= 53``.  The right operand
    (weights, usually narrow) is kept whole whenever that leaves a useful
    limb width for the left operand.
    """
    k_bits = max(terms - 1, 0).bit_length()
    budget = FLOAT_EXACT_BITS - k_bits
    if budget < 2:
        raise ValueError(f"reduction length {terms} too long for exact float accumulation")
    a_bits = max(a_bits, 1)
    b_bits = max(b_bits, 1)
    if a_bits + b_bits <= budget:
        return a_bits, b_bits
    if b_bits <= budget - 8:
        return budget - b_bits, b_bits
    if a_bits <= budget - 8:
        return a_bits, budget - a_bits
    lb = budget // 2
    return budget - lb, lb


def n_limbs(bits, limb_bits):
    return max(1, -(-bits // limb_bits))


def to_limbs(a, limb_bits, count=None):
    """Split signed ints into ``count`` float64 limbs of ``limb_bits`` bits.

    Returns shape ``(count, *a.shape)`` with
    ``a == sum(limbs[i] * 2**(i*limb_bits))`` and every limb sharing the
    sign of its element.
    """
    a = np.asarray(a)
    if count is None:
        count = n_limbs(max_bits(a), limb_bits)
    out = np.empty((count,) + a.shape, dtype=np.float64)
    if a.dtype != object and limb_bits * count <= 62 and a.dtype.itemsize <= 8:
        # native fast path; magnitudes fit comfortably in int64
        a64 = a.astype(np.int64)
        neg = a64 < 0
        mag = np.abs(a64)
        mask = (1 << limb_bits) - 1
        for i in range(count):
            limb = (mag >> (i * limb_bits)) & mask
            out[i] = np.where(neg, -limb, limb)
        return out
    obj = as_object(a)
    neg = obj < 0
    mag = np.abs(obj)
    mask = (1 << limb_bits) - 1
    for i in range(count):
        limb = ((mag >> (i * limb_bits)) & mask).astype(np.int64)
        out[i] = np.where(neg, -limb, limb)
    return out


def from_float_blocks(blocks, shifts):
    """Sum ``blocks[j] << shifts[j]`` exactly into an object array."""
    total = None
    for block, shift in zip(blocks, shifts):
        term = np.rint(block).astype(np.int64).astype(object)
        if shift:
            term = term << shift
        total = term if total is None else total + term
    return total


def matmul_limbs(a_limbs, la, b_limbs, lb):
    """Exact ``A @ B`` given limb stacks ``(na, M, K)`` and ``(nb, K, N)``."""
    na, m, k = a_limbs.shape
    nb = b_limbs.shape[0]
    stacked = a_limbs.reshape(na * m, k)
    blocks, shifts = [], []
    for q in range(nb):
        prod = (stacked @ b_limbs[q]).reshape(na, m, -1)
        for p in range(na):
            blocks.append(prod[p])
            shifts.append(p * la + q * lb)
    return from_float_blocks(blocks, shifts)


def exact_matmul(a, b):
    """Exact integer product of 2-D arrays ``a (M, K)`` and ``b (K, N)``.

    Returns an object array of Python ints.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply shapes {a.shape} and {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    if k == 0 or m == 0 or n == 0:
        return np.zeros((m, n), dtype=object)
    la, lb = plan_limbs(max_bits(a), max_bits(b), k)
    a_l = to_limbs(a, la)
    b_l = to_limbs(b, lb)
    return matmul_limbs(a_l, la, b_l, lb)


def exact_rowdot(a, b):
    """Exact row-wise dot products: ``out[i] = sum_j a[i, j] * b[i, j]``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"row-wise dot needs equal 2-D shapes, got {a.shape} and {b.shape}")
    if a.size == 0:
        return np.zeros(a.shape[0], dtype=object)
    la, lb = plan_limbs(max_bits(a), max_bits(b), a.shape[1])
    a_l = to_limbs(a, la)
    b_l = to_limbs(b, lb)
    blocks, shifts = [], []
    for q in range(b_l.shape[0]):
        for p in range(a_l.shape[0]):
            blocks.append(np.einsum("ij,ij->i", a_l[p], b_l[q]))
            shifts.append(p * la + q * lb)
    return from_float_blocks(blocks, shifts)
