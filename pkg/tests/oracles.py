"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops over ints so it shares
no code path with the numpy limb arithmetic in the package.
"""

import math
from itertools import combinations


def conv_oracle(x, kernels, bias, s=1, p=0):
    """x[i][j][d] nested lists; kernels[h][a][b][d]; returns out[i][j][h]."""
    n, D = len(x), len(x[0][0])
    H, k = len(kernels), len(kernels[0])

    def at(i, j, d):
        i, j = i - p, j - p
        if 0 <= i < n and 0 <= j < n:
            return int(x[i][j][d])
        return 0

    o = (n - k + 2 * p) // s + 1
    out = [[[0] * H for _ in range(o)] for _ in range(o)]
    for i in range(o):
        for j in range(o):
            for h in range(H):
                acc = int(bias[h])
                for a in range(k):
                    for b in range(k):
                        for d in range(D):
                            acc += at(i * s + a, j * s + b, d) * int(kernels[h][a][b][d])
                out[i][j][h] = acc
    return out


def fc_oracle(v, w, bias):
    m, T = len(w), len(w[0])
    return [int(bias[j]) + sum(int(v[i]) * int(w[i][j]) for i in range(m)) for j in range(T)]


def pool_oracle(x, kind, q, stride):
    n, D = len(x), len(x[0][0])
    o = (n - q) // stride + 1
    out = [[[0] * D for _ in range(o)] for _ in range(o)]
    for i in range(o):
        for j in range(o):
            for d in range(D):
                window = [int(x[i * stride + a][j * stride + b][d]) for a in range(q) for b in range(q)]
                out[i][j][d] = max(window) if kind == "max" else sum(window) // (q * q)
    return out


def tolist(arr):
    return [[[int(v) for v in row] for row in plane] for plane in arr]


def detection_by_enumeration(N, bad, s):
    """Fraction of all size-s samples of range(N) that hit one of the first ``bad`` positions."""
    hits = total = 0
    for sample in combinations(range(N), s):
        total += 1
        hits += any(i < bad for i in sample)
    return hits / total


def detection_exact(N, bad, s):
    """1 - C(N-bad, s) / C(N, s) with exact integers."""
    return 1 - math.comb(N - bad, s) / math.comb(N, s)
