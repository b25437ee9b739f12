"""Exact fixed-point CNN layers: the plaintext reference engine.

Every tensor element is a Python int held in a numpy object array, so
nothing here can overflow or round (average pooling excepted, which floors).
Activation tensors are laid out height x width x depth, row-major.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .exact import as_object, from_float_blocks, max_bits, plan_limbs, to_limbs


class Tensor3:
    """Immutable height x width x depth block of integers."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = as_object(np.array(data, dtype=object) if isinstance(data, list) else data)
        if arr.ndim != 3:
            raise DimensionError(f"Tensor3 needs a 3-D array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"Tensor3 dimensions must be >= 1, got {arr.shape}")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self._data = arr

    @classmethod
    def from_flat(cls, height, width, depth, elements):
        flat = as_object(np.asarray(elements))
        if flat.size != height * width * depth:
            raise DimensionError(
                f"{flat.size} elements cannot fill a {height}x{width}x{depth} tensor")
        return cls(flat.reshape(height, width, depth))

    @classmethod
    def zeros(cls, height, width, depth):
        return cls(np.zeros((height, width, depth), dtype=np.int64))

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]

    @property
    def depth(self):
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    @property
    def size(self):
        return self._data.size

    @property
    def array(self):
        """Read-only object ndarray view."""
        return self._data

    @property
    def elements(self):
        """Row-major flat view of the elements."""
        return self._data.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.shape == other.shape and bool(np.all(self._data == other._data))

    def __hash__(self):
        return hash((self.shape, tuple(self.elements[:16])))

    def __repr__(self):
        return f"Tensor3({self.height}x{self.width}x{self.depth})"


Activation = Union[Tensor3, np.ndarray]


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry: n x n x D input, H kernels of k x k x D."""

    n: int
    D: int
    k: int
    H: int
    s: int = 1
    p: int = 0

    def __post_init__(self):
        if min(self.n, self.D, self.k, self.H, self.s) < 1 or self.p < 0:
            raise DimensionError(f"invalid conv geometry {self}")
        if self.k > self.n + 2 * self.p:
            raise DimensionError(f"kernel {self.k} larger than padded input {self.n + 2 * self.p}")
        if (self.n - self.k + 2 * self.p) % self.s:
            raise DimensionError(
                f"(n - k + 2p) = {self.n - self.k + 2 * self.p} is not a multiple of stride {self.s}")

    @property
    def out_side(self):
        return (self.n - self.k + 2 * self.p) // self.s + 1

    @property
    def in_shape(self):
        return (self.n, self.n, self.D)

    @property
    def out_shape(self):
        o = self.out_side
        return (o, o, self.H)

    @property
    def in_size(self):
        return self.D * self.n * self.n

    @property
    def out_size(self):
        return self.H * self.out_side ** 2

    @property
    def fan_in(self):
        return self.D * self.k * self.k


@dataclass(frozen=True)
class FcSpec:
    """Fully-connected layer: m inputs, T neurons."""

    m: int
    T: int

    def __post_init__(self):
        if self.m < 1 or self.T < 1:
            raise DimensionError(f"invalid fc geometry {self}")

    @property
    def in_shape(self):
        return (self.m,)

    @property
    def out_shape(self):
        return (self.T,)

    @property
    def in_size(self):
        return self.m

    @property
    def out_size(self):
        return self.T

    @property
    def fan_in(self):
        return self.m


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class PoolSpec:
    kind: str  # "max" | "avg"
    q: int
    stride: int

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.q < 1 or self.stride < 1:
            raise DimensionError(f"invalid pooling geometry {self}")

    def out_side(self, side):
        if self.q > side or (side - self.q) % self.stride:
            raise DimensionError(
                f"{self.kind}pool q={self.q} stride={self.stride} does not tile side {side}")
        return (side - self.q) // self.stride + 1


LayerSpec = Union[ConvSpec, FcSpec, ReluSpec, PoolSpec]


def _check_int_array(a, name):
    a = np.asarray(a)
    if a.dtype == object or a.dtype.kind not in "iu":
        raise TypeError(f"{name} must be a native integer array, got {a.dtype}")
    return a


@dataclass(frozen=True, eq=False)
class ConvParams:
    """H kernels shaped (H, k, k, D) plus one bias per kernel."""

    kernels: np.ndarray
    bias: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        k = _check_int_array(self.kernels, "kernels")
        b = _check_int_array(self.bias, "bias")
        if k.ndim != 4 or k.shape[1] != k.shape[2]:
            raise DimensionError(f"kernels must be (H, k, k, D), got {k.shape}")
        if b.shape != (k.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {k.shape[0]} kernels")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)

    def check(self, spec):
        if self.kernels.shape != (spec.H, spec.k, spec.k, spec.D):
            raise DimensionError(
                f"kernels {self.kernels.shape} do not match spec (H,k,k,D)="
                f"{(spec.H, spec.k, spec.k, spec.D)}")

    def weight_matrix(self):
        """Kernels as a (k*k*D, H) matrix matching the im2col column order."""
        return self.kernels.reshape(self.kernels.shape[0], -1).T

    def weight_limbs(self, lb):
        return _cached_limbs(self, lb)


@dataclass(frozen=True, eq=False)
class FcParams:
    """(m, T) weight matrix plus one bias per neuron."""

    weights: np.ndarray
    bias: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        w = _check_int_array(self.weights, "weights")
        b = _check_int_array(self.bias, "bias")
        if w.ndim != 2:
            raise DimensionError(f"weights must be (m, T), got {w.shape}")
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]} neurons")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def check(self, spec):
        if self.weights.shape != (spec.m, spec.T):
            raise DimensionError(f"weights {self.weights.shape} do not match spec (m,T)={(spec.m, spec.T)}")

    def weight_matrix(self):
        return self.weights

    def weight_limbs(self, lb):
        return _cached_limbs(self, lb)


LayerParams = Union[ConvParams, FcParams]


def _cached_limbs(params, lb):
    key = ("limbs", lb)
    if key not in params._cache:
        params._cache[key] = to_limbs(params.weight_matrix(), lb)
    return params._cache[key]


def weight_bits(params):
    if "bits" not in params._cache:
        params._cache["bits"] = max_bits(params.weight_matrix())
    return params._cache["bits"]


def _linear_from_limbs(x_limbs, la, params, lb):
    """Exact (rows, K) @ (K, N) where the rows are given as limb stacks."""
    na, rows, _ = x_limbs.shape
    w_limbs = params.weight_limbs(lb)
    stacked = x_limbs.reshape(na * rows, -1)
    blocks, shifts = [], []
    for q in range(w_limbs.shape[0]):
        prod = (stacked @ w_limbs[q]).reshape(na, rows, -1)
        for p in range(na):
            blocks.append(prod[p])
            shifts.append(p * la + q * lb)
    return from_float_blocks(blocks, shifts)


def im2col_limbs(x_limbs, spec):
    """Turn an (L, n, n, D) limb stack into (L, o*o, k*k*D) patch rows."""
    p, k, s = spec.p, spec.k, spec.s
    if p:
        x_limbs = np.pad(x_limbs, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x_limbs, (k, k), axis=(1, 2))[:, ::s, ::s]
    # (L, o, o, D, k, k) -> (L, o, o, k, k, D)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    o = spec.out_side
    return win.reshape(x_limbs.shape[0], o * o, k * k * spec.D)


def _as_array(x):
    return x.array if isinstance(x, Tensor3) else as_object(np.asarray(x))


def conv_linear(x, spec, params):
    """Bias-free convolution of ``x`` (Tensor3 or (n, n, D) int array)."""
    arr = _as_array(x)
    if arr.shape != spec.in_shape:
        raise DimensionError(f"conv input {arr.shape} does not match spec {spec.in_shape}")
    params.check(spec)
    la, lb = plan_limbs(max_bits(arr), weight_bits(params), spec.fan_in)
    cols = im2col_limbs(to_limbs(arr, la), spec)
    out = _linear_from_limbs(cols, la, params, lb)
    return Tensor3(out.reshape(spec.out_shape))


def add_bias(t, bias):
    arr = t.array if isinstance(t, Tensor3) else t
    out = arr + as_object(bias)
    return Tensor3(out) if isinstance(t, Tensor3) else out


def conv_forward(x, spec, params):
    """Convolution with zero padding plus per-kernel bias."""
    return add_bias(conv_linear(x, spec, params), params.bias)


def fc_linear(v, spec, params):
    """Bias-free fully-connected layer."""
    vec = _as_array(v)
    if vec.ndim != 1 or vec.shape[0] != spec.m:
        raise DimensionError(f"fc input shape {vec.shape} does not match m={spec.m}")
    params.check(spec)
    la, lb = plan_limbs(max_bits(vec), weight_bits(params), spec.m)
    rows = to_limbs(vec.reshape(1, -1), la)
    return _linear_from_limbs(rows, la, params, lb).reshape(spec.T)


def fc_forward(v, spec, params):
    """``out[j] = sum_i v[i] * w[i, j] + bias[j]``."""
    return fc_linear(v, spec, params) + as_object(params.bias)


def relu(x):
    if isinstance(x, Tensor3):
        return Tensor3(np.where(x.array > 0, x.array, 0).astype(object))
    arr = as_object(np.asarray(x))
    return np.where(arr > 0, arr, 0).astype(object)


def pool(x, kind, q, stride):
    """Per-slice max or average pooling over q x q windows.

    Average pooling floors (rounds toward negative infinity).
    """
    spec = PoolSpec(kind, q, stride)
    if not isinstance(x, Tensor3):
        raise DimensionError("pooling needs a Tensor3 input")
    oh = spec.out_side(x.height)
    ow = spec.out_side(x.width)
    win = sliding_window_view(x.array, (q, q), axis=(0, 1))[::stride, ::stride]
    assert win.shape[:2] == (oh, ow)
    if kind == "max":
        out = win.max(axis=(-2, -1))
    else:
        out = win.sum(axis=(-2, -1)) // (q * q)
    return Tensor3(np.asarray(out, dtype=object))


def flatten(x):
    return _as_array(x).reshape(-1)


def apply_local(layer, x):
    """Run one non-linear layer on plaintext."""
    if isinstance(layer, ReluSpec):
        return relu(x)
    if isinstance(layer, PoolSpec):
        return pool(x, layer.kind, layer.q, layer.stride)
    raise TypeError(f"{type(layer).__name__} is not a local layer")


def infer_plain(x, net, params):
    """Run the whole network locally; ``params`` maps layer index -> params."""
    m = x
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvSpec):
            m = conv_forward(m, layer, params[i])
        elif isinstance(layer, FcSpec):
            if isinstance(m, Tensor3):
                m = flatten(m)
            m = fc_forward(m, layer, params[i])
        else:
            m = apply_local(layer, m)
    return flatten(m) if isinstance(m, Tensor3) else m


class LayerFlops(NamedTuple):
    local_enc: int
    local_dec: int
    offloaded: int

    @property
    def local(self):
        return self.local_enc + self.local_dec


def layer_flops(spec):
    """Client encryption/decryption and edge FLOPs for one linear layer."""
    if isinstance(spec, ConvSpec):
        o2 = spec.out_side ** 2
        return LayerFlops(spec.D * spec.n ** 2, spec.H * o2, 2 * spec.D * spec.H * spec.k ** 2 * o2)
    if isinstance(spec, FcSpec):
        return LayerFlops(spec.m, spec.T, 2 * spec.m * spec.T)
    raise TypeError(f"no offload FLOP model for {type(spec).__name__}")


def nonlinear_flops(layer, in_shape):
    """Our own count for local layers: one op per ReLU element, q*q per pooled output."""
    if isinstance(layer, ReluSpec):
        return int(np.prod(in_shape))
    if isinstance(layer, PoolSpec):
        oh = layer.out_side(in_shape[0])
        ow = layer.out_side(in_shape[1])
        return oh * ow * in_shape[2] * layer.q * layer.q
    raise TypeError(f"{type(layer).__name__} is not a local layer")
