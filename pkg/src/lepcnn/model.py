"""Network descriptions, the LEPM binary model file, and the text architecture format.

Model file layout (all little-endian)::

    magic        4s   b"LEPM"
    version      u16  1
    gamma        u16
    lambda       u16
    scale_exp    i16
    weight_bits  u16
    input        3*u32  height, width, depth
    layer_count  u32
    layer records, each starting with a u8 kind:
      1 conv     6*u32 n, D, k, H, s, p; kernels i32[H*k*k*D] (H,k,k,D order); bias i64[H]
      2 fc       2*u32 m, T; weights i32[m*T] ((m,T) order); bias i64[T]
      3 relu     (no body)
      4 maxpool  2*u32 q, stride
      5 avgpool  2*u32 q, stride
    digest       32s  SHA-256 of every preceding byte

The digest doubles as the model identity pinned by the protocol handshake.
"""

import hashlib
import io
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ModelFormatError, ParameterViolation
from .fixedpoint import FpParams, encode_array, encode_weights, validate_params
from .tensor import ConvParams, ConvSpec, FcParams, FcSpec, PoolSpec, ReluSpec

MAGIC = b"LEPM"
VERSION = 1
ENC_ELEMENT_BYTES = 24
DEC_ELEMENT_BYTES = 32

_KIND_CONV, _KIND_FC, _KIND_RELU, _KIND_MAXPOOL, _KIND_AVGPOOL = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    fp: FpParams = field(default_factory=FpParams)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    def shapes(self):
        """(input_shape, output_shape) per layer; raises DimensionError on a broken chain."""
        cur = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvSpec):
                if len(cur) != 3 or cur != layer.in_shape:
                    raise DimensionError(f"layer {i}: conv expects {layer.in_shape}, gets {cur}")
                nxt = layer.out_shape
            elif isinstance(layer, FcSpec):
                size = int(np.prod(cur))
                if size != layer.m:
                    raise DimensionError(f"layer {i}: fc expects m={layer.m}, gets {size} values")
                nxt = layer.out_shape
            elif isinstance(layer, ReluSpec):
                nxt = cur
            elif isinstance(layer, PoolSpec):
                if len(cur) != 3:
                    raise DimensionError(f"layer {i}: pooling needs a 3-D input, gets {cur}")
                nxt = (layer.out_side(cur[0]), layer.out_side(cur[1]), cur[2])
            else:
                raise TypeError(f"layer {i}: unknown layer type {type(layer).__name__}")
            out.append((cur, nxt))
            cur = nxt
        return out

    @property
    def output_shape(self):
        shapes = self.shapes()
        return shapes[-1][1] if shapes else self.input_shape

    def linear_indices(self):
        """Indices of the conv/fc layers, i.e. the ones offloaded to the edge."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, (ConvSpec, FcSpec))]

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, ConvSpec)]

    def output_scale_exponent(self):
        """Fixed-point scale of the final output: each linear layer adds one weight scale."""
        return self.fp.scale_exponent * (1 + len(self.linear_indices()))


def validate_model(net, params):
    """Check parameters, per-layer shapes, weight widths and the 256-bit accumulator bound."""
    fp = net.fp
    validate_params(fp)
    if not 1 <= fp.weight_bits <= 32:
        raise ParameterViolation(f"weight_bits must lie in [1, 32], got {fp.weight_bits}")
    if fp.lam + 1 > 8 * ENC_ELEMENT_BYTES:
        raise ParameterViolation(
            f"lambda = {fp.lam} does not fit the {ENC_ELEMENT_BYTES}-byte masked element")
    for i in net.linear_indices():
        layer = net.layers[i]
        if i not in params:
            raise ModelFormatError(f"missing parameters for layer {i}")
        p = params[i]
        p.check(layer)
        w = p.weight_matrix()
        if w.size and (int(w.max()) >= fp.weight_limit or int(w.min()) < -fp.weight_limit):
            raise ParameterViolation(f"layer {i}: weights exceed signed {fp.weight_bits}-bit range")
        if p.bias.size and int(np.abs(p.bias.astype(object)).max()) > (1 << fp.lam):
            raise ParameterViolation(f"layer {i}: bias magnitude exceeds 2**lambda")
        need = accumulator_bits(fp, layer.fan_in)
        if need > 8 * DEC_ELEMENT_BYTES:
            raise ParameterViolation(
                f"layer {i}: masked outputs need {need} bits, more than the "
                f"{8 * DEC_ELEMENT_BYTES}-bit returned element")


def accumulator_bits(fp, fan_in):
    """Signed width bounding any masked layer output: lambda + w + log2(fan_in) + 2."""
    return fp.lam + fp.weight_bits + max(fan_in - 1, 0).bit_length() + 2


# ---------------------------------------------------------------- builders

def alexnet(fp=None):
    """AlexNet without LRN; paddings 0, 2, 1, 1, 1 reproduce the standard layer shapes."""
    fp = fp or FpParams()
    layers = [
        ConvSpec(n=227, D=3, k=11, H=96, s=4, p=0), ReluSpec(), PoolSpec("max", 3, 2),
        ConvSpec(n=27, D=96, k=5, H=256, s=1, p=2), ReluSpec(), PoolSpec("max", 3, 2),
        ConvSpec(n=13, D=256, k=3, H=384, s=1, p=1), ReluSpec(),
        ConvSpec(n=13, D=384, k=3, H=384, s=1, p=1), ReluSpec(),
        ConvSpec(n=13, D=384, k=3, H=256, s=1, p=1), ReluSpec(), PoolSpec("max", 3, 2),
        FcSpec(m=9216, T=4096), ReluSpec(),
        FcSpec(m=4096, T=4096), ReluSpec(),
        FcSpec(m=4096, T=1000),
    ]
    return NetworkSpec((227, 227, 3), layers, fp)


def random_params(net, rng, weight_range=None, bias_range=None):
    """Uniform random integer parameters for every linear layer.

    ``weight_range`` bounds |w| (default: the full signed weight_bits range).
    """
    fp = net.fp
    wr = fp.weight_limit - 1 if weight_range is None else weight_range
    br = wr if bias_range is None else bias_range
    params = {}
    for i in net.linear_indices():
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            shape, nb = (layer.H, layer.k, layer.k, layer.D), layer.H
            w = rng.integers(-wr, wr + 1, size=shape, dtype=np.int32)
            params[i] = ConvParams(w, rng.integers(-br, br + 1, size=nb, dtype=np.int64))
        else:
            w = rng.integers(-wr, wr + 1, size=(layer.m, layer.T), dtype=np.int32)
            params[i] = FcParams(w, rng.integers(-br, br + 1, size=layer.T, dtype=np.int64))
    return params


def quantize_params(net, real_weights):
    """Quantize real-valued weights (dict layer -> (w, b)) at the network's scale.

    Weights use the input scale; a bias is scaled to match its layer's output,
    i.e. 2**(scale * (j + 2)) for the j-th linear layer.
    """
    fp = net.fp
    params = {}
    for j, i in enumerate(net.linear_indices()):
        w, b = real_weights[i]
        qw = encode_weights(w, fp).astype(np.int32)
        bias_scale = FpParams(fp.gamma, fp.lam, fp.scale_exponent * (j + 2), fp.weight_bits)
        qb = encode_array(b, bias_scale, limit=1 << 62)
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            params[i] = ConvParams(qw.reshape(layer.H, layer.k, layer.k, layer.D), qb)
        else:
            params[i] = FcParams(qw.reshape(layer.m, layer.T), qb)
    return params


# ---------------------------------------------------------------- binary file

def dump_model(net, params):
    """Serialize to LEPM bytes (digest included)."""
    validate_model(net, params)
    fp = net.fp
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHHhH", VERSION, fp.gamma, fp.lam, fp.scale_exponent, fp.weight_bits))
    buf.write(struct.pack("<3I", *net.input_shape))
    buf.write(struct.pack("<I", len(net.layers)))
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvSpec):
            buf.write(struct.pack("<B6I", _KIND_CONV, layer.n, layer.D, layer.k, layer.H, layer.s, layer.p))
            buf.write(params[i].kernels.astype("<i4").tobytes())
            buf.write(params[i].bias.astype("<i8").tobytes())
        elif isinstance(layer, FcSpec):
            buf.write(struct.pack("<B2I", _KIND_FC, layer.m, layer.T))
            buf.write(params[i].weights.astype("<i4").tobytes())
            buf.write(params[i].bias.astype("<i8").tobytes())
        elif isinstance(layer, ReluSpec):
            buf.write(struct.pack("<B", _KIND_RELU))
        else:
            kind = _KIND_MAXPOOL if layer.kind == "max" else _KIND_AVGPOOL
            buf.write(struct.pack("<B2I", kind, layer.q, layer.stride))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise ModelFormatError("model file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def parse_model(data):
    """Parse LEPM bytes into ``(net, params, digest)``."""
    if len(data) < len(MAGIC) + 32 or data[:4] != MAGIC:
        raise ModelFormatError("not an LEPM model file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("model digest mismatch (file corrupt)")
    r = _Reader(body)
    r.take(4)
    version, gamma, lam, scale, wbits = r.unpack("<HHHhH")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    fp = FpParams(gamma, lam, scale, wbits)
    input_shape = r.unpack("<3I")
    (count,) = r.unpack("<I")
    layers, params = [], {}
    for i in range(count):
        (kind,) = r.unpack("<B")
        if kind == _KIND_CONV:
            n, D, k, H, s, p = r.unpack("<6I")
            spec = ConvSpec(n, D, k, H, s, p)
            kernels = r.array("<i4", H * k * k * D).reshape(H, k, k, D)
            params[i] = ConvParams(kernels, r.array("<i8", H))
        elif kind == _KIND_FC:
            m, T = r.unpack("<2I")
            spec = FcSpec(m, T)
            params[i] = FcParams(r.array("<i4", m * T).reshape(m, T), r.array("<i8", T))
        elif kind == _KIND_RELU:
            spec = ReluSpec()
        elif kind in (_KIND_MAXPOOL, _KIND_AVGPOOL):
            q, stride = r.unpack("<2I")
            spec = PoolSpec("max" if kind == _KIND_MAXPOOL else "avg", q, stride)
        else:
            raise ModelFormatError(f"layer {i}: unknown record kind {kind}")
        layers.append(spec)
    if r.pos != len(body):
        raise ModelFormatError(f"{len(body) - r.pos} trailing bytes after last layer")
    net = NetworkSpec(input_shape, layers, fp)
    validate_model(net, params)
    return net, params, digest


def save_model(path, net, params):
    data = dump_model(net, params)
    Path(path).write_bytes(data)
    return data[-32:]


def load_model(path):
    return parse_model(Path(path).read_bytes())


def model_digest(net, params):
    return dump_model(net, params)[-32:]


# ---------------------------------------------------------------- text format

_KV = re.compile(r"^(\w+)=(-?\d+)$")


def _kv(tokens, lineno, allowed):
    out = {}
    for tok in tokens:
        m = _KV.match(tok)
        if not m or m.group(1) not in allowed:
            raise ModelFormatError(f"line {lineno}: bad argument {tok!r} (expected {sorted(allowed)})")
        out[m.group(1)] = int(m.group(2))
    return out


def parse_arch(text):
    """Compile the text architecture description into a NetworkSpec.

    One directive per line, ``#`` starts a comment::

        fp gamma=30 lambda=160 scale=8 weight_bits=16
        input 227 227 3
        conv H=96 k=11 s=4 p=0
        relu
        maxpool q=3 s=2
        fc T=4096

    Input sizes of conv/fc layers are inferred from the previous layer.
    """
    fp_args = {}
    input_shape = None
    layers = []
    cur = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "fp":
                fp_args = _kv(rest, lineno, {"gamma", "lambda", "scale", "weight_bits"})
            elif head == "input":
                if len(rest) != 3:
                    raise ModelFormatError(f"line {lineno}: input needs height width depth")
                input_shape = cur = tuple(int(t) for t in rest)
            elif cur is None:
                raise ModelFormatError(f"line {lineno}: layer before 'input'")
            elif head == "conv":
                a = _kv(rest, lineno, {"H", "k", "s", "p"})
                if len(cur) != 3 or cur[0] != cur[1]:
                    raise ModelFormatError(f"line {lineno}: conv needs a square 3-D input, gets {cur}")
                spec = ConvSpec(cur[0], cur[2], a["k"], a["H"], a.get("s", 1), a.get("p", 0))
                layers.append(spec)
                cur = spec.out_shape
            elif head == "fc":
                a = _kv(rest, lineno, {"T"})
                spec = FcSpec(int(np.prod(cur)), a["T"])
                layers.append(spec)
                cur = spec.out_shape
            elif head == "relu":
                layers.append(ReluSpec())
            elif head in ("maxpool", "avgpool"):
                a = _kv(rest, lineno, {"q", "s"})
                spec = PoolSpec(head[:3], a["q"], a.get("s", a["q"]))
                if len(cur) != 3:
                    raise ModelFormatError(f"line {lineno}: pooling needs a 3-D input")
                cur = (spec.out_side(cur[0]), spec.out_side(cur[1]), cur[2])
                layers.append(spec)
            else:
                raise ModelFormatError(f"line {lineno}: unknown directive {head!r}")
        except KeyError as exc:
            raise ModelFormatError(f"line {lineno}: missing argument {exc.args[0]}") from None
        except DimensionError as exc:
            raise ModelFormatError(f"line {lineno}: {exc}") from None
    if input_shape is None:
        raise ModelFormatError("architecture has no 'input' line")
    defaults = FpParams()
    fp = FpParams(
        gamma=fp_args.get("gamma", defaults.gamma),
        lam=fp_args.get("lambda", defaults.lam),
        scale_exponent=fp_args.get("scale", defaults.scale_exponent),
        weight_bits=fp_args.get("weight_bits", defaults.weight_bits),
    )
    return NetworkSpec(input_shape, layers, fp)


def format_arch(net):
    """Inverse of :func:`parse_arch`."""
    fp = net.fp
    lines = [f"fp gamma={fp.gamma} lambda={fp.lam} scale={fp.scale_exponent} weight_bits={fp.weight_bits}",
             "input {} {} {}".format(*net.input_shape)]
    for layer in net.layers:
        if isinstance(layer, ConvSpec):
            lines.append(f"conv H={layer.H} k={layer.k} s={layer.s} p={layer.p}")
        elif isinstance(layer, FcSpec):
            lines.append(f"fc T={layer.T}")
        elif isinstance(layer, ReluSpec):
            lines.append("relu")
        else:
            lines.append(f"{layer.kind}pool q={layer.q} s={layer.stride}")
    return "\n".join(lines) + "\n"
