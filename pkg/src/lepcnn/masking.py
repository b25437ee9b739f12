"""One-time additive masking of conv / fc layer inputs.

Offline, a uniform lambda-bit mask R is drawn for a layer input and the
layer's bias-free linear map is applied to it, giving the decryption key.
Online, the client sends ``x + R``; the edge evaluates the layer as usual
(bias included) and the client subtracts the precomputed key.  Because the
map is linear and all arithmetic is exact, the result equals the plain
layer bit for bit.

Signed plaintexts are shifted by ``offset`` (2**(gamma-1)) into
[0, 2**gamma) before masking; the shift is folded into the decryption key,
so ``dec = Linear(R + offset)``.  With ``offset=0`` the key is exactly
``Linear(R)``.  Additions are over the integers, never reduced mod 2**lambda.
"""

import os
import secrets
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, KeyReuseError
from .exact import as_object
from .tensor import ConvSpec, FcSpec, Tensor3, add_bias, conv_linear, fc_linear

# ---------------------------------------------------------------- mask sources

def _words_to_ints(words, bits):
    """Combine rows of uint64 words into ints and keep the low ``bits`` bits."""
    out = words[:, 0].astype(object)
    for i in range(1, words.shape[1]):
        out = out + (words[:, i].astype(object) << (64 * i))
    if bits % 64:
        out = out & ((1 << bits) - 1)
    return out

class SecureMaskSource:
    """Masks from the operating system CSPRNG."""

    def draw(self, count, bits):
        nw = -(-bits // 64)
        raw = os.urandom(8 * nw * count) if count else b""
        words = np.frombuffer(raw, dtype="<u8").reshape(count, nw)
        return _words_to_ints(words, bits)


class SeededMaskSource:
    """Deterministic masks for tests and reproducible runs. Not for real keys."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def draw(self, count, bits):
        nw = -(-bits // 64)
        words = self._rng.integers(0, 1 << 64, size=(count, nw), dtype=np.uint64, endpoint=False)
        return _words_to_ints(words, bits)


class ZeroMaskSource:
    """Test hook: every mask is zero."""

    def draw(self, count, bits):
        return np.zeros(count, dtype=object)


# ---------------------------------------------------------------- key pairs

@dataclass(eq=False)
class ConvKeyPair:
    """enc: n x n x D mask; dec: o x o x H precomputed conv of the mask."""

    spec: ConvSpec
    enc: np.ndarray
    dec: np.ndarray
    offset: int = 0
    encrypted: bool = False
    consumed: bool = False

    kind = "conv"


@dataclass(eq=False)
class FcKeyPair:
    """enc: length-m mask vector; dec: length-T fc image of the mask."""

    spec: FcSpec
    enc: np.ndarray
    dec: np.ndarray
    offset: int = 0
    encrypted: bool = False
    consumed: bool = False

    kind = "fc"


def keygen_conv(spec, params, rng, lam=160, offset=0):
    """Draw the D input masks and sum each kernel's convolutions over them."""
    enc = rng.draw(spec.in_size, lam).reshape(spec.in_shape)
    dec = conv_linear(enc + offset if offset else enc, spec, params).array
    return ConvKeyPair(spec, enc, dec, offset)


def keygen_fc(spec, params, rng, lam=160, offset=0):
    enc = rng.draw(spec.m, lam)
    dec = fc_linear(enc + offset if offset else enc, spec, params)
    return FcKeyPair(spec, enc, dec, offset)


def _claim_for_encrypt(key):
    if key.encrypted or key.consumed:
        raise KeyReuseError(f"{key.kind} key pair already used; one-time keys cannot be reused")
    key.encrypted = True


def _mask(values, key):
    masked = values + key.enc
    if key.offset:
        masked = masked + key.offset
    return masked


def ppcl_encrypt(x, key):
    """Masked conv input: ``x + offset + R`` element-wise."""
    arr = x.array if isinstance(x, Tensor3) else as_object(np.asarray(x))
    if arr.shape != key.enc.shape:
        raise DimensionError(f"input {arr.shape} does not match key {key.enc.shape}")
    _claim_for_encrypt(key)
    return Tensor3(_mask(arr, key))


def edge_eval_conv(masked, spec, params):
    """What the edge runs: the ordinary conv layer on masked data (bias added once)."""
    return add_bias(conv_linear(masked, spec, params), params.bias)


def edge_eval_conv_biasfree(masked, spec, params):
    return conv_linear(masked, spec, params)


def ppcl_decrypt(masked_out, key):
    """Strip the precomputed mask image from the edge output; consumes the key."""
    arr = masked_out.array if isinstance(masked_out, Tensor3) else as_object(np.asarray(masked_out))
    if arr.shape != key.dec.shape:
        raise DimensionError(f"edge output {arr.shape} does not match key {key.dec.shape}")
    if key.consumed:
        raise KeyReuseError("conv key pair already consumed")
    key.consumed = True
    return Tensor3(arr - key.dec)


def ppfl_encrypt(v, key):
    vec = as_object(np.asarray(v))
    if vec.shape != key.enc.shape:
        raise DimensionError(f"input length {vec.shape} does not match key {key.enc.shape}")
    _claim_for_encrypt(key)
    return _mask(vec, key)


def edge_eval_fc(masked_v, spec, params):
    return fc_linear(masked_v, spec, params) + as_object(params.bias)


def edge_eval_fc_biasfree(masked_v, spec, params):
    return fc_linear(masked_v, spec, params)


def ppfl_decrypt(masked_o, key):
    out = as_object(np.asarray(masked_o))
    if out.shape != key.dec.shape:
        raise DimensionError(f"edge output length {out.shape} does not match key {key.dec.shape}")
    if key.consumed:
        raise KeyReuseError("fc key pair already consumed")
    key.consumed = True
    return out - key.dec


def edge_eval(masked, spec, params):
    if isinstance(spec, ConvSpec):
        return edge_eval_conv(masked, spec, params)
    return edge_eval_fc(masked, spec, params)


def encrypt(x, key):
    return ppcl_encrypt(x, key) if key.kind == "conv" else ppfl_encrypt(x, key)


def decrypt(masked_out, key):
    return ppcl_decrypt(masked_out, key) if key.kind == "conv" else ppfl_decrypt(masked_out, key)

# ---------------------------------------------------------------- key sets

@dataclass(eq=False)
class KeySet:
    """All one-time keys for a single inference request, keyed by layer index."""

    request_id: bytes
    fp: object
    pairs: dict = field(default_factory=dict)
    consumed: bool = False

    @property
    def hex_id(self):
        return self.request_id.hex()

    def pair_for(self, layer_index):
        try:
            return self.pairs[layer_index]
        except KeyError:
            raise KeyError(f"key set {self.hex_id} has no key for layer {layer_index}") from None

    def element_count(self):
        return sum(p.enc.size + p.dec.size for p in self.pairs.values())


def new_request_id(rng=None):
    """16 random bytes; drawn from ``rng`` when given so seeded runs are reproducible."""
    if rng is None:
        return secrets.token_bytes(16)
    return int(rng.draw(1, 128)[0]).to_bytes(16, "little")


def generate_keyset(net, params, rng, request_id=None, signed=True):
    """Offline phase for one request: a key pair per conv/fc layer of ``net``."""
    fp = net.fp
    offset = fp.offset if signed else 0
    ks = KeySet(request_id or new_request_id(rng), fp)
    for i in net.linear_indices():
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            ks.pairs[i] = keygen_conv(layer, params[i], rng, fp.lam, offset)
        else:
            ks.pairs[i] = keygen_fc(layer, params[i], rng, fp.lam, offset)
    return ks
