"""Fixed-point encoding and the gamma/lambda security relation."""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterViolation, RangeError

# statistical distance target: 2**-(lambda - gamma - 1) must beat 2**-128
SECURITY_MARGIN_BITS = 128


@dataclass(frozen=True)
class FpParams:
    """gamma: plaintext bits; lam: mask bits; scale_exponent: 2**scale per unit;
    weight_bits: signed width of quantized weights."""

    gamma: int = 30
    lam: int = 160
    scale_exponent: int = 8
    weight_bits: int = 16

    @property
    def offset(self):
        """Shift that maps signed gamma-bit plaintexts into [0, 2**gamma)."""
        return 1 << (self.gamma - 1)

    @property
    def plain_limit(self):
        return 1 << (self.gamma - 1)

    @property
    def weight_limit(self):
        return 1 << (self.weight_bits - 1)


def validate_params(p):
    """Raise ParameterViolation unless gamma >= 1 and lambda - gamma - 1 > 128."""
    if p.gamma < 1:
        raise ParameterViolation(f"gamma >= 1 violated: gamma = {p.gamma}")
    slack = p.lam - p.gamma - 1
    if slack <= SECURITY_MARGIN_BITS:
        raise ParameterViolation(
            f"lambda - gamma - 1 > {SECURITY_MARGIN_BITS} violated: "
            f"{p.lam} - {p.gamma} - 1 = {slack}")


def encode(x, p):
    """Round ``x * 2**scale_exponent`` half-to-even into a signed gamma-bit int."""
    v = round(float(x) * 2.0 ** p.scale_exponent)
    if abs(v) >= p.plain_limit:
        raise RangeError(f"{x!r} encodes to {v}, outside the {p.gamma}-bit budget")
    return v


def decode(v, p, scale_exponent=None):
    scale = p.scale_exponent if scale_exponent is None else scale_exponent
    return float(v) / 2.0 ** scale if scale >= 0 else float(v) * 2.0 ** -scale


def encode_array(xs, p, limit=None):
    """Vectorised :func:`encode`; returns an int64 array."""
    limit = p.plain_limit if limit is None else limit
    scaled = np.rint(np.asarray(xs, dtype=np.float64) * 2.0 ** p.scale_exponent)
    bad = np.abs(scaled) >= limit
    if np.any(bad):
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise RangeError(f"element {idx} encodes to {scaled.reshape(-1)[idx]:.0f}, "
                         f"outside the +-{limit} budget")
    return scaled.astype(np.int64)


def encode_weights(ws, p):
    """Quantize real weights at the input scale into signed weight_bits ints."""
    return encode_array(ws, p, limit=p.weight_limit)


def decode_array(vs, p, scale_exponent=None):
    scale = p.scale_exponent if scale_exponent is None else scale_exponent
    return np.array([float(v) for v in np.asarray(vs).reshape(-1)]).reshape(np.shape(vs)) / 2.0 ** scale


def check_plain_range(values, p, where="tensor"):
    """Raise RangeError if any plaintext falls outside (-2**(gamma-1), 2**(gamma-1))."""
    arr = np.asarray(values)
    if arr.size == 0:
        return
    lo, hi = int(arr.min()), int(arr.max())
    if hi >= p.plain_limit or -lo >= p.plain_limit:
        raise RangeError(
            f"{where} holds values in [{lo}, {hi}], outside the signed {p.gamma}-bit budget; "
            "rescale the model or raise gamma")
