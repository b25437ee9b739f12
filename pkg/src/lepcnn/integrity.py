"""Spot-checking edge results by recomputing a random sample of outputs.

With ``N`` returned elements of which ``ceil(theta*N)`` are wrong, a sample
of ``ceil(r*N)`` distinct positions misses every wrong one with the
hypergeometric probability C(N - bad, s) / C(N, s).
"""

import math
import random
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError, RangeError
from .exact import from_float_blocks, max_bits, plan_limbs, to_limbs
from .tensor import ConvSpec, Tensor3, weight_bits

_SYSTEM_RANDOM = random.SystemRandom()


def as_fraction(x):
    """Exact rational for a rate; floats go through their shortest repr (0.01 -> 1/100)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def _check_rate(name, x):
    f = as_fraction(x)
    if not 0 <= f <= 1:
        raise RangeError(f"{name} must lie in [0, 1], got {x}")
    return f


def ceil_count(rate, N):
    """``ceil(rate * N)`` computed exactly."""
    return math.ceil(as_fraction(rate) * N)


def detection_probability(N, theta, r):
    """Pr(at least one corrupted element is sampled).

    ``ceil(theta*N)`` corrupted elements, ``ceil(r*N)`` sampled without
    replacement.  Evaluated in log space as
    ``1 - exp(sum_j log((good - j) / (N - j)))``.
    """
    if N < 1:
        raise RangeError(f"N must be positive, got {N}")
    bad = ceil_count(_check_rate("theta", theta), N)
    s = ceil_count(_check_rate("r", r), N)
    good = N - bad
    if bad == 0 or s == 0:
        return 0.0
    if s > good:
        return 1.0
    remaining = N - np.arange(s, dtype=np.float64)
    log_miss = math.fsum(np.log1p(-bad / remaining))
    return -math.expm1(log_miss)


def min_sample_rate(N, theta, target, step=Fraction(1, 10000)):
    """Smallest grid rate ``g*step`` whose detection probability reaches ``target``."""
    target = float(target)
    if not 0 < target < 1:
        raise RangeError(f"target must lie in (0, 1), got {target}")
    step = as_fraction(step)
    top = math.floor(1 / step)
    if detection_probability(N, theta, top * step) < target:
        raise RangeError(f"detection target {target} unreachable for N={N}, theta={theta}")
    lo, hi = 1, top  # detection probability is monotone in r: bisect the grid
    while lo < hi:
        mid = (lo + hi) // 2
        if detection_probability(N, theta, mid * step) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo * step


# ---------------------------------------------------------------- plans

@dataclass(frozen=True)
class AuditPlan:
    N: int
    rate: Fraction
    positions: tuple

    @property
    def sample_count(self):
        return len(self.positions)


def make_plan(N, rate, rng=None):
    """Uniform sample of ``ceil(rate*N)`` distinct output positions."""
    rate = _check_rate("r", rate)
    rng = rng or _SYSTEM_RANDOM
    count = ceil_count(rate, N)
    return AuditPlan(N, rate, tuple(sorted(rng.sample(range(N), count))))


@dataclass(frozen=True)
class AdversaryConfig:
    """A dishonest edge replacing a theta fraction of its outputs with random values."""

    theta: Fraction
    mode: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "theta", _check_rate("theta", self.theta))
        if self.mode != "random":
            raise ValueError(f"unknown corruption mode {self.mode!r}")


def corrupt(returned, adversary, rng=None, lam=160):
    """Replace exactly ``ceil(theta*N)`` uniformly chosen elements with fresh lambda-bit values."""
    rng = rng or _SYSTEM_RANDOM
    arr = returned.array if isinstance(returned, Tensor3) else np.asarray(returned, dtype=object)
    flat = arr.reshape(-1).copy()
    count = ceil_count(adversary.theta, flat.size)
    for pos in rng.sample(range(flat.size), count):
        flat[pos] = rng.getrandbits(lam)
    out = flat.reshape(arr.shape)
    out.flags.writeable = False  # lets Tensor3 adopt the fresh array without another copy
    return Tensor3(out) if isinstance(returned, Tensor3) else out


# ---------------------------------------------------------------- audit

@dataclass
class AuditResult:
    passed: bool
    samples: int
    validation_flops: int
    failed_position: int = None
    layer_index: int = None


class LayerAuditor:
    """Recomputes selected masked outputs of one offloaded layer.

    Built once per layer call from the masked input the client sent; the
    comparison happens in the masked domain, so no decryption key is needed.
    """

    def __init__(self, masked_input, spec, params):
        self.spec = spec
        self.params = params
        arr = masked_input.array if isinstance(masked_input, Tensor3) else np.asarray(masked_input, dtype=object)
        if arr.shape != spec.in_shape:
            raise DimensionError(f"masked input {arr.shape} does not match layer input {spec.in_shape}")
        params.check(spec)
        self.la, self.lb = plan_limbs(max_bits(arr), weight_bits(params), spec.fan_in)
        limbs = to_limbs(arr, self.la)
        if isinstance(spec, ConvSpec) and spec.p:
            p = spec.p
            limbs = np.pad(limbs, ((0, 0), (p, p), (p, p), (0, 0)))
        self._limbs = limbs

    @property
    def flops_per_sample(self):
        return 2 * self.spec.fan_in

    def expected(self, positions):
        """Masked outputs (bias included) the edge should return at flat ``positions``."""
        pos = np.asarray(positions, dtype=np.int64)
        spec = self.spec
        if isinstance(spec, ConvSpec):
            o, k, s = spec.out_side, spec.k, spec.s
            i, j, h = np.unravel_index(pos, (o, o, spec.H))
            di, dj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
            rows = (i * s)[:, None, None] + di[None]
            cols = (j * s)[:, None, None] + dj[None]
            # (L, S, k, k, D) -> (L, S, k*k*D), same column order as the kernels
            patches = self._limbs[:, rows, cols, :].reshape(self._limbs.shape[0], len(pos), -1)
            weights = self.params.kernels[h].reshape(len(pos), -1)
        else:
            h = pos
            patches = np.broadcast_to(self._limbs[:, None, :], (self._limbs.shape[0], len(pos), spec.m))
            weights = self.params.weights[:, pos].T
        w_limbs = to_limbs(weights, self.lb)
        blocks, shifts = [], []
        for q in range(w_limbs.shape[0]):
            for p in range(patches.shape[0]):
                blocks.append(np.einsum("sk,sk->s", patches[p], w_limbs[q]))
                shifts.append(p * self.la + q * self.lb)
        if not blocks or len(pos) == 0:
            return np.zeros(len(pos), dtype=object)
        return from_float_blocks(blocks, shifts) + self.params.bias[h].astype(object)

    def audit(self, returned, plan, layer_index=None):
        flat = (returned.array if isinstance(returned, Tensor3) else np.asarray(returned, dtype=object)).reshape(-1)
        if flat.size != plan.N or flat.size != self.spec.out_size:
            raise DimensionError(f"returned {flat.size} elements, plan covers {plan.N}, layer has {self.spec.out_size}")
        flops = plan.sample_count * self.flops_per_sample
        if plan.sample_count == 0:
            return AuditResult(True, 0, 0, layer_index=layer_index)
        expected = self.expected(plan.positions)
        got = flat[list(plan.positions)]
        bad = np.flatnonzero(got != expected)
        if bad.size:
            return AuditResult(False, plan.sample_count, flops, int(plan.positions[bad[0]]), layer_index)
        return AuditResult(True, plan.sample_count, flops, layer_index=layer_index)


def audit(returned, plan, masked_input, spec, params, layer_index=None):
    """One-shot audit of ``returned`` against the masked input the client sent."""
    return LayerAuditor(masked_input, spec, params).audit(returned, plan, layer_index)


def rates_by_layer(net, audit):
    """Normalise audit options to ``{layer_index: rate}``.

    Accepts None (no audits), one rate for every conv layer, a sequence of
    rates for the conv layers in order, or an explicit ``{layer_index: rate}``.
    """
    if audit is None:
        return {}
    if isinstance(audit, dict):
        return {int(k): _check_rate("r", v) for k, v in audit.items()}
    convs = net.conv_indices()
    if isinstance(audit, (int, float, str, Fraction)):
        rate = _check_rate("r", audit)
        return {i: rate for i in convs}
    rates = list(audit)
    if len(rates) != len(convs):
        raise ValueError(f"{len(rates)} sample rates given for {len(convs)} conv layers")
    return {i: _check_rate("r", r) for i, r in zip(convs, rates)}


def validation_flops(spec, rate):
    """Client FLOPs to recheck ``ceil(rate*N)`` outputs: 2*fan_in each."""
    return 2 * spec.fan_in * ceil_count(rate, spec.out_size)


@dataclass
class AuditReport:
    layers: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.layers)

    @property
    def validation_flops(self):
        return sum(r.validation_flops for r in self.layers)
