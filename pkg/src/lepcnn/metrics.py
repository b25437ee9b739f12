"""Analytic cost model: FLOPs, offload percentage, communication and storage.

Counts are exact integers.  Byte figures use 20 bytes per element (one
160-bit value) and "KB"/"MB" mean 1024 / 1024**2 bytes, the usual convention
for AlexNet cost tables.

Offload percentage is ``1 - client_flops / offloaded_flops``.  The plain
share ``offloaded / (offloaded + client)`` is reported as ``offload_share``;
the two agree to two decimals except when validation work is large.
"""

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction

from .integrity import as_fraction, ceil_count, rates_by_layer
from .tensor import ConvSpec, FcSpec, ReluSpec, layer_flops, nonlinear_flops

ELEMENT_BYTES = 20
KB = 1024
MB = 1024 * 1024


def round_half_up(x, places=2):
    """Display rounding of an exact rational."""
    x = Fraction(x)
    with localcontext() as ctx:
        ctx.prec = 60
        d = Decimal(x.numerator) / Decimal(x.denominator)
        return d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class LayerCost:
    name: str
    index: int
    local_enc: int
    local_dec: int
    offloaded_flops: int
    comm_elements: int
    storage_elements: int
    validation_flops: int = 0
    audit_rate: Fraction = None
    # r * theta * N: expected number of corrupted elements caught in the sample
    audit_extra_comm: Fraction = Fraction(0)

    @property
    def local_flops(self):
        return self.local_enc + self.local_dec

    @property
    def client_flops(self):
        return self.local_flops + self.validation_flops

    @property
    def offload_pct(self):
        return 100 * (1 - Fraction(self.client_flops, self.offloaded_flops))

    @property
    def offload_share(self):
        return 100 * Fraction(self.offloaded_flops, self.offloaded_flops + self.client_flops)

    @property
    def comm_bytes20(self):
        return ELEMENT_BYTES * self.comm_elements

    @property
    def storage_bytes20(self):
        return ELEMENT_BYTES * self.storage_elements

    @property
    def comm_kb(self):
        return Fraction(self.comm_bytes20, KB)

    @property
    def comm_kb_audit(self):
        return (self.comm_elements + self.audit_extra_comm) * ELEMENT_BYTES / KB

    @property
    def storage_kb(self):
        return Fraction(self.storage_bytes20, KB)


@dataclass
class CostReport:
    rows: list
    relu_flops: int = 0
    pool_flops: int = 0
    audited: bool = False
    notes: list = field(default_factory=list)

    def _sum(self, attr):
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def local_flops(self):
        return self._sum("local_flops")

    @property
    def client_flops(self):
        return self._sum("client_flops")

    @property
    def validation_flops(self):
        return self._sum("validation_flops")

    @property
    def offloaded_flops(self):
        return self._sum("offloaded_flops")

    @property
    def comm_elements(self):
        return self._sum("comm_elements")

    @property
    def storage_elements(self):
        return self._sum("storage_elements")

    @property
    def nonlinear_flops(self):
        return self.relu_flops + self.pool_flops

    @property
    def offload_pct(self):
        return 100 * (1 - Fraction(self.client_flops, self.offloaded_flops))

    @property
    def offload_share(self):
        return 100 * Fraction(self.offloaded_flops, self.offloaded_flops + self.client_flops)

    @property
    def comm_mb(self):
        return Fraction(ELEMENT_BYTES * self.comm_elements, MB)

    @property
    def storage_mb(self):
        return Fraction(ELEMENT_BYTES * self.storage_elements, MB)

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    # ------------------------------------------------------------ output

    COLUMNS = ["layer", "local_enc_flops", "local_dec_flops", "validation_flops", "client_flops",
               "offloaded_flops", "offload_pct", "comm_elements", "comm_kb", "storage_elements",
               "storage_kb", "comm_kb_audit"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.name, r.local_enc, r.local_dec, r.validation_flops, r.client_flops,
                        r.offloaded_flops, round_half_up(r.offload_pct), r.comm_elements,
                        round_half_up(r.comm_kb), r.storage_elements, round_half_up(r.storage_kb),
                        round_half_up(r.comm_kb_audit)])
        w.writerow(["total", self._sum("local_enc"), self._sum("local_dec"), self.validation_flops,
                    self.client_flops, self.offloaded_flops, round_half_up(self.offload_pct),
                    self.comm_elements, round_half_up(Fraction(ELEMENT_BYTES * self.comm_elements, KB)),
                    self.storage_elements,
                    round_half_up(Fraction(ELEMENT_BYTES * self.storage_elements, KB)),
                    round_half_up(sum((r.comm_kb_audit for r in self.rows), Fraction(0)))])
        return buf.getvalue()

    def to_text(self):
        head = f"{'layer':<8}{'client FLOPs':>16}{'offloaded FLOPs':>20}{'offload':>10}" \
               f"{'comm':>14}{'storage':>14}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.name:<8}{r.client_flops:>16,}{r.offloaded_flops:>20,}"
                         f"{round_half_up(r.offload_pct):>9}%"
                         f"{round_half_up(r.comm_kb):>11} KB{round_half_up(r.storage_kb):>11} KB")
        lines.append("-" * len(head))
        lines.append(f"{'total':<8}{self.client_flops:>16,}{self.offloaded_flops:>20,}"
                     f"{round_half_up(self.offload_pct):>9}%"
                     f"{round_half_up(self.comm_mb):>11} MB{round_half_up(self.storage_mb):>11} MB")
        lines.append(f"local non-linear layers: ReLU {self.relu_flops:,} FLOPs, "
                     f"pooling {self.pool_flops:,} FLOPs")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def layer_names(net):
    names, nc, nf = {}, 0, 0
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvSpec):
            nc += 1
            names[i] = f"Conv-{nc}"
        elif isinstance(layer, FcSpec):
            nf += 1
            names[i] = f"FC-{nf}"
    return names


def storage_overhead(net, audit=False):
    """Per-layer key storage in elements; with audits, conv kernels (Hk^2) are kept too."""
    out = {}
    for i in net.linear_indices():
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            out[i] = layer.in_size + layer.out_size + (layer.H * layer.k ** 2 if audit else 0)
        else:
            out[i] = layer.m + layer.T
    return out


def analyze(net, audit=None, theta=None):
    """Cost report for ``net``; ``audit`` gives a sample rate per audited layer."""
    rates = rates_by_layer(net, audit)
    theta = as_fraction(theta) if theta is not None else Fraction(0)
    names = layer_names(net)
    storage = storage_overhead(net, audit=bool(rates))
    rows = []
    relu = pool = 0
    for i, ((in_shape, _), layer) in enumerate(zip(net.shapes(), net.layers)):
        if isinstance(layer, (ConvSpec, FcSpec)):
            f = layer_flops(layer)
            row = LayerCost(names[i], i, f.local_enc, f.local_dec, f.offloaded,
                            layer.in_size + layer.out_size, storage[i])
            if i in rates:
                row.audit_rate = rates[i]
                row.validation_flops = 2 * layer.fan_in * ceil_count(rates[i], layer.out_size)
                row.audit_extra_comm = rates[i] * theta * layer.out_size
            rows.append(row)
        elif isinstance(layer, ReluSpec):
            relu += nonlinear_flops(layer, in_shape)
        else:
            pool += nonlinear_flops(layer, in_shape)
    return CostReport(rows, relu, pool, audited=bool(rates))
