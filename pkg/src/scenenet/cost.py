"""Static multiply-accumulate and parameter counting.

One MAC is counted as one FLOP.  Convolutions cost
``oh * ow * out_c * in_c * kh * kw`` and linear layers ``in * out``;
batch-norm, activations, pooling and the loss are free.  Dilated pooling
is counted as a free sum-pool followed by a stride-1 convolution at half
resolution, so it costs exactly what the strided convolution it replaces
costs.  Counts are for a single image.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional

from .arch import Network


@dataclass
class CostReport:
    model: str
    input_size: tuple[int, int]
    total_macs: int
    total_params: int
    per_layer: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def total_gflops(self) -> float:
        return self.total_macs / 1e9

    @property
    def total_params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def conv_macs(self) -> int:
        return sum(m for path, m, _ in self.per_layer if path != "fc")

    def summary(self) -> str:
        """``<model> <gflops> <params_m>``, both rounded half-up to two decimals."""
        return f"{self.model} {round_half_up(self.total_gflops)} {round_half_up(self.total_params_m)}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "macs", "params"])
        for row in self.per_layer:
            writer.writerow(row)
        writer.writerow(["total", self.total_macs, self.total_params])
        return buf.getvalue()


def round_half_up(value: float, places: int = 2) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def count_params(net: Network) -> int:
    """Learned parameters: conv/linear weights, linear bias, batch-norm gamma and beta."""
    return sum(int(arr.size) for _, arr in net.named_params())


def count_flops(net: Network, input_size: Optional[tuple[int, int]] = None) -> int:
    """Total MACs for one image of ``input_size`` (defaults to the network's configured size)."""
    return report(net, input_size).total_macs


def report(net: Network, input_size: Optional[tuple[int, int]] = None) -> CostReport:
    if input_size is None:
        input_size = net.spec.input_size
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    rows = []
    for info in net.trace((1, 3, *input_size)):
        if info.macs or info.params:
            rows.append((info.path, info.macs, info.params))
    return CostReport(
        model=net.spec.label,
        input_size=tuple(input_size),
        total_macs=sum(r[1] for r in rows),
        total_params=sum(r[2] for r in rows),
        per_layer=rows,
    )
