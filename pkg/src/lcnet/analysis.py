"""Parameter and multiply-accumulate accounting.

Conventions: one MAC per multiply-accumulate in convolutions, SE transforms
and the classifier; batch norm (foldable into the conv), activations,
pooling and dropout cost nothing.  Parameters count every weight and bias
plus BN scale/shift; BN running statistics are buffers and are excluded.
MACs are per sample.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

from .arch import LCNetConfig, Model, build_layers


@dataclass(frozen=True)
class CostRow:
    layer: str
    out_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow]
    total_params: int
    total_macs: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "out_shape", "params", "macs"])
        for row in self.rows:
            writer.writerow([row.layer, format_shape(row.out_shape), row.params, row.macs])
        return buf.getvalue()

    def to_text(self) -> str:
        table = [("layer", "out_shape", "params", "macs")]
        table += [(r.layer, format_shape(r.out_shape), f"{r.params:,}", f"{r.macs:,}") for r in self.rows]
        table.append(("total", "", f"{self.total_params:,}", f"{self.total_macs:,}"))
        widths = [max(len(line[i]) for line in table) for i in range(4)]
        lines = []
        for i, line in enumerate(table):
            cells = [line[0].ljust(widths[0]), line[1].ljust(widths[1])]
            cells += [line[2].rjust(widths[2]), line[3].rjust(widths[3])]
            lines.append("  ".join(cells).rstrip())
            if i == 0 or i == len(table) - 2:
                lines.append("  ".join("-" * w for w in widths))
        lines.append(f"params: {millions(self.total_params)}M  MACs: {millions(self.total_macs)}M")
        return "\n".join(lines) + "\n"


def format_shape(shape: Sequence[int]) -> str:
    return "x".join(str(d) for d in shape)


def millions(n: int, digits: int = 3) -> str:
    """``n / 1e6`` rounded to ``digits`` significant digits."""
    return f"{n / 1e6:#.{digits}g}".rstrip(".")


def _layers(model_or_config):
    if isinstance(model_or_config, Model):
        return model_or_config.layers
    return build_layers(model_or_config)


def count_params(model: Model | LCNetConfig) -> int:
    return sum(s.size for layer in _layers(model) for s in layer.param_specs() if s.trainable)


def count_macs(model: Model | LCNetConfig, input_hw: Sequence[int] = (224, 224)) -> int:
    return summarize(model, input_hw).total_macs


def summarize(config: Model | LCNetConfig, input_hw: Sequence[int] = (224, 224)) -> CostReport:
    """One row per layer group (stem, blocks.0-12, gap, last_conv, fc) in forward order."""
    layers = _layers(config)
    rows: dict[str, list] = {}
    shape: tuple[int, ...] = (3, *input_hw)
    for layer in layers:
        out = layer.out_shape(shape)
        entry = rows.setdefault(layer.group, [out, 0, 0])
        entry[0] = out
        entry[1] += sum(s.size for s in layer.param_specs() if s.trainable)
        entry[2] += layer.macs(shape)
        shape = out
    report_rows = [CostRow(name, out, p, m) for name, (out, p, m) in rows.items()]
    return CostReport(
        report_rows,
        sum(r.params for r in report_rows),
        sum(r.macs for r in report_rows),
    )
