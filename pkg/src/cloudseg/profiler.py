"""Parameter and MAC accounting for a model at a stated input shape.

Counting rules: parameters are trainable weights only (batchnorm affine
included, running statistics excluded); MACs come from convolution, linear
and attention matmuls; elementwise math, activations, normalisation and
pooling are free. Reported FLOPs are 2x MACs (one multiply + one add).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

COUNTING_NOTE = ("flops = 2 * macs; conv/linear/attention matmuls counted, "
                 "normalisation, activations and pooling excluded; "
                 "batchnorm running statistics excluded from params")

_trackers: list[dict[int, int]] = []


def record_macs(module, count: int) -> None:
    """Called by compute layers during forward when a tracker is active."""
    if _trackers:
        table = _trackers[-1]
        key = id(module)
        table[key] = table.get(key, 0) + int(count)


@dataclass
class CostReport:
    """Per-layer and total parameter/MAC counts for one input shape."""

    input_shape: tuple[int, ...]
    rows: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def gflops(self) -> float:
        return 2.0 * self.total_macs / 1e9

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "params", "macs"])
        for name, params, macs in self.rows:
            writer.writerow([name, params, macs])
        writer.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "input_shape": list(self.input_shape),
            "counting": COUNTING_NOTE,
            "rows": [{"layer": n, "params": p, "macs": m} for n, p, m in self.rows],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "gflops": self.gflops,
        }, indent=2)


def cost(model, input_shape, forward=None) -> CostReport:
    """Profile ``model`` on a zero input of ``input_shape`` (no weight change).

    ``forward`` overrides the default single-input call for modules whose
    forward takes extra arguments.
    """
    from .tensor import Tensor, no_grad

    was_training = getattr(model, "training", False)
    model.train(False)
    table: dict[int, int] = {}
    _trackers.append(table)
    try:
        with no_grad():
            x = Tensor(np.zeros(input_shape, dtype=np.float32))
            if forward is None:
                model(x)
            else:
                forward(model, x)
    finally:
        _trackers.pop()
        model.train(was_training)

    report = CostReport(input_shape=tuple(input_shape))
    for path, module in model.named_modules():
        own = sum(p.size for _, p in module.own_parameters())
        macs = table.get(id(module), 0)
        if own or macs:
            report.rows.append((path or "(root)", int(own), int(macs)))
    return report
