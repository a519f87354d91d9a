"""Checkpoint and training-history files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .flows import FlowModel, FlowSpec

FORMAT_VERSION = 1


def model_to_dict(model: FlowModel, training=None):
    return {
        "format_version": FORMAT_VERSION,
        "dim": model.dim,
        "model": model.spec.to_dict(),
        "params": {
            name: {"shape": list(p.shape), "values": [float(v) for v in p.value.reshape(-1)]}
            for name, p in model.params.items()
        },
        "actnorm_initialized": [
            None if u.actnorm is None else bool(u.actnorm.initialized) for u in model.units
        ],
        "training": training or {},
    }


def model_from_dict(d) -> FlowModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {d.get('format_version')!r}")
    spec = FlowSpec.from_dict(d["model"])
    if spec.dim != d["dim"]:
        raise ValueError("checkpoint dimension does not match its model spec")
    model = FlowModel(spec)
    state = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in d["params"].items()
    }
    model.params.load_state_dict(state)
    for unit, flag in zip(model.units, d["actnorm_initialized"]):
        if unit.actnorm is not None:
            unit.actnorm.initialized = bool(flag)
    return model


def save_checkpoint(model: FlowModel, path, training=None):
    # json writes floats with their shortest round-trip repr
    Path(path).write_text(json.dumps(model_to_dict(model, training), indent=1))


def load_checkpoint(path):
    d = json.loads(Path(path).read_text())
    return model_from_dict(d), d.get("training", {})


def history_columns(n_flows):
    return (
        ["epoch", "J", "lambda", "gamma", "total", "sw_term", "sw"]
        + [f"cost_{m}" for m in range(1, n_flows + 1)]
        + [f"energy_{m}" for m in range(1, n_flows + 1)]
    )


def write_history(history, path, n_flows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(history_columns(n_flows))
        for epoch, r in enumerate(history):
            w.writerow(
                [epoch, r.n_slices, repr(float(r.lam)), repr(float(r.gamma)),
                 repr(r.total_value), repr(float(r.sw_term)), repr(float(r.sw))]
                + [repr(float(c)) for c in r.costs]
                + [repr(float(e)) for e in r.energies]
            )


def read_history(path):
    """Rows of the history CSV as dicts of ints/floats."""
    with Path(path).open(newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                k: int(v) if k in ("epoch", "J") else float(v) for k, v in row.items()
            })
        return rows


def write_timing(times, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_time"])
        for epoch, t in enumerate(times):
            w.writerow([epoch, f"{t:.6f}"])
