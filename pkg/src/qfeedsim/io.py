"""Snapshot, summary and trajectory files.

Every float is written with 17 significant digits so files round-trip
exactly and two identical runs produce identical bytes.

Snapshot CSV layout (version 1), after a ``#`` comment line naming the
version, one header row and one row per stored lattice point::

    n, idx_0..idx_{D-1}, y_0..y_{D-1}, trace[, std_err][, bloch_x, bloch_y, bloch_z]

The Bloch columns appear only for qubits and hold the Bloch vector of the
normalized conditional state. ``std_err`` appears only for ensemble output.
"""
import csv
import json
import math

import numpy as np

from .resolved import ResolvedState
from .signals import SignalLattice

__all__ = [
    "CSV_VERSION",
    "fmt",
    "dumps_json",
    "write_json",
    "snapshot_record",
    "write_snapshots_csv",
    "write_snapshots_json",
    "read_snapshots_json",
    "write_trajectories_csv",
]

CSV_VERSION = 1
FORMAT_NAME = "qfeedsim-snapshots"


def fmt(v):
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"refusing to write non-finite value {v}")
    # adding 0.0 maps -0.0 to 0.0
    return "%.17g" % (v + 0.0)


def _encode(obj, indent, level):
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + _encode(v, indent, level + 1) for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in seq) + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps_json(obj, indent=2):
    """``json.dumps`` look-alike that prints floats with 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def _bloch(m):
    t = m.trace().real
    if t <= 0:
        return [0.0, 0.0, 0.0]
    r = m / t
    return [2 * r[0, 1].real, -2 * r[0, 1].imag, (r[0, 0] - r[1, 1]).real]


def snapshot_record(state, std_err=None, include_states=True):
    """JSON-ready dictionary for one resolved state."""
    entries = []
    tr = state.traces
    for i, (idx, y, m) in enumerate(zip(state.indices, state.points, state.states)):
        e = {"index": [int(v) for v in idx], "y": [float(v) for v in y], "trace": float(tr[i])}
        if std_err is not None:
            e["std_err"] = float(std_err[i])
        if state.dim == 2:
            e["bloch"] = _bloch(m)
        if include_states:
            e["re"] = m.real.tolist()
            e["im"] = m.imag.tolist()
        entries.append(e)
    return {
        "n": int(state.step),
        "leaked_mass": float(state.leaked_mass),
        "clip_count": int(state.clip_count),
        "entries": entries,
    }


def write_snapshots_json(path, states, std_err=None):
    states = list(states)
    if not states:
        raise ValueError("no snapshots to write")
    doc = {
        "format": FORMAT_NAME,
        "version": CSV_VERSION,
        "hilbert_dim": states[0].dim,
        "lattice": states[0].lattice.to_dict(),
        "steps": [snapshot_record(s, std_err if k == len(states) - 1 else None) for k, s in enumerate(states)],
    }
    write_json(path, doc)


def read_snapshots_json(path):
    """Load every snapshot of a JSON file back into :class:`ResolvedState` objects."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a snapshot file")
    lat = SignalLattice(**doc["lattice"])
    d = int(doc["hilbert_dim"])
    out = []
    for rec in doc["steps"]:
        entries = {}
        for e in rec["entries"]:
            if "re" not in e:
                raise ValueError("snapshot was written without state matrices")
            entries[tuple(e["index"])] = np.array(e["re"]) + 1j * np.array(e["im"])
        out.append(ResolvedState.from_entries(lat, entries, dim=d, step=rec["n"], leaked_mass=rec["leaked_mass"],
                                              clip_count=rec["clip_count"]))
    return out


def write_snapshots_csv(path, states, std_err=None):
    states = list(states)
    if not states:
        raise ValueError("no snapshots to write")
    dim_y = states[0].lattice.dim
    qubit = states[0].dim == 2
    header = ["n"] + [f"idx_{k}" for k in range(dim_y)] + [f"y_{k}" for k in range(dim_y)] + ["trace"]
    if std_err is not None:
        header.append("std_err")
    if qubit:
        header += ["bloch_x", "bloch_y", "bloch_z"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# qfeedsim snapshots csv v{CSV_VERSION}: " + ",".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, s in enumerate(states):
            last = k == len(states) - 1
            for i, (idx, y, t, m) in enumerate(zip(s.indices, s.points, s.traces, s.states)):
                row = [str(s.step)] + [str(int(v)) for v in idx] + [fmt(v) for v in y] + [fmt(t)]
                if std_err is not None:
                    row.append(fmt(std_err[i]) if last else "")
                if qubit:
                    row += [fmt(v) for v in _bloch(m)]
                w.writerow(row)


def write_trajectories_csv(path, trajectories):
    """Dump trajectories; qubit layout is ``rho_00, rho_11, re_rho_01, im_rho_01``."""
    trajectories = list(trajectories)
    dim_y = trajectories[0].signals.shape[1]
    d = trajectories[0].states.shape[1]
    diag = [f"rho_{i}{i}" for i in range(d)]
    off = []
    for i in range(d):
        for j in range(i + 1, d):
            off += [f"re_rho_{i}{j}", f"im_rho_{i}{j}"]
    header = ["traj", "step", "outcome"] + [f"y_{k}" for k in range(dim_y)] + diag + off
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# qfeedsim trajectories csv v{CSV_VERSION}: " + ",".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for tr in trajectories:
            for n, x, y, rho in tr.records:
                row = [str(tr.traj_index), str(n), "" if x is None else str(x)]
                row += [fmt(v) for v in y] + [fmt(rho[i, i].real) for i in range(d)]
                for i in range(d):
                    for j in range(i + 1, d):
                        row += [fmt(rho[i, j].real), fmt(rho[i, j].imag)]
                w.writerow(row)
