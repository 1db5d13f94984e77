"""Artifact writers: path CSV and binary cache, plot data, and the run manifest.

All writers are deterministic: floats are written with ``repr`` (shortest
round-trip form), files are UTF-8 with ``\\n`` line endings, and nothing
depends on the clock or the environment.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .market import EventTable, ObservedPath, TruthPath

CACHE_MAGIC = b"FHPATH1\n"


def _f(x) -> str:
    return repr(float(x))


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# ------------------------------------------------------------ single path


def path_columns(path: ObservedPath) -> list:
    d = path.S.shape[1]
    m = path.Y.shape[1]
    F = path.Q.shape[1]
    cols = ["section", "t"] + [f"S{i}" for i in range(d)] + [f"Y{i}" for i in range(m)]
    cols += [f"Q{i}" for i in range(F)]
    if isinstance(path, TruthPath) and path.z is not None:
        cols += [f"z{i}" for i in range(path.z.shape[1])] + ["x"]
    return cols + ["channel", "mark"]


def write_path_csv(path: ObservedPath, fname) -> None:
    """One ``grid`` row per grid point followed by one ``event`` row per event.

    Event rows leave the grid columns empty and fill ``channel`` and ``mark``
    (empty for unmarked channels).
    """
    cols = path_columns(path)
    truth = "x" in cols
    n_grid = len(cols) - 4
    with open(fname, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(cols)
        for k, t in enumerate(path.times):
            row = ["grid", _f(t)] + [_f(v) for v in path.S[k]] + [_f(v) for v in path.Y[k]]
            row += [str(int(v)) for v in path.Q[k]]
            if truth:
                row += [_f(v) for v in path.z[k]] + [str(int(path.x[k]))]
            w.writerow(row + ["", ""])
        names = path.channel_names
        for t, c, x in zip(path.events.time, path.events.channel, path.events.mark):
            mark = "" if np.isnan(x) else _f(x)
            w.writerow(["event", _f(t)] + [""] * n_grid + [names[int(c)], mark])


def read_path_csv(fname, q0: Sequence[int], channel_names: Optional[Sequence[str]] = None) -> ObservedPath:
    """Inverse of :func:`write_path_csv` for the observable part.

    Without ``channel_names`` the channels are those that fired, in order of
    first appearance; pass the model's names to keep its channel indices.
    """
    with open(fname, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0]
    grid = [r for r in rows[1:] if r[0] == "grid"]
    ev = [r for r in rows[1:] if r[0] == "event"]

    def block(prefix, dtype=float):
        idx = [i for i, c in enumerate(cols) if c.startswith(prefix) and c[len(prefix):].isdigit()]
        return np.array([[dtype(r[i]) for i in idx] for r in grid], dtype).reshape(len(grid), len(idx))

    times = np.array([float(r[1]) for r in grid])
    names = list(channel_names or ())
    for r in ev:
        if r[-2] not in names:
            if channel_names is not None:
                raise ValueError(f"event on unknown channel {r[-2]!r}")
            names.append(r[-2])
    names = tuple(names)
    events = EventTable(
        np.array([float(r[1]) for r in ev]),
        np.array([names.index(r[-2]) for r in ev], int),
        np.array([float(r[-1]) if r[-1] else np.nan for r in ev]),
    )
    return ObservedPath(times, block("S"), block("Y"), events, block("Q", int), tuple(q0), names)


# ----------------------------------------------------------- binary cache


def write_cache(fname, arrays: dict) -> None:
    """Named arrays as consecutive ``.npy`` records behind a small text header.

    ``np.savez`` is avoided because zip members carry timestamps, which would
    break byte-identical reruns.
    """
    keys = sorted(arrays)
    with open(fname, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write((json.dumps(keys) + "\n").encode("utf-8"))
        for k in keys:
            np.lib.format.write_array(fh, np.ascontiguousarray(arrays[k]), allow_pickle=False)


def read_cache(fname) -> dict:
    with open(fname, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{fname} is not a path cache")
        keys = json.loads(fh.readline().decode("utf-8"))
        return {k: np.lib.format.read_array(fh, allow_pickle=False) for k in keys}


def ensemble_arrays(ens) -> dict:
    out = {"times": ens.times, "S": ens.S, "Y": ens.Y, "Q": ens.Q, "counts": ens.counts,
           "event_time": ens.events.time, "event_channel": ens.events.channel,
           "event_mark": ens.events.mark, "event_path": ens.events.path}
    for k in ("z", "x", "zhat", "xhat"):
        v = getattr(ens, k)
        if v is not None:
            out[k] = v
    return out


def write_events_csv(fname, events: EventTable, names: Sequence[str], payout=None) -> None:
    """Event table of an ensemble; with ``payout(t, x)`` a ``payout`` column is added for marked events."""
    with open(fname, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["path", "t", "channel", "mark"] + (["payout"] if payout else []))
        for p, t, c, x in zip(events.path, events.time, events.channel, events.mark):
            row = [int(p), _f(t), names[int(c)], "" if np.isnan(x) else _f(x)]
            if payout:
                row.append("" if np.isnan(x) else _f(np.asarray(payout(t, x), float)))
            w.writerow(row)


# -------------------------------------------------------------- plot data


def write_filter_trajectories(fname, ens) -> None:
    """Columns ``path, t, z<i>, zhat<i>, x, xhat<j>`` (hidden columns only in truth mode)."""
    P, T = ens.S.shape[:2]
    n = ens.zhat.shape[2]
    N = ens.xhat.shape[2]
    truth = ens.z is not None
    cols = ["path", "t"]
    if truth:
        cols += [f"z{i}" for i in range(n)]
    cols += [f"zhat{i}" for i in range(n)]
    if truth:
        cols.append("x")
    cols += [f"xhat{j}" for j in range(N)]
    with open(fname, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(cols)
        for p in range(P):
            for k in range(T):
                row = [p, _f(ens.times[k])]
                if truth:
                    row += [_f(v) for v in ens.z[p, k]]
                row += [_f(v) for v in ens.zhat[p, k]]
                if truth:
                    row.append(int(ens.x[p, k]))
                row += [_f(v) for v in ens.xhat[p, k]]
                w.writerow(row)


def histogram(values: np.ndarray, bins: int):
    """Counts and edges; the outer edges are exactly ``min`` and ``max`` of ``values``."""
    values = np.asarray(values, float)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        edges = np.array([lo, hi])
        return np.array([values.size]), edges
    edges = np.linspace(lo, hi, bins + 1)
    edges[0], edges[-1] = lo, hi
    counts, _ = np.histogram(values, edges)
    return counts, edges


def write_histogram(fname, values: np.ndarray, bins: int) -> None:
    counts, edges = histogram(values, bins)
    with open(fname, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["left", "right", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([_f(a), _f(b), int(c)])


def write_json(fname, obj) -> None:
    with open(fname, "w", encoding="utf-8") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------- manifest


def sha256_file(fname) -> str:
    h = hashlib.sha256()
    with open(fname, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, pipeline: str, seed: int, config_digest: str, files: Sequence[str],
                   notes: Optional[Sequence[str]] = None) -> Path:
    """``manifest.json`` listing every artifact (relative path, size, SHA-256), sorted by name."""
    out_dir = Path(out_dir)
    entries = []
    for name in sorted(set(files)):
        p = out_dir / name
        entries.append({"file": name, "bytes": os.path.getsize(p), "sha256": sha256_file(p)})
    man = {"pipeline": pipeline, "seed": int(seed), "config_sha256": config_digest, "artifacts": entries,
           "notes": sorted(notes or [])}
    target = out_dir / "manifest.json"
    write_json(target, man)
    return target
