"""Binary trace artifacts: a raw float64 payload plus a JSON sidecar.

A trace of B chains, T steps, D coordinates is stored as little-endian f64
in C order (chain-major, then time-major) with a ``<path>.json`` sidecar
describing the shape, the sampler, and the exact run configuration. Binary
beats CSV here because a modest 100K x 2 f64 trace is already 1.6 MB; a CSV
export is still available for small traces.
"""

import csv
import json
import os

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "TraceFormatError",
    "sidecar_path",
    "write_trace",
    "read_trace",
    "export_csv",
]

SCHEMA_VERSION = 1

_LAYOUT = "chain-major then time-major"


class TraceFormatError(ValueError):
    """A trace file or its sidecar is missing, malformed, or inconsistent."""


def sidecar_path(path: str) -> str:
    return str(path) + ".json"


def write_trace(path, trace, sampler: str, seed: int, config=None) -> dict:
    """Write a (B, T, D) or (T, D) trace and its sidecar; returns the header.

    The payload is exactly B*T*D little-endian doubles, so reading it back
    reproduces the array bit for bit.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 2:
        trace = trace[None]
    if trace.ndim != 3:
        raise TraceFormatError(f"expected a (B, T, D) trace, got shape {trace.shape}")
    B, T, D = trace.shape
    header = {
        "schema_version": SCHEMA_VERSION,
        "T": T,
        "B": B,
        "D": D,
        "dtype": "f64",
        "byte_order": "little",
        "layout": _LAYOUT,
        "sampler": str(sampler),
        "seed": int(seed),
        "config": dict(config) if config else {},
    }
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(trace, dtype="<f8").tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return header


def read_trace(path):
    """Read a trace written by write_trace; returns (array, header).

    Validates the sidecar against the payload before reshaping: byte length
    must equal B*T*D*8 and the declared dtype/byte order must be the only
    supported combination.
    """
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise TraceFormatError(f"missing sidecar {side}")
    try:
        with open(side) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"unparseable sidecar {side}: {exc}") from exc
    for key in ("schema_version", "T", "B", "D", "dtype", "byte_order"):
        if key not in header:
            raise TraceFormatError(f"sidecar {side} lacks required field '{key}'")
    if header["schema_version"] != SCHEMA_VERSION:
        raise TraceFormatError(
            f"unsupported schema_version {header['schema_version']}, "
            f"this reader handles {SCHEMA_VERSION}"
        )
    if header["dtype"] != "f64" or header["byte_order"] != "little":
        raise TraceFormatError(
            f"unsupported payload encoding {header['dtype']}/{header['byte_order']}"
        )
    B, T, D = int(header["B"]), int(header["T"]), int(header["D"])
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = B * T * D * 8
    if len(payload) != expected:
        raise TraceFormatError(
            f"payload is {len(payload)} bytes, header implies {expected} "
            f"(B={B}, T={T}, D={D})"
        )
    trace = np.frombuffer(payload, dtype="<f8").reshape(B, T, D).copy()
    return trace, header


def export_csv(path, trace) -> None:
    """Flatten a trace to RFC-4180 CSV: chain, step, then one column per
    coordinate. Meant for small traces; the binary format is authoritative."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 2:
        trace = trace[None]
    B, T, D = trace.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "step"] + [f"s{k}" for k in range(D)])
        for b in range(B):
            for t in range(T):
                writer.writerow([b, t + 1] + [repr(float(v)) for v in trace[b, t]])
