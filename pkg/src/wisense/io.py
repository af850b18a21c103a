"""Binary array dumps and CSV writers.

Dump layout (all integers little-endian):

    8 bytes   magic b"WSDUMP01"
    uint32    record count
    per record:
      uint32  header length in bytes
      header  UTF-8 JSON object with at least "dtype" and "shape"
      payload raw array bytes, C order, dtype "<c8" (complex64) or "<f8"
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .channel import CsiStream

MAGIC = b"WSDUMP01"
DTYPES = ("<c8", "<f8")


class DumpFormatError(ValueError):
    pass


def write_dump(path, records) -> None:
    """``records`` is a list of (header dict, array) pairs."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for header, arr in records:
            dtype = header.get("dtype", "<c8" if np.iscomplexobj(arr) else "<f8")
            if dtype not in DTYPES:
                raise DumpFormatError(f"unsupported dtype {dtype}")
            data = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
            h = dict(header, dtype=dtype, shape=list(data.shape))
            hb = json.dumps(h, sort_keys=True).encode()
            fh.write(struct.pack("<I", len(hb)))
            fh.write(hb)
            fh.write(data.tobytes())


def read_dump(path) -> list[tuple[dict, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DumpFormatError("bad magic")
    (n,) = struct.unpack_from("<I", raw, 8)
    off = 12
    out = []
    for _ in range(n):
        (hl,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off:off + hl])
        off += hl
        dt = np.dtype(header["dtype"])
        count = int(np.prod(header["shape"]))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(header["shape"])
        off += count * dt.itemsize
        out.append((header, arr.copy()))
    if off != len(raw):
        raise DumpFormatError("trailing bytes after last record")
    return out


def csi_record(stream: CsiStream) -> tuple[dict, np.ndarray]:
    header = {"kind": "csi", "receiver_id": stream.receiver_id,
              "timestamps_s": stream.timestamps.tolist(),
              "phase_error_rad": stream.phase_error.tolist(),
              "noise_var": stream.noise_var, "dtype": "<c8"}
    return header, stream.frames


def stream_from_record(header: dict, arr: np.ndarray) -> CsiStream:
    return CsiStream(arr.astype(complex), np.asarray(header["timestamps_s"]), header["receiver_id"],
                     np.asarray(header["phase_error_rad"]), header["noise_var"])


def _fmt(x) -> str:
    return repr(float(x))


def write_grid_csv(path, spectrum, thetas_rad, taus_s) -> None:
    """MUSIC grid: AoA (deg) down the rows, ToF (ns) across the columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_deg/tau_ns"] + [_fmt(t * 1e9) for t in taus_s])
        for th, row in zip(thetas_rad, spectrum):
            w.writerow([_fmt(np.rad2deg(th))] + [_fmt(v) for v in row])


def write_feature_csv(path, fm) -> None:
    """Phase block then amplitude block; one row per antenna."""
    M, N = fm.h_ph.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "antenna"] + [f"sc{n}" for n in range(N)])
        for name, mat in (("phase_rad", fm.h_ph), ("amplitude", fm.h_am)):
            for m in range(M):
                w.writerow([name, m] + [_fmt(v) for v in mat[m]])


def write_rows_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
