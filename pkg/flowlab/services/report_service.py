"""
Report Service Component
Writes run reports as JSON and CSV, and trajectory or grid snapshots as binary files.
"""

import csv
import dataclasses
import io
import json
import math
import os
import struct
import tempfile
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from flowlab.engine.errors import FlowLabError

SNAPSHOT_MAGIC = b"FLWS"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sHIIII")


def to_jsonable(obj: Any) -> Any:
    """Plain JSON data from reports; non-finite floats become strings"""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if not callable(getattr(obj, f.name))}
    if isinstance(obj, torch.Tensor):
        return to_jsonable(obj.detach().cpu().tolist())
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return to_jsonable(obj.item())
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return str(obj)


def format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def atomic_write(path: str, data: bytes):
    """Write to a temp file in the target directory, then rename over path"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def encode_json(payload: Any) -> bytes:
    text = json.dumps(to_jsonable(payload), sort_keys=True, indent=2, allow_nan=False)
    return (text + "\n").encode("utf-8")


def encode_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buffer.getvalue().encode("utf-8")


def encode_snapshot(snapshots: np.ndarray, stride: int) -> bytes:
    """Header then float64 data in (snapshot, member, coordinate) order"""
    data = np.ascontiguousarray(snapshots, dtype="<f8")
    if data.ndim != 3:
        raise FlowLabError(f"snapshot data must be 3-D (snapshot, member, coordinate), got {data.shape}")
    n_snap, n_members, d = data.shape
    header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, d, n_members, n_snap, stride)
    return header + data.tobytes()


def decode_snapshot(blob: bytes) -> Tuple[np.ndarray, int]:
    if len(blob) < SNAPSHOT_HEADER.size:
        raise FlowLabError("snapshot file is truncated")
    magic, version, d, n_members, n_snap, stride = SNAPSHOT_HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise FlowLabError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FlowLabError(f"unsupported snapshot version {version}")
    expected = n_snap * n_members * d
    data = np.frombuffer(blob, dtype="<f8", offset=SNAPSHOT_HEADER.size)
    if data.size != expected:
        raise FlowLabError(f"snapshot holds {data.size} values, header says {expected}")
    return data.reshape(n_snap, n_members, d).astype(np.float64), stride


class ReportService:
    """Service for persisting run reports under an output directory"""

    def __init__(self, output_dir: str = "results", fmt: str = "json"):
        self.output_dir = output_dir
        self.fmt = fmt
        self.written: List[str] = []

    def path_for(self, name: str, suffix: str) -> str:
        return os.path.join(self.output_dir, f"{name}.{suffix}")

    def write_json(self, name: str, payload: Any):
        path = self.path_for(name, "json")
        try:
            atomic_write(path, encode_json(payload))
            self.written.append(path)
            return True, path
        except (OSError, ValueError) as e:
            return False, f"Error writing {path}: {e}"

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]):
        path = self.path_for(name, "csv")
        try:
            atomic_write(path, encode_csv(header, rows))
            self.written.append(path)
            return True, path
        except OSError as e:
            return False, f"Error writing {path}: {e}"

    def write_report(self, name: str, payload: Any, table: Optional[Tuple[Sequence[str], Sequence]] = None):
        """Report in the configured format; CSV needs a (header, rows) table"""
        if self.fmt == "csv" and table is not None:
            return self.write_csv(name, *table)
        return self.write_json(name, payload)

    def write_snapshot(self, name: str, snapshots, stride: int):
        if isinstance(snapshots, torch.Tensor):
            snapshots = snapshots.detach().cpu().numpy()
        path = self.path_for(name, "flws")
        try:
            atomic_write(path, encode_snapshot(np.asarray(snapshots), stride))
            self.written.append(path)
            return True, path
        except (OSError, FlowLabError) as e:
            return False, f"Error writing {path}: {e}"

    def write_grid_function(self, name: str, values: np.ndarray, dims: int):
        """Grid values as a one-snapshot file: members are nodes in C order"""
        nodes = int(np.prod(values.shape[:dims]))
        flat = np.asarray(values, dtype=float).reshape(nodes, -1)
        return self.write_snapshot(name, flat[None, :, :], 0)

    @staticmethod
    def read_snapshot(path: str) -> Tuple[np.ndarray, int]:
        with open(path, "rb") as f:
            return decode_snapshot(f.read())

    def summary(self) -> Dict[str, Any]:
        return {"output_dir": self.output_dir, "files": list(self.written)}
