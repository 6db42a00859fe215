"""Periodic 1D grid fields, snapshot datasets, and the selection mask.

A snapshot dataset is stored on disk as: magic "DSNP", version u32,
n_snapshots u32, n_grid u32, float64 little-endian payload (snapshot-major),
then a u32 length prefix and a UTF-8 JSON metadata blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DSNP_MAGIC = b"DSNP"
DSNP_VERSION = 1


@dataclass
class GridField:
    """Real values on a uniform periodic grid of domain length L."""

    values: np.ndarray
    L: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"GridField values must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridField values must be finite")

    @property
    def n(self) -> int:
        return self.values.size


@dataclass
class SnapshotDataset:
    """Ordered snapshots [n, d] plus generation metadata."""

    values: np.ndarray
    L: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValueError(f"SnapshotDataset values must be [n, d], got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_grid(self) -> int:
        return self.values.shape[1]

    def field_at(self, i: int) -> GridField:
        return GridField(self.values[i], self.L)


def save_dataset(path: str | Path, ds: SnapshotDataset) -> None:
    meta = dict(ds.meta)
    meta["L"] = ds.L
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    n, d = ds.values.shape
    parts = [
        DSNP_MAGIC,
        struct.pack("<III", DSNP_VERSION, n, d),
        ds.values.astype("<f8").tobytes(),
        struct.pack("<I", len(blob)),
        blob,
    ]
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> SnapshotDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DSNP_MAGIC:
        raise ValueError(f"{path}: not a DSNP dataset (bad magic {buf[:4]!r})")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != DSNP_VERSION:
        raise ValueError(f"{path}: unsupported DSNP version {version}")
    offset = 16
    values = np.frombuffer(buf, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    offset += 8 * n * d
    (blob_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    meta = json.loads(buf[offset:offset + blob_len].decode("utf-8"))
    L = float(meta.pop("L"))
    return SnapshotDataset(values.astype(np.float64), L, meta)


@dataclass(frozen=True)
class SelectionMask:
    """Row-selection downsampling: keeps every stride-th point of a fine grid.

    Each row of the implied matrix is a standard basis vector, so the
    operator needs no numerical SVD anywhere (see `conditioning`).
    """

    d: int
    d_prime: int
    offset: int = 0

    def __post_init__(self):
        if self.d_prime <= 0 or self.d % self.d_prime != 0:
            raise ValueError(f"selection mask requires d_prime dividing d, got {self.d}/{self.d_prime}")
        if not 0 <= self.offset < self.stride:
            raise ValueError(f"selection offset {self.offset} outside stride {self.stride}")

    @property
    def stride(self) -> int:
        return self.d // self.d_prime

    @property
    def indices(self) -> np.ndarray:
        return self.offset + self.stride * np.arange(self.d_prime)


def apply_selection(x: GridField, mask: SelectionMask) -> GridField:
    if x.n != mask.d:
        raise ValueError(f"selection mask expects length {mask.d}, field has {x.n}")
    return GridField(x.values[mask.indices], x.L)


def select_rows(values: np.ndarray, mask: SelectionMask) -> np.ndarray:
    """Vectorized `apply_selection` over [n, d] snapshot arrays."""
    if values.shape[-1] != mask.d:
        raise ValueError(f"selection mask expects length {mask.d}, array has {values.shape[-1]}")
    return values[..., mask.indices]


def lf_to_Y(u_lf: GridField, target_d_prime: int) -> GridField:
    """Stride-subsample a low-fidelity field so its length matches d'.

    Reconciles the coarse solver grid with the dimension of the selected
    high-fidelity space; a no-op when the lengths already agree.
    """
    if u_lf.n == target_d_prime:
        return GridField(u_lf.values.copy(), u_lf.L)
    if u_lf.n % target_d_prime != 0:
        raise ValueError(f"cannot subsample length {u_lf.n} to {target_d_prime}")
    step = u_lf.n // target_d_prime
    return GridField(u_lf.values[::step], u_lf.L)


def dataset_to_Y(ds: SnapshotDataset, target_d_prime: int) -> SnapshotDataset:
    if ds.n_grid == target_d_prime:
        return SnapshotDataset(ds.values.copy(), ds.L, dict(ds.meta))
    if ds.n_grid % target_d_prime != 0:
        raise ValueError(f"cannot subsample length {ds.n_grid} to {target_d_prime}")
    step = ds.n_grid // target_d_prime
    meta = dict(ds.meta)
    meta["subsampled_from"] = ds.n_grid
    return SnapshotDataset(ds.values[:, ::step].copy(), ds.L, meta)
