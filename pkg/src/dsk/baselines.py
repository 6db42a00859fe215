"""Classical upsampling baselines: cubic interpolation and quantile-matched
bias correction (upsample, then per-pixel quantile mapping to the reference
distribution).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import GridField

DQTB_MAGIC = b"DQTB"
KEYS_A = -0.5


def _keys_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic-convolution kernel with a = -0.5 (exact at nodes,
    reproduces linear functions)."""
    at = np.abs(t)
    a = KEYS_A
    near = ((a + 2.0) * at - (a + 3.0)) * at * at + 1.0
    far = (((at - 5.0) * at + 8.0) * at - 4.0) * a
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def cubic_upsample(y: np.ndarray | GridField, factor: int):
    """Periodic cubic-convolution upsampling by an integer factor.

    Fine sample j sits at coarse coordinate j/factor; the four surrounding
    coarse nodes are weighted by the Keys kernel with indices wrapped across
    the periodic boundary. Accepts [d'] fields or [n, d'] batches.
    """
    if factor < 2:
        raise ValueError(f"upsampling factor must be >= 2, got {factor}")
    wrap_field = isinstance(y, GridField)
    values = y.values if wrap_field else np.asarray(y, dtype=np.float64)
    single = values.ndim == 1
    batch = values[None] if single else values
    d = batch.shape[1]

    frac = np.arange(factor) / factor
    offsets = np.arange(-1, 3)
    weights = _keys_kernel(frac[:, None] - offsets[None, :])  # [factor, 4]
    base = np.arange(d)[:, None, None]
    idx = (base + offsets[None, None, :]) % d                 # [d, 1, 4]
    gathered = batch[:, idx]                                  # [n, d, 1, 4]
    fine = np.einsum("ndfk,fk->ndf", np.broadcast_to(gathered, (batch.shape[0], d, factor, 4)),
                     weights)
    out = fine.reshape(batch.shape[0], d * factor)
    if single:
        out = out[0]
    return GridField(out, y.L) if wrap_field else out


@dataclass
class QuantileTable:
    """Per-pixel quantile boundaries of the source and reference marginals.

    `source_q` and `ref_q` are [d, Q+1] monotone boundary arrays delimiting
    Q quantile segments each.
    """

    source_q: np.ndarray
    ref_q: np.ndarray

    def __post_init__(self):
        self.source_q = np.asarray(self.source_q, dtype=np.float64)
        self.ref_q = np.asarray(self.ref_q, dtype=np.float64)
        if self.source_q.shape != self.ref_q.shape or self.source_q.ndim != 2:
            raise ValueError("quantile tables must share a [d, Q+1] shape")
        if np.any(np.diff(self.source_q, axis=1) < 0) or np.any(np.diff(self.ref_q, axis=1) < 0):
            raise ValueError("quantile boundaries must be non-decreasing per pixel")

    @property
    def n_quantiles(self) -> int:
        return self.source_q.shape[1] - 1

    @property
    def d(self) -> int:
        return self.source_q.shape[0]


def fit_quantile_table(source: np.ndarray, reference: np.ndarray,
                       n_quantiles: int = 1000) -> QuantileTable:
    """Empirical per-pixel quantile boundaries of both training marginals."""
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if source.shape[1] != reference.shape[1]:
        raise ValueError(f"pixel counts differ: {source.shape[1]} vs {reference.shape[1]}")
    levels = np.linspace(0.0, 1.0, n_quantiles + 1)
    src_q = np.quantile(source, levels, axis=0).T
    ref_q = np.quantile(reference, levels, axis=0).T
    return QuantileTable(source_q=src_q, ref_q=ref_q)


def quantile_match(values: np.ndarray, table: QuantileTable) -> np.ndarray:
    """Per-pixel quantile mapping: locate each value's source segment and
    emit the midpoint of the corresponding reference segment. Out-of-range
    values clamp to the end segments."""
    x = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if x.shape[1] != table.d:
        raise ValueError(f"expected {table.d} pixels, got {x.shape[1]}")
    q = table.n_quantiles
    out = np.empty_like(x)
    for m in range(table.d):
        seg = np.searchsorted(table.source_q[m], x[:, m], side="right") - 1
        np.clip(seg, 0, q - 1, out=seg)
        out[:, m] = 0.5 * (table.ref_q[m, seg] + table.ref_q[m, seg + 1])
    return out if values.ndim == 2 else out[0]


def bcsd(y: np.ndarray | GridField, table: QuantileTable, factor: int):
    """Cubic upsampling followed by per-pixel quantile matching."""
    wrap_field = isinstance(y, GridField)
    upsampled = cubic_upsample(y.values if wrap_field else y, factor)
    matched = quantile_match(upsampled, table)
    return GridField(matched, y.L) if wrap_field else matched


def save_quantile_table(path: str | Path, table: QuantileTable) -> None:
    d, qp1 = table.source_q.shape
    parts = [
        DQTB_MAGIC,
        struct.pack("<II", qp1 - 1, d),
        table.source_q.astype("<f8").tobytes(),
        table.ref_q.astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_quantile_table(path: str | Path) -> QuantileTable:
    buf = Path(path).read_bytes()
    if buf[:4] != DQTB_MAGIC:
        raise ValueError(f"{path}: not a DQTB file (bad magic {buf[:4]!r})")
    q, d = struct.unpack_from("<II", buf, 4)
    count = d * (q + 1)
    src = np.frombuffer(buf, dtype="<f8", count=count, offset=12).reshape(d, q + 1)
    ref = np.frombuffer(buf, dtype="<f8", count=count, offset=12 + 8 * count).reshape(d, q + 1)
    return QuantileTable(source_q=src.astype(np.float64), ref_q=ref.astype(np.float64))
