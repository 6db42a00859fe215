"""Entropic optimal transport between low-resolution sample clouds.

Fits Sinkhorn potentials for the quadratic cost between empirical measures
with uniform weights, entirely in the log domain (the regularization used
here, eps = 1e-3 on unnormalized squared costs, underflows any linear-domain
kernel). The debiasing map is the barycentric projection of the fitted plan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .fields import SnapshotDataset

try:
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

DOTM_MAGIC = b"DOTM"


@dataclass
class EntropicTransport:
    """Fitted Sinkhorn potentials plus the sample clouds they couple.

    Plan entries are gamma_ij = exp((f_i + g_j - c_ij)/eps) / (n*m) for the
    half-squared-distance cost c; rows approach 1/n and columns 1/m as the
    marginal error goes to zero.
    """

    epsilon: float
    f: np.ndarray
    g: np.ndarray
    source: np.ndarray
    target: np.ndarray
    iterations_run: int = 0
    marginal_error: float = np.inf
    error_history: tuple = ()

    def log_plan(self) -> np.ndarray:
        c = half_sq_cost(self.source, self.target)
        n, m = c.shape
        return (self.f[:, None] + self.g[None, :] - c) / self.epsilon - np.log(n) - np.log(m)

    def plan(self) -> np.ndarray:
        return np.exp(self.log_plan())


def half_sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c_ij = ||a_i - b_j||^2 / 2, computed via the expanded form."""
    sq_a = 0.5 * np.sum(a * a, axis=1)
    sq_b = 0.5 * np.sum(b * b, axis=1)
    c = sq_a[:, None] + sq_b[None, :] - a @ b.T
    np.maximum(c, 0.0, out=c)
    return c


if _HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _softmin_rows(cost_scaled, pot_scaled, log_w, out):
        # logsumexp over rows of (pot - cost), both prescaled by 1/eps.
        # Terms more than 50 nats below the row max are beneath the f64
        # rounding floor of the sum and are skipped without loss.
        n, m = cost_scaled.shape
        for i in prange(n):
            best = -np.inf
            for j in range(m):
                v = pot_scaled[j] - cost_scaled[i, j]
                if v > best:
                    best = v
            s = 0.0
            for j in range(m):
                d = pot_scaled[j] - cost_scaled[i, j] - best
                if d > -50.0:
                    s += np.exp(d)
            out[i] = -(np.log(s) + best + log_w)


def _softmin(cost_scaled: np.ndarray, pot_scaled: np.ndarray, log_w: float,
             use_numba: bool) -> np.ndarray:
    """logsumexp_j[pot_j - cost_ij + log_w] over rows, negated (1/eps units)."""
    if use_numba and _HAVE_NUMBA:
        out = np.empty(cost_scaled.shape[0])
        _softmin_rows(cost_scaled, pot_scaled, log_w, out)
        return out
    return -(logsumexp(pot_scaled[None, :] - cost_scaled, axis=1) + log_w)


MAX_MATERIALIZED_COST = 25_000_000


def _softmin_blockwise(rows: np.ndarray, cols: np.ndarray, inv_eps: float,
                       pot_scaled: np.ndarray, log_w: float,
                       use_numba: bool, block: int = 1024) -> np.ndarray:
    """Row-block softmin with the cost computed on the fly (large problems)."""
    out = np.empty(rows.shape[0])
    for lo in range(0, rows.shape[0], block):
        cost_block = half_sq_cost(rows[lo:lo + block], cols) * inv_eps
        out[lo:lo + block] = _softmin(cost_block, pot_scaled, log_w, use_numba)
    return out


def sinkhorn_fit(source: np.ndarray, target: np.ndarray, epsilon: float,
                 max_iters: int = 5000, tol: float = 1e-6,
                 use_numba: bool = True) -> EntropicTransport:
    """Alternating log-domain potential updates until the marginals settle.

    Convergence is tracked by the L1 violation of the row marginals (the
    column marginals are exact after every alternating sweep); the violation
    falls out of consecutive row potentials without forming the plan.
    """
    source = np.ascontiguousarray(source, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError(f"sample clouds must share dimension, got {source.shape} and {target.shape}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = source.shape[0], target.shape[0]
    if not (np.all(np.isfinite(source)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite entries in the transport cost")
    log_a, log_b = -np.log(n), -np.log(m)
    inv_eps = 1.0 / epsilon

    if n * m <= MAX_MATERIALIZED_COST:
        # iterate in 1/eps units so the hot loop never divides
        cost_scaled = half_sq_cost(source, target) * inv_eps
        if not np.all(np.isfinite(cost_scaled)):
            raise ValueError("non-finite entries in the transport cost")
        cost_scaled_t = np.ascontiguousarray(cost_scaled.T)

        def update_f(ge):
            return _softmin(cost_scaled, ge, log_b, use_numba)

        def update_g(fe):
            return _softmin(cost_scaled_t, fe, log_a, use_numba)
    else:
        def update_f(ge):
            return _softmin_blockwise(source, target, inv_eps, ge, log_b, use_numba)

        def update_g(fe):
            return _softmin_blockwise(target, source, inv_eps, fe, log_a, use_numba)

    fe = np.zeros(n)
    ge = np.zeros(m)
    err = np.inf
    history: list[float] = []
    iterations = 0
    converged = False
    for it in range(max_iters):
        fe_new = update_f(ge)
        if it > 0:
            # row sums of the current plan are (1/n) exp((f - f_new)/eps),
            # so the violation of (f, g) falls out of the next row update
            err = float(np.sum(np.abs(np.expm1(fe - fe_new))) / n)
            history.append(err)
            if err < tol:
                converged = True
                break
        fe = fe_new
        ge = update_g(fe)
        iterations = it + 1
    if not converged:
        fe_check = update_f(ge)
        err = float(np.sum(np.abs(np.expm1(fe - fe_check))) / n)
        history.append(err)

    return EntropicTransport(
        epsilon=epsilon, f=fe * epsilon, g=ge * epsilon, source=source, target=target,
        iterations_run=iterations, marginal_error=err, error_history=tuple(history),
    )


def barycentric_map(transport: EntropicTransport, y: np.ndarray) -> np.ndarray:
    """Conditional-mean map through the fitted plan, for rows of `y`.

    T(y) = sum_j y'_j softmax_j[(g_j - ||y - y'_j||^2/2) / eps], valid for
    points outside the training source cloud as well.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    ys = y[None] if single else y
    if ys.shape[1] != transport.target.shape[1]:
        raise ValueError(f"expected dimension {transport.target.shape[1]}, got {ys.shape[1]}")
    out = np.empty_like(ys)
    block = max(1, int(2**22 // max(1, transport.target.shape[0])))
    for lo in range(0, ys.shape[0], block):
        chunk = ys[lo:lo + block]
        logits = (transport.g[None, :] - half_sq_cost(chunk, transport.target)) / transport.epsilon
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[lo:lo + block] = w @ transport.target
    return out[0] if single else out


def debias_dataset(transport: EntropicTransport, ds: SnapshotDataset) -> SnapshotDataset:
    if ds.n_grid != transport.target.shape[1]:
        raise ValueError(f"dataset dimension {ds.n_grid} does not match transport "
                         f"dimension {transport.target.shape[1]}")
    mapped = barycentric_map(transport, ds.values)
    meta = dict(ds.meta)
    meta["debiased"] = {
        "epsilon": transport.epsilon,
        "n_source": int(transport.source.shape[0]),
        "n_target": int(transport.target.shape[0]),
        "iterations": int(transport.iterations_run),
        "marginal_error": float(transport.marginal_error),
    }
    return SnapshotDataset(mapped, ds.L, meta)


# ---------------------------------------------------------------------------
# on-disk format: magic, eps f64, n/m/d' u32, then f, g, source, target f64 LE


def save_transport(path: str | Path, t: EntropicTransport) -> None:
    n, d = t.source.shape
    m = t.target.shape[0]
    parts = [
        DOTM_MAGIC,
        struct.pack("<d", t.epsilon),
        struct.pack("<III", n, m, d),
        t.f.astype("<f8").tobytes(),
        t.g.astype("<f8").tobytes(),
        t.source.astype("<f8").tobytes(),
        t.target.astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_transport(path: str | Path) -> EntropicTransport:
    buf = Path(path).read_bytes()
    if buf[:4] != DOTM_MAGIC:
        raise ValueError(f"{path}: not a DOTM file (bad magic {buf[:4]!r})")
    (eps,) = struct.unpack_from("<d", buf, 4)
    n, m, d = struct.unpack_from("<III", buf, 12)
    offset = 24

    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    f = take(n, (n,))
    g = take(m, (m,))
    source = take(n * d, (n, d))
    target = take(m * d, (m, d))
    return EntropicTransport(epsilon=eps, f=f, g=g, source=source, target=target,
                             iterations_run=-1, marginal_error=np.nan)
