"""Distributional evaluation statistics for snapshot ensembles.

All functions take plain [n_samples, d] arrays. Distances are between a
"pred" ensemble and a "ref" ensemble; spectral quantities use the plain
(unnormalized) forward DFT, so Parseval reads sum_k E(k) = n * sum_i u_i^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MELR_FLOOR_RATIO = 1e-12


def energy_spectrum(u: np.ndarray) -> np.ndarray:
    """Per-wavenumber energy E(k) = sum_{|k'| = k} |u_hat(k')|^2.

    Accepts a single field [d] or a batch [n, d]; batches are averaged so the
    result is always the length d//2 + 1 mean spectrum. Positive and
    negative wavenumbers are aggregated into the same magnitude bin.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    batch = u[None] if single else u
    d = batch.shape[1]
    coeff = np.fft.rfft(batch, axis=1)
    power = np.abs(coeff) ** 2
    # rfft holds k = 0..d//2; interior bins represent +-k pairs
    power[:, 1:] *= 2.0
    if d % 2 == 0:
        power[:, -1] /= 2.0  # the Nyquist mode has no negative twin
    return power.mean(axis=0)


def melr(e_pred: np.ndarray, e_ref: np.ndarray, weighted: bool) -> tuple[float, int]:
    """Mean |log(E_pred / E_ref)| over wavenumber bins.

    Unweighted uses 1/card(k); weighted uses E_ref(k)/sum E_ref. Bins whose
    energy on either side sits at the numerical noise floor (below
    MELR_FLOOR_RATIO of the reference peak, e.g. the conserved-at-zero mean
    mode) carry no spectral information and are excluded; the exclusion
    count is returned alongside the value.
    """
    e_pred = np.asarray(e_pred, dtype=np.float64)
    e_ref = np.asarray(e_ref, dtype=np.float64)
    if e_pred.shape != e_ref.shape:
        raise ValueError(f"spectra have different supports: {e_pred.shape} vs {e_ref.shape}")
    floor = MELR_FLOOR_RATIO * float(e_ref.max())
    keep = (e_ref > floor) & (e_pred > floor)
    excluded = int(np.size(e_ref) - np.count_nonzero(keep))
    ep, er = e_pred[keep], e_ref[keep]
    log_ratio = np.abs(np.log(ep / er))
    if weighted:
        w = er / er.sum()
    else:
        w = np.full(ep.size, 1.0 / ep.size)
    return float(np.sum(w * log_ratio)), excluded


def log_energy_ratio_curve(samples_pred: np.ndarray, samples_ref: np.ndarray) -> np.ndarray:
    """Per-mode log(E_pred/E_ref) as [k, 2] rows for CSV emission."""
    ep = energy_spectrum(samples_pred)
    er = energy_spectrum(samples_ref)
    floor = MELR_FLOOR_RATIO * float(er.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where((er > floor) & (ep > floor), np.log(ep / er), np.nan)
    return np.column_stack([np.arange(er.size, dtype=np.float64), ratio])


def cov_rmse(samples_pred: np.ndarray, samples_ref: np.ndarray) -> float:
    """Relative Frobenius distance between empirical covariance matrices.

    The denominator is the prediction covariance norm.
    """
    pred = np.asarray(samples_pred, dtype=np.float64)
    ref = np.asarray(samples_ref, dtype=np.float64)
    if pred.shape[0] < 2 or ref.shape[0] < 2:
        raise ValueError("covariance needs at least two samples per ensemble")
    cp = np.cov(pred.T)
    cr = np.cov(ref.T)
    return float(np.linalg.norm(cp - cr) / np.linalg.norm(cp))


def _scott_bandwidth(x: np.ndarray) -> float:
    return float(len(x) ** (-0.2) * x.std())


def kde_kld(samples_pred: np.ndarray, samples_ref: np.ndarray,
            grid_points: int = 512) -> float:
    """KL(ref || pred) summed over per-dimension Gaussian KDE marginals.

    Scott-rule bandwidths, trapezoid integration on a grid spanning the
    pooled range padded by three bandwidths.
    """
    pred = np.atleast_2d(np.asarray(samples_pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(samples_ref, dtype=np.float64))
    if pred.shape[0] < 30 or ref.shape[0] < 30:
        raise ValueError("KDE divergence needs at least 30 samples per ensemble")
    if pred.shape[1] != ref.shape[1]:
        raise ValueError(f"dimension mismatch: {pred.shape[1]} vs {ref.shape[1]}")
    total = 0.0
    for m in range(pred.shape[1]):
        p, r = pred[:, m], ref[:, m]
        hp = max(_scott_bandwidth(p), 1e-12)
        hr = max(_scott_bandwidth(r), 1e-12)
        pad = 3.0 * max(hp, hr)
        lo = min(p.min(), r.min()) - pad
        hi = max(p.max(), r.max()) + pad
        grid = np.linspace(lo, hi, grid_points)
        dens_p = _kde_density(p, grid, hp)
        dens_r = _kde_density(r, grid, hr)
        mask = dens_r > 0.0
        integrand = np.zeros(grid_points)
        integrand[mask] = dens_r[mask] * (
            np.log(dens_r[mask]) - np.log(np.maximum(dens_p[mask], 1e-300)))
        total += float(np.trapezoid(integrand, grid))
    return total


def _kde_density(x: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    z = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2.0 * np.pi))


def median_pairwise_distance(a: np.ndarray, b: np.ndarray, cap: int = 2048) -> float:
    """Median pooled pairwise distance, on a deterministic subsample."""
    pool = np.concatenate([a[:cap], b[:cap]], axis=0)
    sq = np.sum(pool * pool, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pool @ pool.T
    np.maximum(d2, 0.0, out=d2)
    upper = d2[np.triu_indices(len(pool), 1)]
    return float(np.sqrt(np.median(upper)))


def mmd(samples_pred: np.ndarray, samples_ref: np.ndarray,
        bandwidths: np.ndarray | None = None) -> float:
    """Unbiased squared maximum mean discrepancy with a multi-scale kernel.

    The kernel is the mean of Gaussians exp(-||x-y||^2 / (2 b^2)) over the
    bandwidth set; when none is given, the set is the median pairwise
    distance scaled by {0.5, 1, 2, 4}. The unbiased estimator can dip
    slightly below zero when the ensembles nearly coincide.
    """
    x = np.atleast_2d(np.asarray(samples_pred, dtype=np.float64))
    y = np.atleast_2d(np.asarray(samples_ref, dtype=np.float64))
    nx, ny = len(x), len(y)
    if nx < 2 or ny < 2:
        raise ValueError("MMD needs at least two samples per ensemble")
    if bandwidths is None:
        med = median_pairwise_distance(x, y)
        bandwidths = med * np.array([0.5, 1.0, 2.0, 4.0])
    bandwidths = np.asarray(bandwidths, dtype=np.float64)

    def kernel_sums(a, b):
        sa = np.sum(a * a, axis=1)
        sb = np.sum(b * b, axis=1)
        d2 = sa[:, None] + sb[None, :] - 2.0 * a @ b.T
        np.maximum(d2, 0.0, out=d2)
        k = np.zeros_like(d2)
        for bw in bandwidths:
            k += np.exp(-0.5 * d2 / (bw * bw))
        return k / len(bandwidths)

    kxx = kernel_sums(x, x)
    kyy = kernel_sums(y, y)
    kxy = kernel_sums(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (nx * (nx - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (ny * (ny - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def wass1(samples_pred: np.ndarray, samples_ref: np.ndarray,
          support: tuple[float, float] = (-20.0, 20.0), bins: int = 400) -> float:
    """Mean per-dimension L1 distance between histogram CDFs."""
    pred = np.atleast_2d(np.asarray(samples_pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(samples_ref, dtype=np.float64))
    if pred.shape[0] < 30 or ref.shape[0] < 30:
        raise ValueError("the CDF distance needs at least 30 samples per ensemble")
    if pred.shape[1] != ref.shape[1]:
        raise ValueError(f"dimension mismatch: {pred.shape[1]} vs {ref.shape[1]}")
    width = (support[1] - support[0]) / bins
    total = 0.0
    for m in range(pred.shape[1]):
        hp, _ = np.histogram(pred[:, m], bins=bins, range=support)
        hr, _ = np.histogram(ref[:, m], bins=bins, range=support)
        cdf_p = np.cumsum(hp) / pred.shape[0]
        cdf_r = np.cumsum(hr) / ref.shape[0]
        total += float(np.abs(cdf_p - cdf_r).sum() * width)
    return total / pred.shape[1]


def variability(conditional_samples: np.ndarray, samples_per_condition: int) -> float:
    """Mean pixel-wise standard deviation within condition groups.

    `conditional_samples` is [n_conditions * spc, d] grouped by condition;
    each group contributes sqrt(mean (u - group_mean)^2) and groups are
    averaged.
    """
    x = np.asarray(conditional_samples, dtype=np.float64)
    spc = samples_per_condition
    if spc < 1 or len(x) % spc != 0:
        raise ValueError(f"sample count {len(x)} not divisible by group size {spc}")
    groups = x.reshape(len(x) // spc, spc, -1)
    centered = groups - groups.mean(axis=1, keepdims=True)
    per_group = np.sqrt(np.mean(centered**2, axis=(1, 2)))
    return float(per_group.mean())


def smape(y: np.ndarray, y_prime: np.ndarray) -> float:
    """Symmetric mean absolute percentage error between paired snapshots."""
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(y_prime, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired comparison requires equal shapes, got {a.shape} vs {b.shape}")
    denom = 0.5 * (np.abs(a) + np.abs(b))
    ratio = np.where(denom > 0.0, np.abs(a - b) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return float(ratio.mean())


def constraint_rmse(samples: np.ndarray, conditions: np.ndarray,
                    indices: np.ndarray) -> float:
    """Relative RMSE on the conditioned pixels against the condition values."""
    x = np.asarray(samples, dtype=np.float64)[:, indices]
    c = np.asarray(conditions, dtype=np.float64)
    if c.shape != x.shape:
        raise ValueError(f"conditions {c.shape} do not align with selected pixels {x.shape}")
    num = np.linalg.norm(x - c, axis=1)
    den = np.linalg.norm(x, axis=1)
    den = np.where(den > 0.0, den, 1.0)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class MetricsReport:
    covRMSE: float
    MELRu: float
    MELRw: float
    KLD: float
    Wass1: float
    MMD: float
    Var: float | None = None
    sMAPE: float | None = None
    constraintRMSE: float | None = None
    melr_excluded_modes: int = 0
    mmd_bandwidths: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def evaluate_ensembles(samples_pred: np.ndarray, samples_ref: np.ndarray,
                       mmd_bandwidths: np.ndarray | None = None,
                       samples_per_condition: int | None = None,
                       paired_source: np.ndarray | None = None,
                       constraint: tuple[np.ndarray, np.ndarray] | None = None,
                       wass1_support: tuple[float, float] = (-20.0, 20.0),
                       wass1_bins: int = 400,
                       kde_grid: int = 512) -> MetricsReport:
    """All scalar metrics of one prediction ensemble against a reference."""
    e_pred = energy_spectrum(samples_pred)
    e_ref = energy_spectrum(samples_ref)
    melru, excluded = melr(e_pred, e_ref, weighted=False)
    melrw, _ = melr(e_pred, e_ref, weighted=True)
    if mmd_bandwidths is None:
        med = median_pairwise_distance(samples_pred, samples_ref)
        mmd_bandwidths = med * np.array([0.5, 1.0, 2.0, 4.0])
    report = MetricsReport(
        covRMSE=cov_rmse(samples_pred, samples_ref),
        MELRu=melru,
        MELRw=melrw,
        KLD=kde_kld(samples_pred, samples_ref, grid_points=kde_grid),
        Wass1=wass1(samples_pred, samples_ref, support=wass1_support, bins=wass1_bins),
        MMD=mmd(samples_pred, samples_ref, bandwidths=mmd_bandwidths),
        melr_excluded_modes=excluded,
        mmd_bandwidths=[float(b) for b in np.asarray(mmd_bandwidths)],
    )
    if samples_per_condition is not None and samples_per_condition > 1:
        report.Var = variability(samples_pred, samples_per_condition)
    if paired_source is not None:
        report.sMAPE = smape(samples_pred, paired_source)
    if constraint is not None:
        conditions, indices = constraint
        report.constraintRMSE = constraint_rmse(samples_pred, conditions, indices)
    return report


def save_report(path: str | Path, report: MetricsReport, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def save_energy_ratio_csv(path: str | Path, curve: np.ndarray) -> None:
    lines = ["k,log_energy_ratio"]
    for k, v in curve:
        lines.append(f"{int(k)},{'' if np.isnan(v) else repr(float(v))}")
    Path(path).write_text("\n".join(lines) + "\n")
