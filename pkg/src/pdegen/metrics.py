"""Distributional discrepancy between generated and held-out real fields.

Fields are standardized channel-wise with statistics from the real set,
flattened to vectors, and compared with the sliced Wasserstein distance
(average 1D Wasserstein over random unit projections, sorted pairing)
and a multi-scale RBF maximum mean discrepancy (biased V-statistic,
bandwidths from the median pairwise-distance heuristic, reported as
sqrt(MMD^2)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SeedKey, derive_seed, standard_normal
from .tensor import ContractViolation


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray   # (C,)
    std: np.ndarray    # (C,)
    eps: float = 1e-8

    @classmethod
    def from_real(cls, real: np.ndarray, eps: float = 1e-8) -> "ChannelStats":
        if real.ndim != 4:
            raise ContractViolation(f"ChannelStats needs (N, C, H, W), got {real.shape}")
        return cls(real.mean(axis=(0, 2, 3)), real.std(axis=(0, 2, 3)), eps)


def standardize(batch: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """(x - mu) / (std + eps) per channel, flattened to (N, d) vectors."""
    if batch.ndim != 4 or batch.shape[1] != stats.mean.shape[0]:
        raise ContractViolation(f"standardize: channel mismatch {batch.shape} "
                                f"vs {stats.mean.shape[0]} channels")
    z = (batch - stats.mean[None, :, None, None]) \
        / (stats.std[None, :, None, None] + stats.eps)
    return z.reshape(batch.shape[0], -1)


def _wasserstein_1d(p: np.ndarray, q: np.ndarray) -> float:
    """1D W1 via sorting; unequal sizes use piecewise-linear quantile
    coupling evaluated on a common midpoint grid."""
    p = np.sort(p)
    q = np.sort(q)
    if p.size == q.size:
        return float(np.abs(p - q).mean())
    m = 4 * max(p.size, q.size)
    t = (np.arange(m) + 0.5) / m
    qp = np.interp(t, (np.arange(p.size) + 0.5) / p.size, p)
    qq = np.interp(t, (np.arange(q.size) + 0.5) / q.size, q)
    return float(np.abs(qp - qq).mean())


def swd(P: np.ndarray, Q: np.ndarray, K: int = 512,
        key: SeedKey = SeedKey(0, "swd")) -> float:
    """Sliced Wasserstein distance over K random unit directions."""
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ContractViolation(f"swd: clouds {P.shape} vs {Q.shape}")
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ContractViolation("swd: empty cloud")
    if K < 1:
        raise ContractViolation(f"swd: K must be >= 1, got {K}")
    state = derive_seed(key)
    total = 0.0
    for _ in range(K):
        v = standard_normal(state, P.shape[1])
        v /= np.sqrt((v * v).sum()) + 1e-300
        total += _wasserstein_1d(P @ v, Q @ v)
    return total / K


def median_heuristic(real: np.ndarray, subset: int = 500) -> float:
    """Median pairwise Euclidean distance over an evenly strided subset."""
    n = real.shape[0]
    if n < 2:
        raise ContractViolation("median heuristic needs >= 2 vectors")
    if n > subset:
        idx = np.linspace(0, n - 1, subset).astype(int)
        real = real[idx]
    sq = (real * real).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * real @ real.T, 0.0)
    iu = np.triu_indices(real.shape[0], k=1)
    return float(np.median(np.sqrt(d2[iu])))


def _kernel_sum(X: np.ndarray, Y: np.ndarray, bandwidths) -> np.ndarray:
    sx = (X * X).sum(axis=1)
    sy = (Y * Y).sum(axis=1)
    d2 = np.maximum(sx[:, None] + sy[None, :] - 2.0 * X @ Y.T, 0.0)
    out = np.zeros_like(d2)
    for s in bandwidths:
        out += np.exp(-d2 / (2.0 * s * s))
    return out


def mmd(P: np.ndarray, Q: np.ndarray, bandwidths="auto", real=None,
        subset: int = 500) -> float:
    """sqrt of the biased multi-scale-RBF MMD^2 (clamped at 0).

    bandwidths="auto" uses {m/4, m/2, m, 2m, 4m} around the median
    heuristic m computed on `real` (defaults to Q).
    """
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ContractViolation(f"mmd: clouds {P.shape} vs {Q.shape}")
    if P.shape[0] == 0 or Q.shape[0] == 0:
        raise ContractViolation("mmd: empty cloud")
    if isinstance(bandwidths, str) and bandwidths == "auto":
        m = median_heuristic(Q if real is None else real, subset)
        if m <= 0:
            m = 1.0
        bandwidths = [m / 4, m / 2, m, 2 * m, 4 * m]
    mmd2 = (_kernel_sum(P, P, bandwidths).mean()
            + _kernel_sum(Q, Q, bandwidths).mean()
            - 2.0 * _kernel_sum(P, Q, bandwidths).mean())
    return float(np.sqrt(max(mmd2, 0.0)))
