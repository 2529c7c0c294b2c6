"""Gaussian random fields with covariance scale * (-Laplacian + shift*I)^(-power).

Fields are synthesized spectrally: independent N(0,1) mode coefficients
are scaled by the per-mode standard deviation and transformed to grid
space through an explicit dense basis matrix (no FFT; grids stay at
desk scale). Basis functions are L2(0,1)-normalized, so the coefficient
recovered by the discrete L2 inner product of a sample with a basis
function has exactly the variance given by the eigenvalue formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import standard_normal
from .tensor import ContractViolation

PERIODIC = "periodic-fourier"
SINE = "dirichlet-sine"


@dataclass(frozen=True)
class GrfSpec:
    scale: float          # covariance prefactor
    shift: float          # +c*I term added to -Laplacian
    power: float          # inverse-operator exponent
    basis: str = PERIODIC
    grid: tuple[int, ...] = (16, 16)

    def mode_variance(self, *mode: int) -> float:
        """Variance of the coefficient of the given wavenumber tuple."""
        if self.basis == PERIODIC:
            lam = sum((2.0 * math.pi * j) ** 2 for j in mode)
        elif self.basis == SINE:
            lam = sum((math.pi * j) ** 2 for j in mode)
        else:
            raise ContractViolation(f"unknown basis {self.basis!r}")
        return self.scale * (lam + self.shift) ** (-self.power)


@lru_cache(maxsize=16)
def _periodic_basis(n: int):
    """Columns: L2-normalized real Fourier modes on x_i = i/n; returns
    (basis matrix (n, n), wavenumber per column)."""
    if n & (n - 1):
        raise ContractViolation(f"periodic basis needs power-of-two extent, got {n}")
    x = np.arange(n) / n
    cols, waves = [np.ones(n)], [0]
    for k in range(1, n // 2):
        cols.append(math.sqrt(2.0) * np.cos(2.0 * math.pi * k * x))
        waves.append(k)
        cols.append(math.sqrt(2.0) * np.sin(2.0 * math.pi * k * x))
        waves.append(k)
    cols.append(np.cos(math.pi * np.arange(n)))  # Nyquist, unit L2 norm
    waves.append(n // 2)
    return np.stack(cols, axis=1), np.array(waves)


@lru_cache(maxsize=16)
def _sine_basis(n: int):
    """Columns: sqrt(2) sin(pi j x) on the inclusive grid x_i = i/(n-1);
    vanishes on both endpoints, orthogonal under the 1/(n-1) grid weight."""
    if n < 3:
        raise ContractViolation(f"sine basis needs extent >= 3, got {n}")
    x = np.arange(n) / (n - 1)
    waves = np.arange(1, n - 1)
    cols = [math.sqrt(2.0) * np.sin(math.pi * j * x) for j in waves]
    return np.stack(cols, axis=1), waves


def _basis(spec: GrfSpec, n: int):
    return _periodic_basis(n) if spec.basis == PERIODIC else _sine_basis(n)


def mode_std_grid(spec: GrfSpec) -> np.ndarray:
    """Per-mode standard deviations arranged to match the basis columns."""
    if len(spec.grid) == 1:
        _, w = _basis(spec, spec.grid[0])
        return np.sqrt(np.array([spec.mode_variance(int(j)) for j in w]))
    _, wh = _basis(spec, spec.grid[0])
    _, ww = _basis(spec, spec.grid[1])
    if spec.basis == PERIODIC:
        lam = (2.0 * math.pi * wh[:, None]) ** 2 + (2.0 * math.pi * ww[None, :]) ** 2
    else:
        lam = (math.pi * wh[:, None]) ** 2 + (math.pi * ww[None, :]) ** 2
    return np.sqrt(spec.scale * (lam + spec.shift) ** (-spec.power))


def grf_sample(spec: GrfSpec, state: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian field on spec.grid with the spec's per-mode variance."""
    if len(spec.grid) == 1:
        n = spec.grid[0]
        phi, _ = _basis(spec, n)
        coeff = mode_std_grid(spec) * standard_normal(state, phi.shape[1])
        return phi @ coeff
    if len(spec.grid) != 2:
        raise ContractViolation(f"grf grid must be 1D or 2D, got {spec.grid}")
    nh, nw = spec.grid
    ph, _ = _basis(spec, nh)
    pw, _ = _basis(spec, nw)
    coeff = mode_std_grid(spec) * standard_normal(state, (ph.shape[1], pw.shape[1]))
    return ph @ coeff @ pw.T


def mode_coefficients(spec: GrfSpec, field: np.ndarray) -> np.ndarray:
    """Project a field back onto the basis (discrete L2 inner products)."""
    if field.ndim == 1:
        phi, _ = _basis(spec, field.shape[0])
        wgt = 1.0 / field.shape[0] if spec.basis == PERIODIC else 1.0 / (field.shape[0] - 1)
        return wgt * (phi.T @ field)
    ph, _ = _basis(spec, field.shape[0])
    pw, _ = _basis(spec, field.shape[1])
    if spec.basis == PERIODIC:
        wgt = 1.0 / (field.shape[0] * field.shape[1])
    else:
        wgt = 1.0 / ((field.shape[0] - 1) * (field.shape[1] - 1))
    return wgt * (ph.T @ field @ pw)
