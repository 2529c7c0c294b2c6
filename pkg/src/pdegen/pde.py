"""Reference PDE solvers that turn sampled coefficients/initial conditions
into ground-truth solution fields.

Five benchmark recipes on desk-scale grids:

  darcy          -div(a grad u) = 1, zero Dirichlet; a is a thresholded GRF.
  poisson        lap(u) = a, zero Dirichlet; a is a mollified GRF forcing.
  helmholtz      lap(u) + k^2 u = a, zero Dirichlet, k = 1.
  navier_stokes  periodic vorticity equation, pseudo-spectral stream-function
                 form, 10 semi-implicit steps over one second; stores
                 (omega_0, omega_T).
  burgers        periodic 1D viscous Burgers, integrating-factor spectral
                 stepping; stores the full space-time field (time rows).

Dirichlet grids are inclusive n x n over [0,1]^2 with spacing 1/(n-1);
the elliptic solves use exactly the 5-point / flux-form stencils that the
residual module evaluates, so generated samples have (solver-tolerance)
residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import grf
from .rng import SeedKey, derive_seed, standard_normal
from .tensor import ContractViolation

KINDS = ("darcy", "poisson", "helmholtz", "navier_stokes", "burgers")

DESK_GRID = {"darcy": 16, "poisson": 16, "helmholtz": 32, "navier_stokes": 32, "burgers": 64}
PAPER_GRID = {"darcy": 32, "poisson": 32, "helmholtz": 128, "navier_stokes": 64, "burgers": 128}


class SolverFailure(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PdeConfig:
    kind: str
    grid: tuple[int, int]            # stored field extents (H, W)
    viscosity: float = 0.0           # navier_stokes / burgers only
    helmholtz_k: float = 1.0
    darcy_forcing: float = 1.0
    ns_steps: int = 10               # snapshot count over one second
    final_time: float = 1.0
    tol: float = 1e-10
    max_iter: int = 50_000
    grf_spec: grf.GrfSpec = field(default=None)  # coefficient / IC sampler

    @property
    def channels(self) -> int:
        return 1 if self.kind == "burgers" else 2


def default_config(kind: str, size: int | None = None, **overrides) -> PdeConfig:
    """Desk-scale configuration for a benchmark kind."""
    if kind not in KINDS:
        raise ContractViolation(f"unknown pde kind {kind!r}")
    n = size or DESK_GRID[kind]
    if kind == "navier_stokes":
        spec = grf.GrfSpec(7.0 ** 1.5, 49.0, 2.5, grf.PERIODIC, (n, n))
        cfg = PdeConfig(kind, (n, n), viscosity=1e-3, grf_spec=spec)
    elif kind == "burgers":
        spec = grf.GrfSpec(625.0, 25.0, 2.0, grf.PERIODIC, (n,))
        cfg = PdeConfig(kind, (n, n), viscosity=0.01, grf_spec=spec)
    else:
        spec = grf.GrfSpec(1.0, 9.0, 2.0, grf.PERIODIC, (n, n))
        cfg = PdeConfig(kind, (n, n), grf_spec=spec)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class FieldSample:
    pde_kind: str
    channels: np.ndarray  # (C, H, W)


# ---------------------------------------------------------------------------
# conjugate gradient on interior nodes


def cg_solve(apply_A, b: np.ndarray, tol: float, max_iter: int, diag=None) -> np.ndarray:
    """Preconditioned CG with zero initial guess.

    Vectors are full-grid arrays supported on the interior (apply_A must
    return interior-supported output). Stops at |A u - b| <= tol * |b|.
    """
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = math.sqrt(float((b * b).sum()))
    if bnorm == 0.0:
        return x
    z = r / diag if diag is not None else r
    p = z.copy()
    rz = float((r * z).sum())
    for _ in range(max_iter):
        ap = apply_A(p)
        alpha = rz / float((p * ap).sum())
        x += alpha * p
        r -= alpha * ap
        rnorm = math.sqrt(float((r * r).sum()))
        if rnorm <= tol * bnorm:
            return x
        z = r / diag if diag is not None else r
        rz_new = float((r * z).sum())
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverFailure(f"cg did not converge in {max_iter} iterations", rnorm / bnorm)


def _interior(shape) -> np.ndarray:
    m = np.zeros(shape)
    m[1:-1, 1:-1] = 1.0
    return m


def neg_laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """-lap_h(u) evaluated on interior nodes, zero elsewhere."""
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = (4.0 * u[1:-1, 1:-1] - u[2:, 1:-1] - u[:-2, 1:-1]
                       - u[1:-1, 2:] - u[1:-1, :-2]) / h ** 2
    return out


def darcy_apply(a: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """-div(a grad u) with arithmetic face averages, interior nodes."""
    an = 0.5 * (a[1:-1, 1:-1] + a[2:, 1:-1])
    as_ = 0.5 * (a[1:-1, 1:-1] + a[:-2, 1:-1])
    ae = 0.5 * (a[1:-1, 1:-1] + a[1:-1, 2:])
    aw = 0.5 * (a[1:-1, 1:-1] + a[1:-1, :-2])
    ui = u[1:-1, 1:-1]
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = (an * (ui - u[2:, 1:-1]) + as_ * (ui - u[:-2, 1:-1])
                       + ae * (ui - u[1:-1, 2:]) + aw * (ui - u[1:-1, :-2])) / h ** 2
    return out


def mollifier(n: int) -> np.ndarray:
    c = np.arange(n) / (n - 1)
    return np.sin(math.pi * c)[:, None] * np.sin(math.pi * c)[None, :]


def threshold_darcy(m: np.ndarray) -> np.ndarray:
    """Binary permeability: 12 where the latent field is >= 0, else 3."""
    return np.where(m >= 0.0, 12.0, 3.0)


def solve_poisson(a: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """u with lap_h(u) = a on interior, u = 0 on the boundary ring."""
    n = a.shape[0]
    h = 1.0 / (n - 1)
    mask = _interior(a.shape)
    b = -a * mask
    diag = np.where(mask > 0, 4.0 / h ** 2, 1.0)
    return cg_solve(lambda u: neg_laplacian(u, h), b, tol, max_iter, diag=diag)


def solve_helmholtz(a: np.ndarray, k: float, tol: float, max_iter: int) -> np.ndarray:
    """u with lap_h(u) + k^2 u = a; the CG system is the negated SPD form."""
    n = a.shape[0]
    h = 1.0 / (n - 1)
    mask = _interior(a.shape)
    b = -a * mask

    def apply_A(u):
        return neg_laplacian(u, h) - (k ** 2) * u * mask

    diag = np.where(mask > 0, 4.0 / h ** 2 - k ** 2, 1.0)
    return cg_solve(apply_A, b, tol, max_iter, diag=diag)


def solve_darcy(a: np.ndarray, q: float, tol: float, max_iter: int) -> np.ndarray:
    n = a.shape[0]
    h = 1.0 / (n - 1)
    mask = _interior(a.shape)
    b = q * mask
    # Jacobi diagonal of the flux-form operator
    diag = np.ones_like(a)
    an = 0.5 * (a[1:-1, 1:-1] + a[2:, 1:-1])
    as_ = 0.5 * (a[1:-1, 1:-1] + a[:-2, 1:-1])
    ae = 0.5 * (a[1:-1, 1:-1] + a[1:-1, 2:])
    aw = 0.5 * (a[1:-1, 1:-1] + a[1:-1, :-2])
    diag[1:-1, 1:-1] = (an + as_ + ae + aw) / h ** 2
    return cg_solve(lambda u: darcy_apply(a, u, h), b, tol, max_iter, diag=diag)


# ---------------------------------------------------------------------------
# pseudo-spectral steppers


def _wavenumbers(n: int):
    k = 2.0 * math.pi * np.fft.fftfreq(n, d=1.0 / n)
    return k


def ns_forcing(n: int) -> np.ndarray:
    c = np.arange(n) / n
    s = c[:, None] + c[None, :]
    return 0.1 * (np.sin(2.0 * math.pi * s) + np.cos(2.0 * math.pi * s))


def spectral_step_ns(omega: np.ndarray, cfg: PdeConfig, forcing=None,
                     advect: bool = True) -> np.ndarray:
    """One semi-implicit step of the vorticity equation, dt = 1/ns_steps.

    Stream function solve and derivatives are spectral; the advection
    product is formed in physical space and 2/3-dealiased; diffusion is
    treated implicitly. The zero mode of psi is pinned to 0.
    """
    n = omega.shape[0]
    if omega.shape != (n, n) or n & (n - 1):
        raise ContractViolation(f"ns step needs a square power-of-two grid, got {omega.shape}")
    dt = cfg.final_time / cfg.ns_steps
    k = _wavenumbers(n)
    ky, kx = k[:, None], k[None, :]
    ksq = kx ** 2 + ky ** 2
    inv_ksq = np.zeros_like(ksq)
    nonzero = ksq > 0
    inv_ksq[nonzero] = 1.0 / ksq[nonzero]

    w_hat = np.fft.fft2(omega)
    rhs = np.zeros_like(w_hat)
    if advect:
        psi_hat = w_hat * inv_ksq          # lap(psi) = -omega, zero mode pinned
        vx = np.real(np.fft.ifft2(1j * ky * psi_hat))
        vy = np.real(np.fft.ifft2(-1j * kx * psi_hat))
        wx = np.real(np.fft.ifft2(1j * kx * w_hat))
        wy = np.real(np.fft.ifft2(1j * ky * w_hat))
        adv_hat = np.fft.fft2(vx * wx + vy * wy)
        cut = n // 3
        dealias = (np.abs(np.fft.fftfreq(n) * n)[:, None] <= cut) \
            & (np.abs(np.fft.fftfreq(n) * n)[None, :] <= cut)
        rhs -= adv_hat * dealias
    if forcing is not None:
        rhs += np.fft.fft2(forcing)
    w_hat = (w_hat + dt * rhs) / (1.0 + dt * cfg.viscosity * ksq)
    return np.real(np.fft.ifft2(w_hat))


def spectral_step_burgers(u: np.ndarray, dt: float, cfg: PdeConfig,
                          flux: bool = True) -> np.ndarray:
    """One integrating-factor RK4 step of u_t + d_x(u^2/2) = nu u_xx.

    Diffusion is integrated exactly per mode; the flux derivative is
    evaluated pseudo-spectrally with 2/3 dealiasing.
    """
    n = u.shape[0]
    if n & (n - 1):
        raise ContractViolation(f"burgers step needs a power-of-two extent, got {n}")
    k = _wavenumbers(n)
    cut = n // 3
    dealias = np.abs(np.fft.fftfreq(n) * n) <= cut
    e_half = np.exp(-cfg.viscosity * k ** 2 * dt / 2.0)
    e_full = e_half ** 2

    def nhat(v):
        if not flux:
            return np.zeros(n, dtype=complex)
        w_hat = np.fft.fft(0.5 * v * v) * dealias
        return -1j * k * w_hat

    u_hat = np.fft.fft(u)
    a = nhat(u)
    ua = np.real(np.fft.ifft(e_half * (u_hat + 0.5 * dt * a)))
    b = nhat(ua)
    ub = np.real(np.fft.ifft(e_half * u_hat + 0.5 * dt * b))
    c = nhat(ub)
    uc = np.real(np.fft.ifft(e_full * u_hat + dt * e_half * c))
    d = nhat(uc)
    out_hat = e_full * u_hat + dt / 6.0 * (e_full * a + 2.0 * e_half * (b + c) + d)
    return np.real(np.fft.ifft(out_hat))


def _burgers_substeps(u0: np.ndarray, dt_snap: float) -> int:
    # RK4 stability on the dealiased advection spectrum: |u| k_max dt < 2
    n = u0.shape[0]
    kmax = 2.0 * math.pi * (n // 3)
    umax = float(np.abs(u0).max()) + 1e-12
    return max(2, int(math.ceil(dt_snap * umax * kmax / 2.0)))


# ---------------------------------------------------------------------------
# sample generation


def generate(kind: str, cfg: PdeConfig, key: SeedKey) -> FieldSample:
    """Draw coefficients/IC from the GRF and solve the benchmark PDE."""
    if kind != cfg.kind:
        raise ContractViolation(f"config kind {cfg.kind!r} does not match {kind!r}")
    state = derive_seed(key)
    n = cfg.grid[0]

    if kind == "darcy":
        a = threshold_darcy(grf.grf_sample(cfg.grf_spec, state))
        u = solve_darcy(a, cfg.darcy_forcing, cfg.tol, cfg.max_iter)
        return FieldSample(kind, np.stack([a, u]))

    if kind in ("poisson", "helmholtz"):
        a = grf.grf_sample(cfg.grf_spec, state) * mollifier(n)
        if kind == "poisson":
            u = solve_poisson(a, cfg.tol, cfg.max_iter)
        else:
            u = solve_helmholtz(a, cfg.helmholtz_k, cfg.tol, cfg.max_iter)
        return FieldSample(kind, np.stack([a, u]))

    if kind == "navier_stokes":
        w0 = grf.grf_sample(cfg.grf_spec, state)
        q = ns_forcing(n)
        w = w0
        for _ in range(cfg.ns_steps):
            w = spectral_step_ns(w, cfg, forcing=q)
        return FieldSample(kind, np.stack([w0, w]))

    if kind == "burgers":
        n_t, n_x = cfg.grid
        u = grf.grf_sample(cfg.grf_spec, state)
        dt_snap = cfg.final_time / (n_t - 1)
        sub = _burgers_substeps(u, dt_snap)
        rows = [u]
        for _ in range(n_t - 1):
            for _ in range(sub):
                u = spectral_step_burgers(u, dt_snap / sub, cfg)
            rows.append(u)
        return FieldSample(kind, np.stack(rows)[None, :, :])

    raise ContractViolation(f"unknown pde kind {kind!r}")


def generate_dataset(cfg: PdeConfig, key: SeedKey, count: int) -> np.ndarray:
    """(count, C, H, W) array; sample i uses key.at(i), so generation is
    order-independent and reproducible."""
    out = np.empty((count, cfg.channels) + cfg.grid)
    for i in range(count):
        out[i] = generate(cfg.kind, cfg, key.at(i)).channels
    return out


__all__ = ["KINDS", "DESK_GRID", "PAPER_GRID", "PdeConfig", "FieldSample",
           "SolverFailure", "default_config", "cg_solve", "generate",
           "generate_dataset", "spectral_step_ns", "spectral_step_burgers",
           "solve_poisson", "solve_helmholtz", "solve_darcy", "threshold_darcy",
           "mollifier", "neg_laplacian", "darcy_apply", "ns_forcing"]
