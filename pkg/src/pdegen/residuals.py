"""Differentiable discrete PDE-error maps, the scalar physics loss, its
gradient, and the RMS PDE-error metric.

Stencils are built from tape ops (rolls, products, masks) so the error
field of a generated sample stays differentiable end to end. Central
second-order differences throughout; Dirichlet kinds evaluate only on
interior nodes, periodic kinds wrap. The Dirichlet stencils match the
data-generation discretization exactly, so solver output has residuals
at the CG tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pde import PdeConfig
from .tensor import ContractViolation, Tape, Tensor


@dataclass(frozen=True)
class ResidualOperator:
    pde_kind: str
    grid: tuple[int, int]
    h: float                      # spatial spacing
    dt: float = 0.0               # burgers time spacing
    viscosity: float = 0.0
    helmholtz_k: float = 0.0
    forcing: float = 0.0          # darcy right-hand side q
    channels: int = 2

    @property
    def interior_mask(self) -> np.ndarray:
        """(1, 1, H, W) selector of nodes where the residual is defined."""
        m = np.zeros((1, 1) + self.grid)
        if self.pde_kind in ("darcy", "poisson", "helmholtz"):
            m[:, :, 1:-1, 1:-1] = 1.0
        elif self.pde_kind == "burgers":
            m[:, :, 1:-1, :] = 1.0  # interior time rows, all spatial columns
        else:
            m[:] = 1.0
        return m

    @property
    def interior_count(self) -> int:
        return int(self.interior_mask.sum())


def for_config(cfg: PdeConfig) -> ResidualOperator:
    n_h, n_w = cfg.grid
    if cfg.kind in ("darcy", "poisson", "helmholtz"):
        return ResidualOperator(cfg.kind, cfg.grid, h=1.0 / (n_w - 1),
                                helmholtz_k=cfg.helmholtz_k,
                                forcing=cfg.darcy_forcing, channels=2)
    if cfg.kind == "navier_stokes":
        return ResidualOperator(cfg.kind, cfg.grid, h=1.0 / n_w, channels=2)
    if cfg.kind == "burgers":
        return ResidualOperator(cfg.kind, cfg.grid, h=1.0 / n_w,
                                dt=cfg.final_time / (n_h - 1),
                                viscosity=cfg.viscosity, channels=1)
    raise ContractViolation(f"unknown pde kind {cfg.kind!r}")


# ---------------------------------------------------------------------------
# stencils (tape ops; wrapped values only reach masked-off nodes)


def _lap(u: Tensor, h: float) -> Tensor:
    s = T.add(T.add(T.roll(u, -1, 2), T.roll(u, 1, 2)),
              T.add(T.roll(u, -1, 3), T.roll(u, 1, 3)))
    return T.scale(T.add(s, T.scale(u, -4.0)), 1.0 / h ** 2)


def _central(u: Tensor, h: float, axis: int) -> Tensor:
    return T.scale(T.sub(T.roll(u, -1, axis), T.roll(u, 1, axis)), 0.5 / h)


def _second(u: Tensor, h: float, axis: int) -> Tensor:
    s = T.add(T.roll(u, -1, axis), T.roll(u, 1, axis))
    return T.scale(T.add(s, T.scale(u, -2.0)), 1.0 / h ** 2)


def _darcy_flux_div(a: Tensor, u: Tensor, h: float) -> Tensor:
    """div(a grad u) with arithmetic face averages, one axis at a time:
    F_{i+1/2} = (a_i + a_{i+1})/2 * (u_{i+1} - u_i)/h, div = (F_+ - F_-)/h."""
    div = None
    for axis in (2, 3):
        a_face = T.scale(T.add(a, T.roll(a, -1, axis)), 0.5)
        f_plus = T.mul(a_face, T.scale(T.sub(T.roll(u, -1, axis), u), 1.0 / h))
        f_minus = T.roll(f_plus, 1, axis)
        d = T.scale(T.sub(f_plus, f_minus), 1.0 / h)
        div = d if div is None else T.add(div, d)
    return div


def residual_field(tape: Tape, op: ResidualOperator, x: Tensor) -> Tensor:
    """Masked residual field r(x) as (B, 1, H, W) on the tape.

    x is the channel-stacked batch (B, C, H, W): coefficient/forcing/IC
    channels first, then the solution channel (burgers stores the bare
    space-time field with time rows).
    """
    if x.value.ndim != 4 or x.value.shape[1] != op.channels or x.value.shape[2:] != op.grid:
        raise ContractViolation(
            f"residual_field: {op.pde_kind} expects (B, {op.channels}, {op.grid[0]}, "
            f"{op.grid[1]}), got {x.value.shape}")
    kind = op.pde_kind

    if kind in ("poisson", "helmholtz"):
        a = T.chan_slice(x, 0, 1)
        u = T.chan_slice(x, 1, 2)
        r = T.sub(_lap(u, op.h), a)
        if kind == "helmholtz":
            r = T.add(r, T.scale(u, op.helmholtz_k ** 2))
    elif kind == "darcy":
        a = T.chan_slice(x, 0, 1)
        u = T.chan_slice(x, 1, 2)
        div = _darcy_flux_div(a, u, op.h)
        q = tape.const(np.full(div.value.shape, float(op.forcing)))
        r = T.sub(T.scale(div, -1.0), q)
    elif kind == "navier_stokes":
        w = T.chan_slice(x, 1, 2)
        r = T.add(_central(w, op.h, 3), _central(w, op.h, 2))
    elif kind == "burgers":
        u = x
        flux = _central(T.scale(T.mul(u, u), 0.5), op.h, 3)
        diff = T.scale(_second(u, op.h, 3), op.viscosity)
        r = T.sub(T.add(_central(u, op.dt, 2), flux), diff)
    else:
        raise ContractViolation(f"unknown pde kind {kind!r}")
    return T.mul(r, tape.const(np.broadcast_to(op.interior_mask, r.value.shape).copy()))


def physics_error_t(tape: Tape, op: ResidualOperator, x: Tensor) -> Tensor:
    """Batch-mean of R(x) = (1/N) sum_i |r(x)_i|^2 as a scalar tensor."""
    r = residual_field(tape, op, x)
    batch = x.value.shape[0]
    return T.scale(T.tsum(T.mul(r, r)), 1.0 / (op.interior_count * batch))


# ---------------------------------------------------------------------------
# numpy conveniences (same stencils, tape discarded)


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def residual_values(op: ResidualOperator, x: np.ndarray) -> np.ndarray:
    """Residual field values (B, 1, H, W) for a numpy batch."""
    tape = Tape(grad=False)
    return residual_field(tape, op, tape.const(_as_batch(x))).value


def physics_error(op: ResidualOperator, x: np.ndarray) -> float:
    """Mean squared residual R(x) of one sample (or batch mean)."""
    r = residual_values(op, x)
    return float((r * r).sum() / (op.interior_count * r.shape[0]))


def physics_error_per_sample(op: ResidualOperator, batch: np.ndarray) -> np.ndarray:
    r = residual_values(op, batch)
    return (r * r).sum(axis=(1, 2, 3)) / op.interior_count


def residual_gradient(op: ResidualOperator, x: np.ndarray) -> np.ndarray:
    """Exact gradient of physics_error with respect to every channel of x."""
    squeeze = x.ndim == 3
    tape = Tape()
    xt = tape.leaf(_as_batch(x))
    (g,) = T.backward(physics_error_t(tape, op, xt), wrt=[xt])
    return g[0] if squeeze else g


def rms_pde_error(op: ResidualOperator, batch: np.ndarray) -> float:
    """Mean over samples of sqrt(R(x))."""
    batch = _as_batch(batch)
    if batch.shape[0] == 0:
        raise ContractViolation("rms_pde_error: empty batch")
    return float(np.sqrt(physics_error_per_sample(op, batch)).mean())
