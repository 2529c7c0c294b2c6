"""Conditional generation over a frozen one-step backbone.

A control branch encodes the conditioning fields y, adds them to the
backbone's preconditioned input through a zero-initialized 1x1
projection, runs a trainable copy of the backbone encoder, and injects
per-level hints into the backbone decoder through zero-initialized 1x1
projections. At initialization every injected residual is exactly zero,
so conditional output equals the unconditional backbone output.

Training minimizes masked data fidelity plus the physics penalty on the
full prediction; only branch parameters move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffusion as df
from . import residuals
from . import tensor as T
from .diffusion import DenoiserNet, TrainConfig
from .distill import StudentGenerator
from .rng import SeedKey, derive_seed, standard_normal
from .tensor import ContractViolation, Parameters, Tape, Tensor

TASKS = ("forward", "inverse", "reconstruct")


@dataclass
class Condition:
    task: str
    y: np.ndarray      # (N, C_y, H, W) conditioning channels
    mask: np.ndarray   # (N, C, H, W) boolean selector of supervised components


def cond_channels(task: str, field_channels: int) -> int:
    if task in ("forward", "inverse"):
        if field_channels < 2:
            raise ContractViolation(f"{task} task needs separate coefficient and "
                                    "solution channels")
        return field_channels - 1 if task == "forward" else 1
    if task == "reconstruct":
        return field_channels + 1  # observed values plus the mask channel
    raise ContractViolation(f"unknown task {task!r}")


def build_condition(task: str, sample: np.ndarray, obs_key: SeedKey,
                    obs_fraction: float = 1.0, burgers: bool = False):
    """(Condition, target) for one sample (C, H, W).

    forward: y = coefficient channels, supervise the solution channel;
    inverse: the reverse; reconstruct: y = masked field plus a mask
    channel, supervise observed nodes only (burgers sensors observe the
    full time history at selected spatial columns).
    """
    c, h, w = sample.shape
    if task in ("forward", "inverse"):
        if burgers or c < 2:
            raise ContractViolation(f"{task} task undefined for a single-channel field")
        mask = np.zeros((1, c, h, w))
        if task == "forward":
            y = sample[:-1][None]
            mask[0, -1] = 1.0
        else:
            y = sample[-1:][None]
            mask[0, :-1] = 1.0
        return Condition(task, y, mask), sample[None]
    if task != "reconstruct":
        raise ContractViolation(f"unknown task {task!r}")
    if not 0.0 < obs_fraction <= 1.0:
        raise ContractViolation(f"obs_fraction {obs_fraction} outside (0, 1]")
    state = derive_seed(obs_key)
    obs = np.zeros((h, w))
    if burgers:
        n_sensors = max(1, round(obs_fraction * w))
        cols = state.choice(w, size=n_sensors, replace=False)
        obs[:, cols] = 1.0  # full time history at the sensor columns
    else:
        n_obs = max(1, round(obs_fraction * h * w))
        flat = state.choice(h * w, size=n_obs, replace=False)
        obs.reshape(-1)[flat] = 1.0
    y = np.concatenate([sample * obs[None], obs[None]], axis=0)[None]
    mask = np.broadcast_to(obs[None, None], (1, c, h, w)).copy()
    return Condition(task, y, mask), sample[None]


def build_conditions(task: str, batch: np.ndarray, obs_key: SeedKey,
                     obs_fraction: float = 1.0, burgers: bool = False) -> tuple:
    """Batched build_condition with per-sample observation keys."""
    conds, targets = [], []
    for i in range(batch.shape[0]):
        cond, tgt = build_condition(task, batch[i], obs_key.at(i), obs_fraction, burgers)
        conds.append(cond)
        targets.append(tgt)
    y = np.concatenate([c.y for c in conds])
    mask = np.concatenate([c.mask for c in conds])
    return Condition(task, y, mask), np.concatenate(targets)


# ---------------------------------------------------------------------------
# control branch


class ControlBranch:
    """Condition encoder + trainable encoder copy + zero projections."""

    def __init__(self, params: Parameters, cond_ch: int, task: str):
        self.params = params
        self.cond_ch = cond_ch
        self.task = task

    @classmethod
    def create(cls, backbone: DenoiserNet, cond_ch: int, task: str,
               key: SeedKey) -> "ControlBranch":
        state = derive_seed(key)
        w0, w1, w2 = backbone.cfg.widths
        c = backbone.cfg.channels
        p = Parameters(trainable=True)
        p.add("psi.conv1.w", df._conv_init(state, 16, cond_ch, 3))
        p.add("psi.conv1.b", np.zeros(16))
        p.add("psi.conv2.w", df._conv_init(state, c, 16, 3))
        p.add("psi.conv2.b", np.zeros(c))
        p.add("zero_in.w", np.zeros((c, c, 1, 1)))
        p.add("zero_in.b", np.zeros(c))
        for name, block in backbone.params.blocks.items():
            if name.startswith(("enc0.", "enc1.", "mid.")):
                p.add(f"hint.{name}", block.copy())  # trainable encoder copy
        p.add("proj_mid.w", np.zeros((w2, w2, 1, 1)))
        p.add("proj_mid.b", np.zeros(w2))
        p.add("proj_dec1.w", np.zeros((w1, w1, 1, 1)))
        p.add("proj_dec1.b", np.zeros(w1))
        p.add("proj_dec0.w", np.zeros((w1, w0, 1, 1)))
        p.add("proj_dec0.b", np.zeros(w1))
        return cls(p, cond_ch, task)

    def hints(self, tape: Tape, backbone: DenoiserNet, xin: Tensor,
              c_noise: np.ndarray, y: np.ndarray) -> dict:
        if y.shape[1] != self.cond_ch or y.shape[2:] != xin.value.shape[2:]:
            raise ContractViolation(f"condition shape {y.shape} incompatible with "
                                    f"branch ({self.cond_ch} channels, "
                                    f"grid {xin.value.shape[2:]})")
        p = self.params
        yt = tape.const(y)
        hy = T.silu(T.conv2d(yt, tape.param(p, "psi.conv1.w"), tape.param(p, "psi.conv1.b")))
        hy = T.conv2d(hy, tape.param(p, "psi.conv2.w"), tape.param(p, "psi.conv2.b"))
        zc = T.add(xin, T.conv2d(hy, tape.param(p, "zero_in.w"), tape.param(p, "zero_in.b")))
        emb = tape.const(np.stack([np.sin(c_noise), np.cos(c_noise)], axis=1))
        f0c, f1c, mc = df.encoder_features(tape, p, "hint.", zc, emb)
        return {
            "mid": T.conv2d(mc, tape.param(p, "proj_mid.w"), tape.param(p, "proj_mid.b")),
            "dec1": T.conv2d(f1c, tape.param(p, "proj_dec1.w"), tape.param(p, "proj_dec1.b")),
            "dec0": T.conv2d(f0c, tape.param(p, "proj_dec0.w"), tape.param(p, "proj_dec0.b")),
        }


def conditional_denoise_t(tape: Tape, backbone: DenoiserNet, branch: ControlBranch,
                          x: Tensor, sigma: np.ndarray, y: np.ndarray) -> Tensor:
    c_skip, c_out, c_in, c_noise = backbone.precond(sigma)
    xin = T.row_scale(x, c_in)
    hints = branch.hints(tape, backbone, xin, c_noise, y)
    f = backbone.forward_t(tape, xin, c_noise, injections=hints)
    return T.add(T.row_scale(x, c_skip), T.row_scale(f, c_out))


def conditional_generate_t(tape: Tape, backbone: StudentGenerator,
                           branch: ControlBranch, y: np.ndarray,
                           z: np.ndarray) -> Tensor:
    """One-step conditional sample on the tape: the single sampler step from
    sigma_init to 0, with hint injection, mirroring the unconditional step
    arithmetic operation for operation."""
    s = backbone.sigma_init
    sig = np.full(z.shape[0], s)
    x = tape.const(z)
    den = conditional_denoise_t(tape, backbone.net, branch, x, sig, y)
    d = T.scale(T.sub(x, den), 1.0 / s)
    return T.add(x, T.scale(d, 0.0 - s))


def conditional_generate(backbone: StudentGenerator, branch: ControlBranch,
                         y: np.ndarray, z: np.ndarray) -> np.ndarray:
    tape = Tape(grad=False)
    return conditional_generate_t(tape, backbone, branch, y, z).value


# ---------------------------------------------------------------------------
# objective


def masked_data_loss_t(tape: Tape, x_hat: Tensor, x_star: np.ndarray,
                       mask: np.ndarray) -> Tensor:
    if x_hat.value.shape != x_star.shape or mask.shape != x_star.shape:
        raise ContractViolation(f"masked loss shapes: {x_hat.value.shape} vs "
                                f"{x_star.shape} vs {mask.shape}")
    n_sel = float(mask.sum())
    if n_sel == 0:
        raise ContractViolation("masked_data_loss: empty mask")
    d = T.mul(T.sub(x_hat, tape.const(x_star)), tape.const(mask))
    return T.scale(T.tsum(T.mul(d, d)), 1.0 / n_sel)


def masked_data_loss(x_hat: np.ndarray, x_star: np.ndarray, mask: np.ndarray) -> float:
    tape = Tape(grad=False)
    return float(masked_data_loss_t(tape, tape.const(x_hat), x_star, mask).value)


def conditional_loss_t(tape: Tape, backbone: StudentGenerator, branch: ControlBranch,
                       op, z: np.ndarray, cond: Condition, x_star: np.ndarray,
                       lambda_phys: float) -> Tensor:
    x_hat = conditional_generate_t(tape, backbone, branch, cond.y, z)
    loss = masked_data_loss_t(tape, x_hat, x_star, cond.mask)
    if lambda_phys > 0.0:
        loss = T.add(loss, T.scale(residuals.physics_error_t(tape, op, x_hat),
                                   lambda_phys))
    return loss


def train_conditional(backbone: StudentGenerator, op, cond: Condition,
                      targets: np.ndarray, lambda_phys: float, cfg: TrainConfig,
                      log_fn=None) -> ControlBranch:
    """SGD on branch parameters only; the backbone stays frozen.

    cond/targets hold the full training pair set; minibatches are drawn
    per step. Deterministic given cfg.seed.
    """
    if targets.shape[0] == 0:
        raise ContractViolation("train_conditional: empty pair set")
    frozen = DenoiserNet(backbone.net.cfg, backbone.net.params.clone(trainable=False),
                         backbone.net.sigma_data)
    bb = StudentGenerator.__new__(StudentGenerator)
    bb.__dict__.update(backbone.__dict__)
    bb.net = frozen
    key = SeedKey(cfg.seed, "conditional")
    branch = ControlBranch.create(frozen, cond.y.shape[1], cond.task, key.child("init"))
    state = derive_seed(key.child("loop"))
    opt = df.Optimizer(branch.params, cfg)
    n = targets.shape[0]
    for step in range(cfg.steps):
        idx = state.integers(0, n, size=min(cfg.batch, n))
        z = backbone.sigma_init * standard_normal(state, targets[idx].shape)
        tape = Tape()
        loss = conditional_loss_t(tape, bb, branch, op, z,
                                  Condition(cond.task, cond.y[idx], cond.mask[idx]),
                                  targets[idx], lambda_phys)
        lval = float(loss.value)
        if not math.isfinite(lval):
            raise df.TrainingFailure("conditional loss diverged", step)
        branch.params.zero_grad()
        T.backward(loss)
        opt.step()
        if log_fn is not None and (step % 50 == 0 or step == cfg.steps - 1):
            log_fn({"step": step, "loss": lval})
    return branch


# ---------------------------------------------------------------------------
# evaluation metrics


def relative_l2(pred: np.ndarray, target: np.ndarray, channels: slice) -> float:
    """Mean over samples of |pred - target|_2 / |target|_2 on the given channels."""
    p = pred[:, channels].reshape(pred.shape[0], -1)
    t = target[:, channels].reshape(target.shape[0], -1)
    num = np.sqrt(((p - t) ** 2).sum(axis=1))
    den = np.sqrt((t ** 2).sum(axis=1)) + 1e-300
    return float((num / den).mean())


def darcy_class_error(pred_a: np.ndarray, true_a: np.ndarray) -> float:
    """Fraction of nodes whose nearest of {3, 12} differs from ground truth."""
    cls_pred = np.where(np.abs(pred_a - 12.0) <= np.abs(pred_a - 3.0), 12.0, 3.0)
    return float((cls_pred != true_a).mean())


def task_channels(task: str, field_channels: int) -> slice:
    """Channels scored by the task's headline error metric."""
    if task == "forward":
        return slice(field_channels - 1, field_channels)
    if task == "inverse":
        return slice(0, field_channels - 1)
    return slice(0, field_channels)
