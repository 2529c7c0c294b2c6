"""Physics-guided distillation of a multi-step diffusion teacher into a
unified k-step student generator.

Two alternating phases: a score-learning phase fits an auxiliary
denoiser to the student's own samples by denoising score matching
(gradients into the generator are severed), and a generator phase
updates the student with the score-difference estimator

    w(s) SG{ s_aux(x_t, s) - s_teacher(x_t, s) }^T grad_theta x_t
      + lambda_phys * grad_theta R(g(z; k)),

where x_t = g(z; k) + s * noise, k ~ Delta_K, and R is the mean squared
PDE residual of the generated sample. The loop never reads the training
dataset; clean samples are always generated on the fly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as df
from . import residuals
from . import tensor as T
from .pde import FieldSample
from .rng import SeedKey, derive_seed, standard_normal
from .tensor import ContractViolation, Tape, Tensor


@dataclass(frozen=True)
class DistillConfig:
    k_max: int = 4
    delta_k: tuple[float, ...] = ()    # categorical weights over {1..k_max}; () = uniform
    sigma_init: float = 1.5
    lambda_phys: float = 5e-3          # stable in [1e-3, 1e-2]; 5e-2 diverged in ablations
    guidance_start: int = 0            # optimizer step at which the penalty activates
    aux_updates_per_gen: int = 2
    batch: int = 16
    lr_gen: float = 1e-4
    lr_aux: float = 1e-4
    steps: int = 1000
    seed: int = 0
    method: str = "heun"               # student step operator: euler | heun
    sigma_min: float = 0.002
    rho: float = 7.0
    p_mean: float = -1.2               # ln sigma law shared with DSM training
    p_std: float = 1.2
    optimizer: str = "sgd"
    epsilon: float = 0.0               # feasibility threshold; reporting only,
    probe_batch: int = 8               # dropped by the penalty relaxation

    def weights(self) -> np.ndarray:
        w = np.asarray(self.delta_k if self.delta_k else [1.0] * self.k_max, float)
        if w.shape != (self.k_max,) or np.any(w < 0) or w.sum() <= 0:
            raise ContractViolation(f"bad delta_k weights {self.delta_k}")
        return w / w.sum()

    def validate(self):
        if self.k_max < 1 or self.sigma_init <= 0 or self.lambda_phys < 0:
            raise ContractViolation("DistillConfig: k_max >= 1, sigma_init > 0, "
                                    "lambda_phys >= 0 required")
        self.weights()

    def with_(self, **kw) -> "DistillConfig":
        return replace(self, **kw)


def student_schedule(k: int, sigma_init: float, sigma_min: float = 0.002,
                     rho: float = 7.0) -> df.NoiseSchedule:
    """k+1 levels: sigma_init at the top, rho-warped interior levels toward
    sigma_min, and an exact 0 as the final level."""
    if k < 1:
        raise ContractViolation(f"student schedule needs k >= 1, got {k}")
    levels = df._warped_levels(k + 1, sigma_min, sigma_init, rho)
    levels[-1] = 0.0
    return df.NoiseSchedule(tuple(levels), rho, sigma_min, sigma_init)


class StudentGenerator:
    """Few-step generator g(z; k): k unrolled step-operator applications of
    a denoiser net down a fixed sigma_init-anchored schedule."""

    def __init__(self, net: df.DenoiserNet, cfg: DistillConfig,
                 grid: tuple[int, int], kind: str = ""):
        self.net = net
        self.method = cfg.method
        self.sigma_init = cfg.sigma_init
        self.k_max = cfg.k_max
        self.grid = tuple(grid)
        self.kind = kind
        self.schedules = {k: student_schedule(k, cfg.sigma_init, cfg.sigma_min, cfg.rho)
                          for k in range(1, cfg.k_max + 1)}

    @property
    def field_shape(self):
        return (self.net.cfg.channels,) + self.grid

    def generate_np(self, z: np.ndarray, k: int) -> np.ndarray:
        if not 1 <= k <= self.k_max:
            raise ContractViolation(f"step budget k={k} outside 1..{self.k_max}")
        return df.sample(self.net, self.schedules[k], z, method=self.method)

    def unroll_t(self, tape: Tape, z: np.ndarray, k: int) -> Tensor:
        """Tape-recorded unroll mirroring the numpy sampler arithmetic
        operation for operation, so both paths are bit-identical."""
        if not 1 <= k <= self.k_max:
            raise ContractViolation(f"step budget k={k} outside 1..{self.k_max}")
        levels = self.schedules[k].levels
        batch = z.shape[0]
        x = tape.const(z)
        for s_cur, s_next in zip(levels, levels[1:]):
            sig = np.full(batch, s_cur)
            d = T.scale(T.sub(x, self.net.denoise_t(tape, x, sig)), 1.0 / s_cur)
            x_next = T.add(x, T.scale(d, s_next - s_cur))
            if self.method == "heun" and s_next > 0.0:
                sig2 = np.full(batch, s_next)
                d2 = T.scale(T.sub(x_next, self.net.denoise_t(tape, x_next, sig2)),
                             1.0 / s_next)
                x = T.add(x, T.scale(T.scale(T.add(d, d2), 0.5), s_next - s_cur))
            else:
                x = x_next
        return x


def generate(gen: StudentGenerator, z: np.ndarray, k: int,
             record_grad: bool = False):
    """FieldSample batch from the student; with record_grad, returns
    (tape, Tensor) so theta-gradients of the unroll exist."""
    if record_grad:
        tape = Tape(save_cols=False)  # k-step unrolls would hoard patch matrices
        return tape, gen.unroll_t(tape, z, k)
    return FieldSample(gen.kind, gen.generate_np(z, k))


# ---------------------------------------------------------------------------
# training phases


def _draw_k(cfg: DistillConfig, state) -> int:
    return 1 + int(state.choice(cfg.k_max, p=cfg.weights()))


def _draw_z(cfg: DistillConfig, state, shape) -> np.ndarray:
    return cfg.sigma_init * standard_normal(state, shape)


def auxiliary_phase(aux: df.DenoiserNet, gen: StudentGenerator,
                    cfg: DistillConfig, state, opt: df.Optimizer) -> float:
    """One DSM step of the auxiliary net on freshly generated samples.

    x0 comes off the no-grad sampling path, so nothing can flow into the
    generator parameters.
    """
    field_shape = (cfg.batch,) + gen.field_shape
    k = _draw_k(cfg, state)
    x0 = gen.generate_np(_draw_z(cfg, state, field_shape), k)
    sigma = np.exp(cfg.p_mean + cfg.p_std * standard_normal(state, cfg.batch))
    noise = standard_normal(state, x0.shape)
    tape = Tape()
    loss = df.dsm_loss_t(tape, aux, x0, sigma, noise)
    aux.params.zero_grad()
    T.backward(loss)
    opt.step()
    return float(loss.value)


def generator_phase(gen: StudentGenerator, aux: df.DenoiserNet,
                    teacher: df.DenoiserNet, op, cfg: DistillConfig,
                    state, opt: df.Optimizer, step_idx: int = 0):
    """One update of the generator: score-difference weight (stop-gradient)
    against x_t plus the physics penalty on x0 when active."""
    field_shape = (cfg.batch,) + gen.field_shape
    k = _draw_k(cfg, state)
    z = _draw_z(cfg, state, field_shape)
    sigma = np.exp(cfg.p_mean + cfg.p_std * standard_normal(state, cfg.batch))
    noise = standard_normal(state, field_shape)

    tape = Tape(save_cols=False)
    x0 = gen.unroll_t(tape, z, k)
    xt = T.add(x0, tape.const(sigma[:, None, None, None] * noise))
    # SG{s_aux - s_teacher}: the x_t terms cancel in the score difference
    v = (aux.denoise(xt.value, sigma) - teacher.denoise(xt.value, sigma)) \
        / (sigma ** 2)[:, None, None, None]
    if not np.all(np.isfinite(v)):
        raise df.TrainingFailure("score-difference weight is not finite", step_idx)
    w = df.dsm_weight(sigma, teacher.sigma_data) * sigma ** 4  # score-form w(s)
    ikl = T.tsum(T.row_scale(T.mul(tape.const(v), xt), w / cfg.batch))

    guided = cfg.lambda_phys > 0.0 and step_idx >= cfg.guidance_start
    if guided:
        r_term = residuals.physics_error_t(tape, op, x0)
        loss = T.add(ikl, T.scale(r_term, cfg.lambda_phys))
    else:
        loss = ikl
    if not math.isfinite(float(loss.value)):
        raise df.TrainingFailure("generator loss diverged", step_idx)

    gen.net.params.zero_grad()
    T.backward(loss)
    opt.step()
    r_val = float(residuals.physics_error(op, x0.value))
    return float(ikl.value), r_val


@dataclass
class DistillResult:
    student: StudentGenerator
    aux: df.DenoiserNet
    log: list[dict] = field(default_factory=list)


def distill(teacher: df.DenoiserNet, op: residuals.ResidualOperator,
            cfg: DistillConfig, log_fn=None) -> DistillResult:
    """Algorithm: alternate aux_updates_per_gen score-learning phases with
    one generator phase until the step budget is exhausted. Both the
    student and the auxiliary start from the teacher's parameters; the
    teacher itself stays frozen. Deterministic given cfg.seed."""
    cfg.validate()
    frozen = df.DenoiserNet(teacher.cfg, teacher.params.clone(trainable=False),
                            teacher.sigma_data)
    student = StudentGenerator(teacher.clone(trainable=True), cfg, op.grid,
                               kind=op.pde_kind)
    aux = teacher.clone(trainable=True)
    state = derive_seed(SeedKey(cfg.seed, "distill"))
    opt_aux = df.Optimizer(aux.params, df.TrainConfig(lr=cfg.lr_aux,
                                                      optimizer=cfg.optimizer))
    opt_gen = df.Optimizer(student.net.params, df.TrainConfig(lr=cfg.lr_gen,
                                                              optimizer=cfg.optimizer))
    probe_z = cfg.sigma_init * standard_normal(
        derive_seed(SeedKey(cfg.seed, "distill/probe")),
        (cfg.probe_batch,) + student.field_shape)

    records = []
    for step in range(cfg.steps):
        dsm_val = 0.0
        for _ in range(cfg.aux_updates_per_gen):
            dsm_val = auxiliary_phase(aux, student, cfg, state, opt_aux)
        ikl_val, r_val = generator_phase(student, aux, frozen, op, cfg, state,
                                         opt_gen, step_idx=step)
        probe = student.generate_np(probe_z, 1)
        rec = {"step": step, "dsm": dsm_val, "ikl": ikl_val, "R": r_val,
               "rms_pde": residuals.rms_pde_error(op, probe)}
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return DistillResult(student=student, aux=aux, log=records)
