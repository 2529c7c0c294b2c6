"""Forward noising, preconditioned convolutional denoiser, denoising
score matching, and deterministic Euler/Heun samplers.

The denoiser follows the standard variance-exploding preconditioning

    D(x; s) = c_skip(s) x + c_out(s) F(c_in(s) x; c_noise(s)),
    c_skip = sd^2/(s^2+sd^2),  c_out = s sd/sqrt(s^2+sd^2),
    c_in = 1/sqrt(s^2+sd^2),   c_noise = ln(s)/4,

around a 3-level convolutional encoder-decoder (additive skips, silu,
per-level noise embedding). Noise levels for sampling come from the
rho-warped schedule between sigma_max and sigma_min with a trailing
exact zero. Training draws sigma log-normally and weights the denoiser
loss with lambda(s) = (s^2+sd^2)/(s sd)^2, which keeps per-sigma loss
scale uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import residuals
from . import tensor as T
from .rng import SeedKey, derive_seed, standard_normal
from .tensor import ContractViolation, Parameters, Tape, Tensor


class TrainingFailure(RuntimeError):
    def __init__(self, msg: str, step: int):
        super().__init__(f"{msg} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# noise schedules


@dataclass(frozen=True)
class NoiseSchedule:
    levels: tuple[float, ...]      # strictly decreasing, ends at exactly 0
    rho: float
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ContractViolation("schedule needs at least 2 levels")
        for a, b in zip(self.levels, self.levels[1:]):
            if not a > b:
                raise ContractViolation(f"schedule not strictly decreasing: {a} !> {b}")
        if self.levels[-1] not in (0.0, self.sigma_min):
            raise ContractViolation("schedule must end at 0 or sigma_min")

    @property
    def steps(self) -> int:
        return len(self.levels) - 1


def _warped_levels(n: int, lo: float, hi: float, rho: float) -> list[float]:
    a, b = hi ** (1.0 / rho), lo ** (1.0 / rho)
    levels = [(a + i / (n - 1) * (b - a)) ** rho for i in range(n)]
    levels[0], levels[-1] = hi, lo  # endpoints exact, not through the warp round-trip
    return levels


def sigma_schedule(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0,
                   rho: float = 7.0) -> NoiseSchedule:
    """n rho-warped levels from sigma_max to sigma_min plus a trailing 0."""
    if n < 2 or not (0.0 < sigma_min < sigma_max) or rho < 1.0:
        raise ContractViolation(f"bad schedule spec n={n} min={sigma_min} "
                                f"max={sigma_max} rho={rho}")
    levels = _warped_levels(n, sigma_min, sigma_max, rho) + [0.0]
    return NoiseSchedule(tuple(levels), rho, sigma_min, sigma_max)


# ---------------------------------------------------------------------------
# denoiser network


@dataclass(frozen=True)
class NetConfig:
    channels: int                   # field channels (in == out)
    widths: tuple[int, int, int] = (32, 64, 64)
    emb_features: int = 2

    def validate_grid(self, grid):
        if grid[0] % 4 or grid[1] % 4:
            raise ContractViolation(f"grid {grid} must be divisible by 4 "
                                    "for the 3-level net")


def _conv_init(state, cout, cin, k, gain=1.0):
    fan_in = cin * k * k
    return gain * standard_normal(state, (cout, cin, k, k)) / math.sqrt(fan_in)


def init_params(cfg: NetConfig, key: SeedKey, prefix: str = "",
                trainable: bool = True) -> Parameters:
    """Encoder-decoder weights; the output conv starts at zero so the
    freshly initialized denoiser is D(x; s) = c_skip(s) x."""
    state = derive_seed(key)
    p = Parameters(trainable=trainable)
    w0, w1, w2 = cfg.widths
    c, e = cfg.channels, cfg.emb_features

    def block(name, cin, cout):
        p.add(f"{prefix}{name}.conv1.w", _conv_init(state, cout, cin, 3))
        p.add(f"{prefix}{name}.conv1.b", np.zeros(cout))
        p.add(f"{prefix}{name}.emb.w", standard_normal(state, (e, cout)) / math.sqrt(e))
        p.add(f"{prefix}{name}.emb.b", np.zeros(cout))
        p.add(f"{prefix}{name}.conv2.w", _conv_init(state, cout, cout, 3))
        p.add(f"{prefix}{name}.conv2.b", np.zeros(cout))

    block("enc0", c, w0)
    block("enc1", w0, w1)
    block("mid", w1, w2)
    block("dec1", w2, w1)
    p.add(f"{prefix}dec0.conv1.w", _conv_init(state, w0, w1, 3))
    p.add(f"{prefix}dec0.conv1.b", np.zeros(w0))
    p.add(f"{prefix}dec0.emb.w", standard_normal(state, (e, w0)) / math.sqrt(e))
    p.add(f"{prefix}dec0.emb.b", np.zeros(w0))
    p.add(f"{prefix}out.w", np.zeros((c, w0, 3, 3)))
    p.add(f"{prefix}out.b", np.zeros(c))
    return p


def _block(tape, params, prefix, name, x, emb):
    h = T.conv2d(x, tape.param(params, f"{prefix}{name}.conv1.w"),
                 tape.param(params, f"{prefix}{name}.conv1.b"))
    eb = T.affine(emb, tape.param(params, f"{prefix}{name}.emb.w"),
                  tape.param(params, f"{prefix}{name}.emb.b"))
    h = T.silu(T.chan_bias(h, eb))
    h = T.silu(T.conv2d(h, tape.param(params, f"{prefix}{name}.conv2.w"),
                        tape.param(params, f"{prefix}{name}.conv2.b")))
    return h


def encoder_features(tape, params, prefix, xin, emb):
    """Shared by the backbone and the conditional hint branch."""
    f0 = _block(tape, params, prefix, "enc0", xin, emb)
    f1 = _block(tape, params, prefix, "enc1", T.down2(f0), emb)
    m = _block(tape, params, prefix, "mid", T.down2(f1), emb)
    return f0, f1, m


class DenoiserNet:
    """Preconditioned denoiser; instantiated as teacher, auxiliary, and the
    network inside the k-step student."""

    def __init__(self, cfg: NetConfig, params: Parameters, sigma_data: float):
        if sigma_data <= 0 or not math.isfinite(sigma_data):
            raise ContractViolation(f"sigma_data must be positive, got {sigma_data}")
        self.cfg = cfg
        self.params = params
        self.sigma_data = float(sigma_data)

    @classmethod
    def create(cls, channels: int, sigma_data: float, key: SeedKey,
               widths=(32, 64, 64)) -> "DenoiserNet":
        cfg = NetConfig(channels=channels, widths=tuple(widths))
        return cls(cfg, init_params(cfg, key), sigma_data)

    def clone(self, trainable: bool = True) -> "DenoiserNet":
        return DenoiserNet(self.cfg, self.params.clone(trainable=trainable),
                           self.sigma_data)

    def precond(self, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ContractViolation("denoise needs sigma > 0")
        sd2 = self.sigma_data ** 2
        den = sigma ** 2 + sd2
        c_skip = sd2 / den
        c_out = sigma * self.sigma_data / np.sqrt(den)
        c_in = 1.0 / np.sqrt(den)
        c_noise = np.log(sigma) / 4.0
        return c_skip, c_out, c_in, c_noise

    def forward_t(self, tape: Tape, xin: Tensor, c_noise: np.ndarray,
                  injections=None) -> Tensor:
        """Raw network F on a preconditioned input; injections is an optional
        dict with per-level hint tensors {"mid", "dec1", "dec0"}."""
        p = self.params
        emb = tape.const(np.stack([np.sin(c_noise), np.cos(c_noise)], axis=1))
        f0, f1, m = encoder_features(tape, p, "", xin, emb)
        if injections and "mid" in injections:
            m = T.add(m, injections["mid"])
        s1 = T.add(T.up2(m), f1)
        if injections and "dec1" in injections:
            s1 = T.add(s1, injections["dec1"])
        g1 = _block(tape, p, "", "dec1", s1, emb)
        u0 = T.up2(g1)
        if injections and "dec0" in injections:
            u0 = T.add(u0, injections["dec0"])
        h = T.conv2d(u0, tape.param(p, "dec0.conv1.w"), tape.param(p, "dec0.conv1.b"))
        eb = T.affine(emb, tape.param(p, "dec0.emb.w"), tape.param(p, "dec0.emb.b"))
        h = T.silu(T.chan_bias(h, eb))
        h = T.add(h, f0)
        return T.conv2d(h, tape.param(p, "out.w"), tape.param(p, "out.b"))

    def denoise_t(self, tape: Tape, x: Tensor, sigma: np.ndarray,
                  injections=None) -> Tensor:
        c_skip, c_out, c_in, c_noise = self.precond(sigma)
        f = self.forward_t(tape, T.row_scale(x, c_in), c_noise, injections)
        return T.add(T.row_scale(x, c_skip), T.row_scale(f, c_out))

    def denoise(self, x: np.ndarray, sigma) -> np.ndarray:
        """Inference-path denoise on a throwaway tape."""
        tape = Tape(grad=False)
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        return self.denoise_t(tape, tape.const(x), sig).value

    def score(self, x: np.ndarray, sigma) -> np.ndarray:
        """s(x, sigma) = (D(x; sigma) - x) / sigma^2."""
        sig = np.asarray(sigma, dtype=np.float64)
        if np.any(sig <= 0):
            raise ContractViolation("score needs sigma > 0")
        s2 = np.broadcast_to(sig, (x.shape[0],)) ** 2
        return (self.denoise(x, sigma) - x) / s2[:, None, None, None]


def score_from_denoiser(net, x: np.ndarray, sigma) -> np.ndarray:
    return net.score(x, sigma)


def sigma_data_of(dataset: np.ndarray) -> float:
    """Pooled RMS over channels after per-channel centering."""
    mu = dataset.mean(axis=(0, 2, 3), keepdims=True)
    return float(np.sqrt(((dataset - mu) ** 2).mean()))


# ---------------------------------------------------------------------------
# forward process and DSM


def perturb(x0: np.ndarray, sigma, noise: np.ndarray) -> np.ndarray:
    """Variance-exploding forward kernel: x_t = x_0 + sigma * noise."""
    if noise.shape != x0.shape:
        raise ContractViolation(f"perturb: noise {noise.shape} vs x0 {x0.shape}")
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig.reshape((-1,) + (1,) * (x0.ndim - 1))
    return x0 + sig * noise


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    lr: float = 1e-4
    steps: int = 2000
    p_mean: float = -1.2          # ln sigma law for training draws
    p_std: float = 1.2
    ema: float = 0.999
    seed: int = 0
    optimizer: str = "sgd"        # sgd | adam
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    widths: tuple[int, int, int] = (32, 64, 64)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def draw_sigma(cfg: TrainConfig, state, n: int) -> np.ndarray:
    return np.exp(cfg.p_mean + cfg.p_std * standard_normal(state, n))


def dsm_weight(sigma: np.ndarray, sigma_data: float) -> np.ndarray:
    """lambda(s) = (s^2 + sd^2) / (s sd)^2, the denoiser-form weight."""
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def dsm_loss_t(tape: Tape, net, x0: np.ndarray, sigma: np.ndarray,
               noise: np.ndarray) -> Tensor:
    """Batch mean of lambda(s) |D(x0 + s n; s) - x0|^2 on the tape."""
    if x0.shape[0] == 0:
        raise ContractViolation("dsm_loss: empty batch")
    xt = tape.const(perturb(x0, sigma, noise))
    d = T.sub(net.denoise_t(tape, xt, sigma), tape.const(x0))
    w = dsm_weight(sigma, net.sigma_data) / x0.shape[0]
    return T.tsum(T.row_scale(T.mul(d, d), w))


def dsm_loss(net, batch: np.ndarray, cfg: TrainConfig, state) -> float:
    """Monte-Carlo DSM estimate on a numpy batch (evaluation path)."""
    sigma = draw_sigma(cfg, state, batch.shape[0])
    noise = standard_normal(state, batch.shape)
    tape = Tape(grad=False)
    return float(dsm_loss_t(tape, net, batch, sigma, noise).value)


class Optimizer:
    """Parameter update rule: plain SGD by default, Adam optional."""

    def __init__(self, params: Parameters, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.blocks.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.blocks.items()}
        elif cfg.optimizer != "sgd":
            raise ContractViolation(f"unknown optimizer {cfg.optimizer!r}")

    def step(self):
        c = self.cfg
        self.t += 1
        if c.optimizer == "sgd":
            for k, p in self.params.blocks.items():
                p -= c.lr * self.params.grads[k]
            return
        b1c = 1.0 - c.adam_beta1 ** self.t
        b2c = 1.0 - c.adam_beta2 ** self.t
        for k, p in self.params.blocks.items():
            g = self.params.grads[k]
            self.m[k] = c.adam_beta1 * self.m[k] + (1 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1 - c.adam_beta2) * g * g
            p -= c.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.adam_eps)


def train_teacher(dataset: np.ndarray, cfg: TrainConfig, sigma_data=None,
                  log=None) -> DenoiserNet:
    """DSM gradient descent with parameter EMA; returns the EMA net.

    Deterministic given cfg.seed; raises TrainingFailure on a NaN loss.
    """
    if dataset.shape[0] == 0:
        raise ContractViolation("train_teacher: empty dataset")
    sd = sigma_data if sigma_data is not None else sigma_data_of(dataset)
    key = SeedKey(cfg.seed, "teacher")
    net = DenoiserNet.create(dataset.shape[1], sd, key.child("init"), cfg.widths)
    ema = net.params.clone()
    state = derive_seed(key.child("loop"))
    opt = Optimizer(net.params, cfg)
    for step in range(cfg.steps):
        idx = state.integers(0, dataset.shape[0], size=cfg.batch)
        x0 = dataset[idx]
        sigma = draw_sigma(cfg, state, cfg.batch)
        noise = standard_normal(state, x0.shape)
        tape = Tape()
        loss = dsm_loss_t(tape, net, x0, sigma, noise)
        lval = float(loss.value)
        if not math.isfinite(lval):
            raise TrainingFailure("dsm loss diverged", step)
        net.params.zero_grad()
        T.backward(loss)
        opt.step()
        ema.ema_update(net.params, cfg.ema)
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log({"step": step, "dsm": lval})
    return DenoiserNet(net.cfg, ema, net.sigma_data)


# ---------------------------------------------------------------------------
# deterministic samplers


def _heun_step(denoise_fn, x: np.ndarray, s_cur: float, s_next: float,
               method: str) -> np.ndarray:
    d = (x - denoise_fn(x, s_cur)) * (1.0 / s_cur)
    x_next = x + (s_next - s_cur) * d
    if method == "heun" and s_next > 0.0:
        d2 = (x_next - denoise_fn(x_next, s_next)) * (1.0 / s_next)
        x_next = x + (s_next - s_cur) * (0.5 * (d + d2))
    return x_next


def sample(net, schedule: NoiseSchedule, z: np.ndarray,
           method: str = "heun") -> np.ndarray:
    """Deterministic probability-flow sampling from z drawn at the top level."""
    if method not in ("euler", "heun"):
        raise ContractViolation(f"unknown sampler method {method!r}")
    x = z
    for s_cur, s_next in zip(schedule.levels, schedule.levels[1:]):
        x = _heun_step(net.denoise, x, s_cur, s_next, method)
    return x


def guided_sample(net, schedule: NoiseSchedule, z: np.ndarray,
                  op: residuals.ResidualOperator, gamma: float,
                  active_fraction: float, method: str = "heun") -> np.ndarray:
    """Inference-time physics guidance: over the last active_fraction of
    steps, the denoised estimate is corrected by -gamma * grad R before it
    enters the step update. gamma = 0 reproduces sample() bit for bit."""
    if gamma < 0 or not (0.0 < active_fraction <= 1.0):
        raise ContractViolation(f"bad guidance gamma={gamma} "
                                f"active_fraction={active_fraction}")
    n_steps = schedule.steps
    first_active = n_steps - max(1, math.ceil(active_fraction * n_steps))
    x = z
    for i, (s_cur, s_next) in enumerate(zip(schedule.levels, schedule.levels[1:])):
        if gamma > 0.0 and i >= first_active:
            def denoise_fn(v, s):
                x0_hat = net.denoise(v, s)
                return x0_hat - gamma * residuals.residual_gradient(op, x0_hat)
        else:
            denoise_fn = net.denoise
        x = _heun_step(denoise_fn, x, s_cur, s_next, method)
    return x
