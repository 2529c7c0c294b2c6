import numpy as np
import pytest

from pdegen import pde
from pdegen.rng import SeedKey, derive_seed
from pdegen.grf import GrfSpec, PERIODIC, grf_sample, mode_coefficients


def test_cg_identity_one_iteration():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((6, 6))
    u = pde.cg_solve(lambda v: v, b, tol=1e-12, max_iter=1)
    assert np.allclose(u, b)


def test_cg_manufactured_solution():
    # 5-point Laplacian on the 8x8 interior of a 10x10 grid.
    rng = np.random.default_rng(1)
    n = 10
    h = 1.0 / (n - 1)
    u_star = np.zeros((n, n))
    u_star[1:-1, 1:-1] = rng.standard_normal((n - 2, n - 2))
    b = pde.neg_laplacian(u_star, h)
    u = pde.cg_solve(lambda v: pde.neg_laplacian(v, h), b, tol=1e-12, max_iter=1000)
    assert np.abs(u - u_star).max() < 1e-9


def test_cg_failure_carries_residual():
    rng = np.random.default_rng(2)
    n, h = 10, 1.0 / 9
    b = np.zeros((n, n))
    b[1:-1, 1:-1] = rng.standard_normal((n - 2, n - 2))
    with pytest.raises(pde.SolverFailure) as e:
        pde.cg_solve(lambda v: pde.neg_laplacian(v, h), b, tol=1e-14, max_iter=2)
    assert e.value.residual > 0


def _dense_from_operator(apply_A, n):
    """Assemble the interior-restricted dense matrix column by column."""
    idx = [(i, j) for i in range(1, n - 1) for j in range(1, n - 1)]
    m = len(idx)
    A = np.zeros((m, m))
    for col, (i, j) in enumerate(idx):
        e = np.zeros((n, n))
        e[i, j] = 1.0
        Ae = apply_A(e)
        A[:, col] = [Ae[p, q] for (p, q) in idx]
    return A, idx


def test_constant_darcy_equals_poisson_and_dense_lu():
    # a = 1: -div(grad u) = 1 is the Poisson solve of -lap u = 1.
    n = 12
    h = 1.0 / (n - 1)
    a = np.ones((n, n))
    u_darcy = pde.solve_darcy(a, 1.0, tol=1e-12, max_iter=5000)
    u_pois = pde.solve_poisson(-np.ones((n, n)), tol=1e-12, max_iter=5000)
    assert np.abs(u_darcy - u_pois).max() < 1e-8

    A, idx = _dense_from_operator(lambda v: pde.darcy_apply(a, v, h), n)
    u_dense = np.linalg.solve(A, np.ones(len(idx)))
    got = np.array([u_darcy[p, q] for (p, q) in idx])
    assert np.abs(got - u_dense).max() < 1e-8


def test_darcy_threshold_rule():
    assert np.all(pde.threshold_darcy(np.full((4, 4), 0.5)) == 12.0)
    assert np.all(pde.threshold_darcy(np.full((4, 4), -0.1)) == 3.0)
    m = np.array([[0.0, -1e-12], [1e-12, 2.0]])
    assert np.array_equal(pde.threshold_darcy(m), [[12.0, 3.0], [12.0, 12.0]])


def test_generated_darcy_coefficient_is_binary():
    cfg = pde.default_config("darcy")
    s = pde.generate("darcy", cfg, SeedKey(11, "data", 0))
    assert set(np.unique(s.channels[0])) <= {3.0, 12.0}


def test_poisson_zero_forcing_gives_zero_solution():
    u = pde.solve_poisson(np.zeros((10, 10)), tol=1e-12, max_iter=100)
    assert np.all(u == 0.0)


def test_dirichlet_solutions_vanish_on_boundary():
    for kind in ("darcy", "poisson", "helmholtz"):
        cfg = pde.default_config(kind, size=16)
        s = pde.generate(kind, cfg, SeedKey(12, "data", 3))
        u = s.channels[1]
        assert np.all(u[0] == 0) and np.all(u[-1] == 0)
        assert np.all(u[:, 0] == 0) and np.all(u[:, -1] == 0)


def test_ns_zero_state_is_fixed_point():
    cfg = pde.default_config("navier_stokes")
    w = pde.spectral_step_ns(np.zeros((32, 32)), cfg, forcing=None)
    assert np.abs(w).max() < 1e-14


def test_ns_single_mode_semi_implicit_decay():
    cfg = pde.default_config("navier_stokes")
    n = 32
    x = np.arange(n) / n
    w = np.sin(2 * np.pi * 3 * x)[None, :] * np.ones((n, 1))
    out = pde.spectral_step_ns(w, cfg, forcing=None, advect=False)
    dt = cfg.final_time / cfg.ns_steps
    factor = 1.0 / (1.0 + dt * cfg.viscosity * (2 * np.pi * 3) ** 2)
    assert np.allclose(out, factor * w, atol=1e-12)


def test_ns_mean_conserved_with_zero_mean_forcing():
    cfg = pde.default_config("navier_stokes")
    state = derive_seed(SeedKey(13, "ns", 0))
    w = grf_sample(cfg.grf_spec, state)
    q = pde.ns_forcing(32)
    assert abs(q.mean()) < 1e-14
    mean0 = w.mean()
    for _ in range(cfg.ns_steps):
        w = pde.spectral_step_ns(w, cfg, forcing=q)
    assert abs(w.mean() - mean0) < 1e-13


def test_burgers_constant_state_unchanged():
    cfg = pde.default_config("burgers")
    u = np.full(64, 0.7)
    out = pde.spectral_step_burgers(u, 0.01, cfg)
    assert np.abs(out - u).max() < 1e-13


def test_burgers_mean_conserved_per_step():
    cfg = pde.default_config("burgers")
    u = grf_sample(cfg.grf_spec, derive_seed(SeedKey(14, "burgers", 0)))
    for _ in range(5):
        m0 = u.mean()
        u = pde.spectral_step_burgers(u, 0.005, cfg)
        assert abs(u.mean() - m0) < 1e-10


def test_burgers_pure_diffusion_exact_mode_decay():
    cfg = pde.default_config("burgers")
    n, j, dt = 64, 5, 0.01
    x = np.arange(n) / n
    u = np.cos(2 * np.pi * j * x)
    out = pde.spectral_step_burgers(u, dt, cfg, flux=False)
    assert np.allclose(out, np.exp(-cfg.viscosity * (2 * np.pi * j) ** 2 * dt) * u,
                       atol=1e-13)


def test_burgers_small_amplitude_heat_linearization():
    # nu large, |u0| small: mode amplitudes follow exp(-nu (2 pi j)^2 t) within 5%.
    cfg = pde.default_config("burgers", viscosity=0.5,
                             grf_spec=GrfSpec(1e-4, 25.0, 2.0, PERIODIC, (64,)))
    u0 = grf_sample(cfg.grf_spec, derive_seed(SeedKey(15, "burgers", 1)))
    t, steps = 0.05, 50
    u = u0.copy()
    for _ in range(steps):
        u = pde.spectral_step_burgers(u, t / steps, cfg)
    c0 = mode_coefficients(cfg.grf_spec, u0)
    ct = mode_coefficients(cfg.grf_spec, u)
    # columns of the periodic basis: [const, cos1, sin1, cos2, sin2, ...]
    for j in (1, 2, 3):
        for col in (2 * j - 1, 2 * j):
            want = np.exp(-cfg.viscosity * (2 * np.pi * j) ** 2 * t) * c0[col]
            assert abs(ct[col] - want) <= 0.05 * abs(want)


def test_generate_burgers_shape_and_t0_row():
    cfg = pde.default_config("burgers", size=32)
    s = pde.generate("burgers", cfg, SeedKey(16, "data", 0))
    assert s.channels.shape == (1, 32, 32)
    u0 = grf_sample(cfg.grf_spec, derive_seed(SeedKey(16, "data", 0)))
    assert np.array_equal(s.channels[0, 0], u0)


def test_dataset_generation_reproducible():
    cfg = pde.default_config("poisson", size=16)
    a = pde.generate_dataset(cfg, SeedKey(17, "data", 0), 3)
    b = pde.generate_dataset(cfg, SeedKey(17, "data", 0), 3)
    assert np.array_equal(a, b)


def test_config_rejects_unknown_kind():
    with pytest.raises(Exception):
        pde.default_config("advection")
