"""Tests for pooling, the plane-stress element, equilibrium solves and sensitivities."""

import numpy as np
import pytest

from topostyle import mechanics as M


def ke_quadrature(young, poisson):
    """Independent stiffness oracle: 2x2 Gauss integration of the bilinear element.

    Unit square, nodes counterclockwise from the bottom-left corner, plane
    stress, unit thickness. The 2-point rule integrates the bilinear B^T D B
    integrand exactly.
    """
    d = young / (1 - poisson ** 2) * np.array([
        [1.0, poisson, 0.0],
        [poisson, 1.0, 0.0],
        [0.0, 0.0, (1.0 - poisson) / 2.0]])
    ke = np.zeros((8, 8))
    g = 1.0 / np.sqrt(3.0)
    jac = np.array([[0.5, 0.0], [0.0, 0.5]])  # x = (xi+1)/2, y = (eta+1)/2
    for xi in (-g, g):
        for eta in (-g, g):
            dn = 0.25 * np.array([
                [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
                [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)]])
            dnxy = np.linalg.solve(jac, dn)
            b = np.zeros((3, 8))
            b[0, 0::2] = dnxy[0]
            b[1, 1::2] = dnxy[1]
            b[2, 0::2] = dnxy[1]
            b[2, 1::2] = dnxy[0]
            ke += b.T @ d @ b * np.linalg.det(jac)
    return ke


def mbb_small(n=8, **kw):
    problem = M.preset_problem("mbb", n)
    for key, val in kw.items():
        setattr(problem, key, val)
    return problem


# ---------------------------------------------------------------- pooling

def test_average_pool_constant():
    assert np.allclose(M.average_pool(np.full((8, 8), 0.37), 4), 0.37)


def test_average_pool_checkerboard():
    x = np.indices((8, 8)).sum(axis=0) % 2
    assert np.all(M.average_pool(x.astype(float), 4) == 0.5)


def test_average_pool_preserves_mean_exactly():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(12, 20))
    assert M.average_pool(x, 4).mean() == pytest.approx(x.mean(), abs=1e-15)


def test_average_pool_rejects_indivisible():
    with pytest.raises(ValueError):
        M.average_pool(np.zeros((9, 8)), 4)
    with pytest.raises(ValueError):
        M.average_pool(np.zeros((8, 8)), 0)


def test_unpool_gradient_matches_finite_differences():
    # the map is linear, so central differences are exact up to round-off
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(8, 8))
    w = rng.normal(size=(2, 2))
    loss = lambda f: float(np.sum(w * M.average_pool(f, 4)))
    grad = M.unpool_gradient(w, 4)
    eps = 0.01  # the map is linear, so a large step has no truncation error
    for i, j in [(0, 0), (3, 5), (7, 7), (2, 6)]:
        xp = x.copy(); xp[i, j] += eps
        xm = x.copy(); xm[i, j] -= eps
        fd = (loss(xp) - loss(xm)) / (2 * eps)
        assert abs(fd - grad[i, j]) / max(abs(fd), 1e-12) < 1e-10


# ---------------------------------------------------------------- element

def test_element_stiffness_matches_quadrature_oracle():
    for e, nu in [(1.0, 0.3), (2.5, 0.0), (1.0, 0.45)]:
        got = M.element_stiffness(e, nu)
        want = ke_quadrature(e, nu)
        assert np.allclose(got, want, atol=1e-12)


def test_element_stiffness_symmetric():
    ke = M.element_stiffness(1.0, 0.3)
    assert np.max(np.abs(ke - ke.T)) == 0.0


def test_element_stiffness_rigid_modes():
    ke = M.element_stiffness(1.0, 0.3)
    tx = np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=float)
    ty = np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=float)
    assert np.allclose(ke @ tx, 0, atol=1e-14)
    assert np.allclose(ke @ ty, 0, atol=1e-14)
    eig = np.linalg.eigvalsh(ke)
    assert np.sum(np.abs(eig) < 1e-10) == 3  # two translations + one rotation
    assert np.all(eig[np.abs(eig) >= 1e-10] > 0)


def test_element_stiffness_validation():
    with pytest.raises(ValueError):
        M.element_stiffness(0.0, 0.3)
    with pytest.raises(ValueError):
        M.element_stiffness(1.0, 0.5)


# ---------------------------------------------------------------- solving

def test_zero_load_gives_zero_displacement():
    problem = mbb_small(8)
    problem.loads = np.zeros_like(problem.loads)
    u = M.solve_equilibrium(problem, np.full((8, 8), 0.5))
    assert np.all(u == 0.0)


def test_single_element_against_dense_oracle():
    # one element, left edge fully fixed, unit tangential load on the free edge
    nelx = nely = 1
    node = lambda r, c: r * 2 + c
    fixed = [2 * node(0, 0), 2 * node(0, 0) + 1, 2 * node(1, 0), 2 * node(1, 0) + 1]
    loads = np.zeros(8)
    loads[2 * node(0, 1) + 1] = 1.0  # tangential (vertical) pull at top-right
    problem = M.FemProblem(nelx=nelx, nely=nely, fixed_dofs=fixed, loads=loads,
                           p_simp=2.0, target_fraction=0.5)
    rho = np.array([[0.7]])
    u = M.solve_equilibrium(problem, rho)

    ke = ke_quadrature(1.0, 0.3) * 0.7 ** 2.0
    edof = problem.element_dofs()[0]
    k_dense = np.zeros((8, 8))
    k_dense[np.ix_(edof, edof)] = ke
    free = problem.free_dofs()
    u_want = np.zeros(8)
    u_want[free] = np.linalg.solve(k_dense[np.ix_(free, free)], loads[free])
    assert np.allclose(u, u_want, atol=1e-12)


def test_density_doubling_halves_displacement_at_p1():
    problem = mbb_small(8, p_simp=1.0)
    rng = np.random.default_rng(2)
    rho = rng.uniform(0.2, 0.45, size=(8, 8))
    u1 = M.solve_equilibrium(problem, rho)
    u2 = M.solve_equilibrium(problem, 2 * rho)
    assert np.allclose(u2, u1 / 2, rtol=1e-9, atol=1e-12)


def test_pcg_path_reaches_required_residual():
    problem = M.preset_problem("mbb", 48)  # above the dense-solve limit
    rho = np.full((48, 48), 0.5)
    u = M.solve_equilibrium(problem, rho)
    k = M._assemble(problem, np.clip(rho, problem.density_floor, 1.0))
    free = problem.free_dofs()
    r = k[free][:, free] @ u[free] - problem.loads[free]
    rel = np.linalg.norm(r) / np.linalg.norm(problem.loads[free])
    assert rel <= 2e-8


def test_pcg_warm_start_matches_cold_start():
    problem = M.preset_problem("mbb", 48)
    rho = np.full((48, 48), 0.5)
    u_cold = M.solve_equilibrium(problem, rho)
    u_warm = M.solve_equilibrium(problem, rho, warm_start=u_cold)
    assert np.allclose(u_warm, u_cold, rtol=1e-6, atol=1e-10)


def test_underconstrained_problem_raises_singular_error():
    # three fixed DOFs that are all horizontal leave vertical translation free
    n = 4
    node = lambda r, c: r * (n + 1) + c
    fixed = [2 * node(0, 0), 2 * node(0, 4), 2 * node(4, 0)]
    loads = np.zeros(2 * (n + 1) * (n + 1))
    loads[2 * node(2, 2) + 1] = -1.0
    problem = M.FemProblem(nelx=n, nely=n, fixed_dofs=fixed, loads=loads)
    with pytest.raises(M.SingularSystemError):
        M.solve_equilibrium(problem, np.full((n, n), 0.5))


def test_problem_validation():
    with pytest.raises(ValueError):
        M.FemProblem(nelx=4, nely=4, fixed_dofs=[0, 1], loads=np.zeros(50))
    with pytest.raises(ValueError):
        M.FemProblem(nelx=4, nely=4, fixed_dofs=[0, 1, 2], loads=np.zeros(7))
    bad = np.zeros(50)
    bad[0] = np.inf
    with pytest.raises(ValueError):
        M.FemProblem(nelx=4, nely=4, fixed_dofs=[0, 1, 2], loads=bad)
    with pytest.raises(ValueError):
        M.FemProblem(nelx=4, nely=4, fixed_dofs=[0, 1, 2], loads=np.zeros(50),
                     target_fraction=1.5)
    with pytest.raises(ValueError):
        M.FemProblem(nelx=4, nely=4, fixed_dofs=[0, 1, 2], loads=np.zeros(50),
                     p_simp=0.5)


def test_solve_rejects_wrong_density_shape():
    problem = mbb_small(8)
    with pytest.raises(ValueError):
        M.solve_equilibrium(problem, np.full((4, 4), 0.5))


# ------------------------------------------------------- compliance & grads

def test_zero_load_zero_compliance():
    problem = mbb_small(8)
    problem.loads = np.zeros_like(problem.loads)
    rho = np.full((8, 8), 0.5)
    u = M.solve_equilibrium(problem, rho)
    sol = M.compliance_and_sensitivity(problem, rho, u)
    assert sol.compliance == 0.0
    assert np.all(sol.dc_drho == 0.0)


def test_compliance_positive_and_sensitivity_nonpositive():
    problem = mbb_small(8)
    rng = np.random.default_rng(3)
    rho = rng.uniform(0.2, 0.9, size=(8, 8))
    u = M.solve_equilibrium(problem, rho)
    sol = M.compliance_and_sensitivity(problem, rho, u)
    assert sol.compliance > 0
    assert np.all(sol.dc_drho <= 0)
    assert sol.volume_fraction == pytest.approx(rho.mean())


def test_sensitivity_matches_finite_differences():
    # central-difference oracle with a full equilibrium re-solve per probe
    problem = mbb_small(8)
    rng = np.random.default_rng(4)
    rho = rng.uniform(0.3, 0.9, size=(8, 8))
    u = M.solve_equilibrium(problem, rho)
    sol = M.compliance_and_sensitivity(problem, rho, u)
    eps = 1e-6
    flat = [(int(i), int(j)) for i, j in
            zip(rng.integers(0, 8, 10), rng.integers(0, 8, 10))]
    for i, j in flat:
        rp = rho.copy(); rp[i, j] += eps
        rm = rho.copy(); rm[i, j] -= eps
        cp = M.compliance_and_sensitivity(problem, rp, M.solve_equilibrium(problem, rp)).compliance
        cm = M.compliance_and_sensitivity(problem, rm, M.solve_equilibrium(problem, rm)).compliance
        fd = (cp - cm) / (2 * eps)
        an = sol.dc_drho[i, j]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) < 1e-3, (i, j, fd, an)


def test_sensitivity_zero_where_floor_clamps():
    problem = mbb_small(8)
    rho = np.full((8, 8), 0.5)
    rho[0, 0] = 1e-4  # below the density floor: clamp blocks the chain
    u = M.solve_equilibrium(problem, rho)
    sol = M.compliance_and_sensitivity(problem, rho, u)
    assert sol.dc_drho[0, 0] == 0.0


# ---------------------------------------------------------------- mech loss

def test_mech_loss_reference_value():
    # direct arithmetic: 181.08 + 3e3 * (0.366 - 0.35)^2 = 181.848
    assert M.mech_loss(181.08, 0.366, 0.35, 3e3) == pytest.approx(181.848, abs=1e-9)


def test_mech_loss_trivial_cases():
    assert M.mech_loss(12.5, 0.4, 0.4, 3e3) == 12.5
    assert M.mech_loss(12.5, 0.9, 0.4, 0.0) == 12.5
    with pytest.raises(ValueError):
        M.mech_loss(1.0, 1.2, 0.4, 1.0)


def test_mech_objective_gradient_matches_finite_differences():
    problem = mbb_small(8)
    rng = np.random.default_rng(5)
    rho_full = rng.uniform(0.25, 0.85, size=(16, 16))
    res = M.mech_objective(problem, rho_full, pool_factor=2)
    eps = 1e-6
    for i, j in zip(rng.integers(0, 16, 10), rng.integers(0, 16, 10)):
        rp = rho_full.copy(); rp[i, j] += eps
        rm = rho_full.copy(); rm[i, j] -= eps
        lp = M.mech_objective(problem, rp, 2).loss
        lm = M.mech_objective(problem, rm, 2).loss
        fd = (lp - lm) / (2 * eps)
        an = res.grad_full[i, j]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) < 1e-3, (i, j, fd, an)


def test_mech_objective_rejects_mismatched_resolution():
    problem = mbb_small(8)
    with pytest.raises(ValueError):
        M.mech_objective(problem, np.full((20, 16), 0.5), 2)


# ---------------------------------------------------------------- presets

def test_preset_mbb_boundary_conditions():
    problem = M.preset_problem("mbb", 64)
    node = lambda r, c: r * 65 + c
    fixed = set(problem.fixed_dofs.tolist())
    for r in range(65):
        assert 2 * node(r, 0) in fixed  # symmetry plane: no horizontal motion
    assert 2 * node(64, 64) + 1 in fixed  # roller under the far bottom corner
    assert problem.loads[2 * node(0, 0) + 1] == -1.0
    assert problem.target_fraction == pytest.approx(0.28)


def test_preset_bridge_deck_load_total():
    problem = M.preset_problem("bridge", 64)
    assert problem.loads.sum() == pytest.approx(-5.0, abs=1e-12)
    node = lambda r, c: r * 65 + c
    fixed = set(problem.fixed_dofs.tolist())
    assert {2 * node(64, 0), 2 * node(64, 0) + 1, 2 * node(64, 64) + 1} <= fixed


def test_preset_lbracket_passive_region():
    problem = M.preset_problem("lbracket", 20)
    leg = 8  # 40% of 20
    assert problem.active is not None
    assert not problem.active[:20 - leg, leg:].any()  # cut-out
    assert problem.active[:, :leg].all()
    assert problem.active[20 - leg:, :].all()
    # passive cells contribute no density and receive no gradient
    res = M.mech_objective(problem, np.full((40, 40), 0.6), 2)
    passive_full = np.kron(~problem.active, np.ones((2, 2), dtype=bool))
    assert np.all(res.pooled[~problem.active] == 0.0)
    assert np.all(res.grad_full[passive_full] == 0.0)


def test_preset_unknown_name():
    with pytest.raises(ValueError):
        M.preset_problem("cantilever", 64)


def test_presets_solve_at_uniform_density():
    for name in ("mbb", "bridge", "lbracket"):
        problem = M.preset_problem(name, 16)
        rho = np.full((16, 16), 0.5)
        if problem.active is not None:
            rho = rho * problem.active
        u = M.solve_equilibrium(problem, rho)
        sol = M.compliance_and_sensitivity(problem, rho, u)
        assert sol.compliance > 0


# ---------------------------------------------------------------- files

def test_rle_roundtrip():
    rng = np.random.default_rng(6)
    for shape in [(5, 7), (1, 1), (8, 8)]:
        mask = rng.uniform(size=shape) > 0.5
        assert np.array_equal(M.rle_decode(M.rle_encode(mask), shape), mask)
    with pytest.raises(ValueError):
        M.rle_decode({"first": 0, "runs": [3]}, (2, 2))


def test_problem_file_roundtrip(tmp_path):
    problem = M.preset_problem("lbracket", 16)
    path = tmp_path / "problem.json"
    M.save_problem(problem, path)
    back = M.load_problem(path)
    assert back.nelx == problem.nelx and back.nely == problem.nely
    assert np.array_equal(back.fixed_dofs, problem.fixed_dofs)
    assert np.allclose(back.loads, problem.loads)
    assert back.target_fraction == problem.target_fraction
    assert back.p_simp == problem.p_simp
    assert np.array_equal(back.active, problem.active)
