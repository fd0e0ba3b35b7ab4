"""SIMP finite-element compliance analysis on a pooled density mesh.

The full-resolution density channel is average-pooled onto a coarse mesh of
bilinear square plane-stress elements, a compliance solve runs there, and the
sensitivities are un-pooled back to full resolution. Physics uses y pointing
up; grid row 0 is the top of the domain.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_SOLVE_LIMIT = 32  # meshes up to this many elements per side skip the iterative solver
PCG_RTOL = 1e-8
PCG_MAXITER = 30000


class SingularSystemError(RuntimeError):
    """The constrained stiffness matrix still admits rigid-body motion."""


class SolverConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"equilibrium solve did not converge in {iterations} iterations "
            f"(relative residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def element_stiffness(young: float, poisson: float) -> np.ndarray:
    """Stiffness of a unit-edge bilinear square element, plane stress, unit thickness.

    Node order is counterclockwise from the bottom-left corner; DOFs alternate
    (x, y) per node. Closed form; the test suite checks it against independent
    Gauss-quadrature integration.
    """
    if young <= 0:
        raise ValueError(f"young modulus must be positive, got {young}")
    if not 0.0 <= poisson < 0.5:
        raise ValueError(f"poisson ratio must be in [0, 0.5), got {poisson}")
    nu = poisson
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return young / (1 - nu ** 2) * k[idx]


@dataclass
class FemProblem:
    """A compliance problem on an nelx x nely mesh of unit square elements.

    loads is a dense force vector over all 2*(nelx+1)*(nely+1) nodal DOFs;
    DOF 2n is the x (rightward) and 2n+1 the y (upward) component of node n,
    nodes numbered row-major from the top-left corner.
    """

    nelx: int
    nely: int
    fixed_dofs: np.ndarray
    loads: np.ndarray
    young: float = 1.0
    poisson: float = 0.3
    density_floor: float = 1e-3
    p_simp: float = 2.0
    target_fraction: float = 0.5
    volume_weight: float = 3e3
    active: np.ndarray | None = None  # (nely, nelx) bool, False = passive (void)
    name: str = "custom"
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.loads = np.asarray(self.loads, dtype=np.float64)
        if self.nelx < 1 or self.nely < 1:
            raise ValueError(f"mesh must be at least 1x1, got {self.nelx}x{self.nely}")
        if self.loads.shape != (self.ndof,):
            raise ValueError(f"loads must have {self.ndof} entries, got {self.loads.shape}")
        if not np.isfinite(self.loads).all():
            raise ValueError("loads must be finite")
        if self.fixed_dofs.size < 3:
            raise ValueError("need at least 3 independent fixed DOFs to pin rigid-body modes")
        if self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= self.ndof:
            raise ValueError("fixed DOF index out of range")
        if not 0.0 < self.target_fraction < 1.0:
            raise ValueError(f"target_fraction must lie in (0, 1), got {self.target_fraction}")
        if self.p_simp < 1.0:
            raise ValueError(f"p_simp must be >= 1, got {self.p_simp}")
        if self.active is not None:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (self.nely, self.nelx):
                raise ValueError("active mask shape must match the element mesh")

    @property
    def ndof(self) -> int:
        return 2 * (self.nelx + 1) * (self.nely + 1)

    def node(self, row: int, col: int) -> int:
        return row * (self.nelx + 1) + col

    def element_dofs(self) -> np.ndarray:
        """(nel, 8) DOF indices per element, bottom-left counterclockwise."""
        edof = self._cache.get("edof")
        if edof is None:
            jj, ii = np.meshgrid(np.arange(self.nelx), np.arange(self.nely))
            n_bl = (ii + 1) * (self.nelx + 1) + jj
            n_br = n_bl + 1
            n_tl = ii * (self.nelx + 1) + jj
            n_tr = n_tl + 1
            nodes = np.stack([n_bl, n_br, n_tr, n_tl], axis=-1).reshape(-1, 4)
            edof = np.empty((nodes.shape[0], 8), dtype=np.int64)
            edof[:, 0::2] = 2 * nodes
            edof[:, 1::2] = 2 * nodes + 1
            self._cache["edof"] = edof
        return edof

    def ke(self) -> np.ndarray:
        ke = self._cache.get("ke")
        if ke is None:
            ke = element_stiffness(self.young, self.poisson)
            self._cache["ke"] = ke
        return ke

    def free_dofs(self) -> np.ndarray:
        free = self._cache.get("free")
        if free is None:
            free = np.setdiff1d(np.arange(self.ndof), self.fixed_dofs)
            self._cache["free"] = free
        return free


@dataclass
class FemSolution:
    u: np.ndarray  # nodal displacements, full DOF vector
    compliance: float
    volume_fraction: float
    dc_drho: np.ndarray  # (nely, nelx) sensitivity w.r.t. pooled densities


def average_pool(rho: np.ndarray, k: int) -> np.ndarray:
    """Mean over non-overlapping k x k blocks."""
    rho = np.asarray(rho)
    h, w = rho.shape
    if k < 1:
        raise ValueError(f"pool factor must be >= 1, got {k}")
    if h % k or w % k:
        raise ValueError(f"field of {h}x{w} is not divisible by pool factor {k}")
    return rho.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def unpool_gradient(d_pooled: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of average_pool: spread each incoming gradient uniformly, 1/k^2 each."""
    return np.kron(np.asarray(d_pooled), np.full((k, k), 1.0 / (k * k)))


def _clamped(problem: FemProblem, rho_pooled: np.ndarray) -> np.ndarray:
    return np.clip(rho_pooled, problem.density_floor, 1.0)


def _assemble(problem: FemProblem, rho_clamped: np.ndarray) -> sp.csr_matrix:
    ke = problem.ke()
    edof = problem.element_dofs()
    scale = rho_clamped.reshape(-1) ** problem.p_simp
    data = (scale[:, None, None] * ke).ravel()
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    return sp.coo_matrix((data, (rows, cols)), shape=(problem.ndof, problem.ndof)).tocsr()


def solve_equilibrium(problem: FemProblem, rho_pooled: np.ndarray,
                      warm_start: np.ndarray | None = None) -> np.ndarray:
    """Displacements under the problem loads for the given pooled densities.

    Densities are clamped to [density_floor, 1] before assembly. Meshes up to
    DENSE_SOLVE_LIMIT per side use a dense direct solve; larger ones use
    Jacobi-preconditioned conjugate gradients to relative residual PCG_RTOL,
    optionally warm-started from a previous displacement field.
    """
    rho_pooled = np.asarray(rho_pooled, dtype=np.float64)
    if rho_pooled.shape != (problem.nely, problem.nelx):
        raise ValueError(
            f"pooled density shape {rho_pooled.shape} != mesh {problem.nely}x{problem.nelx}")
    k_full = _assemble(problem, _clamped(problem, rho_pooled))
    free = problem.free_dofs()
    k_free = k_full[free][:, free]
    f_free = problem.loads[free]
    u = np.zeros(problem.ndof)
    if not np.any(f_free):
        return u

    diag = k_free.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("constrained stiffness has a non-positive diagonal entry")

    f_norm = float(np.linalg.norm(f_free))
    if problem.nelx <= DENSE_SOLVE_LIMIT and problem.nely <= DENSE_SOLVE_LIMIT:
        try:
            u_free = np.linalg.solve(k_free.toarray(), f_free)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"direct solve failed: {exc}") from exc
        residual = float(np.linalg.norm(k_free @ u_free - f_free)) / f_norm
        if not np.isfinite(u_free).all() or residual > 1e-6:
            raise SingularSystemError(
                f"direct solve left relative residual {residual:.3e}; "
                "constraints likely admit rigid-body motion")
    else:
        x0 = warm_start[free] if warm_start is not None else None
        precond = spla.LinearOperator(k_free.shape, matvec=lambda v: v / diag)
        iters = 0

        def count(_):
            nonlocal iters
            iters += 1

        u_free, info = spla.cg(k_free, f_free, x0=x0, rtol=PCG_RTOL, atol=0.0,
                               maxiter=PCG_MAXITER, M=precond, callback=count)
        if info != 0:
            residual = float(np.linalg.norm(k_free @ u_free - f_free)) / f_norm
            raise SolverConvergenceError(iterations=iters, residual=residual)

    u[free] = u_free
    return u


def compliance_and_sensitivity(problem: FemProblem, rho_pooled: np.ndarray,
                               u: np.ndarray) -> FemSolution:
    """Compliance, volume fraction and per-element sensitivities at a solved state.

    C = sum_e rho_e^p u_e^T K_e u_e and dC/drho_e = -p rho_e^(p-1) u_e^T K_e u_e,
    valid for design-independent loads. The sensitivity is zero where the density
    floor or the unit cap clamps, since the clamp blocks the chain there.
    """
    rho_pooled = np.asarray(rho_pooled, dtype=np.float64)
    rho_c = _clamped(problem, rho_pooled)
    ue = u[problem.element_dofs()]
    strain_energy = np.einsum("ni,ij,nj->n", ue, problem.ke(), ue)
    scale = rho_c.reshape(-1) ** problem.p_simp
    compliance = float(np.sum(scale * strain_energy))
    active_chain = ((rho_pooled > problem.density_floor) & (rho_pooled < 1.0)).reshape(-1)
    dc = -problem.p_simp * rho_c.reshape(-1) ** (problem.p_simp - 1) * strain_energy
    dc *= active_chain
    volume = float(np.mean(rho_pooled))
    return FemSolution(u=u, compliance=compliance, volume_fraction=volume,
                       dc_drho=dc.reshape(problem.nely, problem.nelx))


def mech_loss(compliance: float, volume_fraction: float, target_fraction: float,
              volume_weight: float) -> float:
    """Compliance plus the quadratic volume penalty."""
    if not 0.0 <= volume_fraction <= 1.0:
        raise ValueError(f"volume fraction must lie in [0, 1], got {volume_fraction}")
    return compliance + volume_weight * (volume_fraction - target_fraction) ** 2


@dataclass
class MechResult:
    loss: float
    grad_full: np.ndarray  # d L_mech / d rho at full resolution
    fem: FemSolution
    pooled: np.ndarray


def mech_objective(problem: FemProblem, rho_full: np.ndarray, pool_factor: int,
                   warm_start: np.ndarray | None = None) -> MechResult:
    """Full mechanical term: mask, pool, solve, then push gradients back up.

    Passive elements are zeroed at full resolution before pooling, so their
    cells receive exactly zero gradient.
    """
    rho_full = np.asarray(rho_full, dtype=np.float64)
    h, w = rho_full.shape
    if h != problem.nely * pool_factor or w != problem.nelx * pool_factor:
        raise ValueError(
            f"full-resolution field {h}x{w} does not pool by {pool_factor} "
            f"onto the {problem.nely}x{problem.nelx} mesh")
    if problem.active is not None:
        mask_full = np.kron(problem.active, np.ones((pool_factor, pool_factor)))
        rho_full = rho_full * mask_full
    pooled = average_pool(rho_full, pool_factor)
    u = solve_equilibrium(problem, pooled, warm_start=warm_start)
    fem = compliance_and_sensitivity(problem, pooled, u)
    loss = mech_loss(fem.compliance, fem.volume_fraction, problem.target_fraction,
                     problem.volume_weight)
    n_el = problem.nelx * problem.nely
    d_volume = 2.0 * problem.volume_weight * (fem.volume_fraction - problem.target_fraction) / n_el
    d_pooled = fem.dc_drho + d_volume
    grad_full = unpool_gradient(d_pooled, pool_factor)
    if problem.active is not None:
        grad_full = grad_full * mask_full
    return MechResult(loss=loss, grad_full=grad_full, fem=fem, pooled=pooled)


# ------------------------------------------------------------------ presets

_AXIS_DOFS = {"x": (0,), "y": (1,), "both": (0, 1)}


def _dofs_for(problem_shape, entries):
    nelx, nely = problem_shape
    ndof_nodes = (nelx + 1) * (nely + 1)
    out = []
    for node, axis in entries:
        if not 0 <= node < ndof_nodes:
            raise ValueError(f"node index {node} out of range")
        for comp in _AXIS_DOFS[axis]:
            out.append(2 * node + comp)
    return out


def preset_problem(name: str, resolution: int) -> FemProblem:
    """Benchmark boundary conditions on a square pooled mesh.

    mbb: half-beam with symmetry on the left edge, a unit downward point load
    at the top-left node and a vertical roller at the bottom-right node.
    bridge: downward deck load spread across the top edge, pin at the
    bottom-left node and a vertical roller at the bottom-right node.
    lbracket: left limb plus bottom arm (40% widths), clamped along the top of
    the limb, unit downward load at the top-right corner of the arm tip; the
    cut-out is a passive region.
    """
    n = int(resolution)
    if n < 4:
        raise ValueError(f"preset resolution must be >= 4, got {resolution}")
    nelx = nely = n
    node = lambda r, c: r * (nelx + 1) + c
    loads = np.zeros(2 * (nelx + 1) * (nely + 1))

    if name == "mbb":
        fixed = [(node(r, 0), "x") for r in range(nely + 1)]
        fixed.append((node(nely, nelx), "y"))
        loads[2 * node(0, 0) + 1] = -1.0
        return FemProblem(nelx=nelx, nely=nely,
                          fixed_dofs=_dofs_for((nelx, nely), fixed), loads=loads,
                          target_fraction=0.28, name="mbb")

    if name == "bridge":
        fixed = [(node(nely, 0), "both"), (node(nely, nelx), "y")]
        # deck load of 5 weight units total (trapezoid rule), heavy enough for
        # the span's stiffness to dominate the objective at this scale
        per_node = 5.0 / nelx
        for c in range(nelx + 1):
            weight = 0.5 if c in (0, nelx) else 1.0
            loads[2 * node(0, c) + 1] = -per_node * weight
        return FemProblem(nelx=nelx, nely=nely,
                          fixed_dofs=_dofs_for((nelx, nely), fixed), loads=loads,
                          target_fraction=0.33, name="bridge")

    if name == "lbracket":
        leg = max(1, round(0.4 * n))
        active = np.zeros((nely, nelx), dtype=bool)
        active[:, :leg] = True  # vertical limb on the left
        active[nely - leg:, :] = True  # horizontal arm along the bottom
        fixed = [(node(0, c), "both") for c in range(leg + 1)]
        loads[2 * node(nely - leg, nelx) + 1] = -1.0
        return FemProblem(nelx=nelx, nely=nely,
                          fixed_dofs=_dofs_for((nelx, nely), fixed), loads=loads,
                          target_fraction=0.26, active=active, name="lbracket")

    raise ValueError(f"unknown preset {name!r}; expected one of: bridge, mbb, lbracket")


# ------------------------------------------------------------ problem files

def rle_encode(mask: np.ndarray) -> dict:
    """Run-length encode a boolean bitmap, row-major."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"first": 0, "runs": []}
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return {"first": int(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(encoded: dict, shape) -> np.ndarray:
    runs = encoded["runs"]
    values = (np.arange(len(runs)) + encoded["first"]) % 2
    flat = np.repeat(values.astype(bool), runs)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ValueError(f"run lengths sum to {flat.size}, expected {expected}")
    return flat.reshape(shape)


def save_problem(problem: FemProblem, path) -> None:
    """Write a problem-definition file (JSON)."""
    nz = np.flatnonzero(problem.loads)
    loads = [{"node": int(d // 2), "axis": "xy"[d % 2], "magnitude": float(problem.loads[d])}
             for d in nz]
    doc = {
        "mesh": {"nelx": problem.nelx, "nely": problem.nely},
        "material": {"young": problem.young, "poisson": problem.poisson,
                     "density_floor": problem.density_floor, "p_simp": problem.p_simp},
        "volume": {"target_fraction": problem.target_fraction,
                   "penalty_weight": problem.volume_weight},
        "fixed": [{"node": int(d // 2), "axis": "xy"[d % 2]} for d in problem.fixed_dofs],
        "loads": loads,
        "name": problem.name,
    }
    if problem.active is not None:
        doc["passive"] = rle_encode(~problem.active)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_problem(path) -> FemProblem:
    """Read a problem-definition file written by save_problem (or by hand)."""
    with open(path) as fh:
        doc = json.load(fh)
    nelx = int(doc["mesh"]["nelx"])
    nely = int(doc["mesh"]["nely"])
    ndof = 2 * (nelx + 1) * (nely + 1)
    axis_comp = {"x": 0, "y": 1}
    fixed = [2 * int(e["node"]) + axis_comp[e["axis"]] for e in doc["fixed"]]
    loads = np.zeros(ndof)
    for e in doc["loads"]:
        loads[2 * int(e["node"]) + axis_comp[e["axis"]]] += float(e["magnitude"])
    mat = doc.get("material", {})
    vol = doc.get("volume", {})
    active = None
    if "passive" in doc:
        active = ~rle_decode(doc["passive"], (nely, nelx))
    return FemProblem(
        nelx=nelx, nely=nely, fixed_dofs=fixed, loads=loads,
        young=float(mat.get("young", 1.0)), poisson=float(mat.get("poisson", 0.3)),
        density_floor=float(mat.get("density_floor", 1e-3)),
        p_simp=float(mat.get("p_simp", 2.0)),
        target_fraction=float(vol.get("target_fraction", 0.5)),
        volume_weight=float(vol.get("penalty_weight", 3e3)),
        active=active, name=str(doc.get("name", "custom")))
