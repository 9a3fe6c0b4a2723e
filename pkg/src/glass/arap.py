"""As-rigid-as-possible deformation energy.

Energy of a deformation ``W`` of the rest pose ``V``::

    E(W) = 1/N * sum_i sum_{j in N(i)} w_ij ||(W_i - W_j) - R_i (V_i - V_j)||^2

with per-vertex best-fit rotations ``R_i`` and cotangent weights clamped at
zero. Dividing by ``N`` keeps thresholds independent of the mesh size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import kernels
from .mesh import Mesh, MeshError, cotangent_laplacian, cotangent_weights, validate_vertex_map

logger = logging.getLogger(__name__)


class ArapError(RuntimeError):
    pass


class ArapContext:
    """Rest pose, clamped cotangent weights and cached factorisations.

    The context never stores per-call rotations; factorisations of the
    global-step system are memoised per constraint set.
    """

    def __init__(self, rest: Mesh, weights=None):
        self.rest = rest
        cw = cotangent_weights(rest) if weights is None else weights
        self.weights = cw.clamped()
        self.ei = np.ascontiguousarray(self.weights.edges[:, 0])
        self.ej = np.ascontiguousarray(self.weights.edges[:, 1])
        self.w = np.ascontiguousarray(self.weights.weights)
        self.n = rest.n_vertices
        self.rest_vertices = rest.vertices
        self.laplacian = cotangent_laplacian(self.weights).tocsc()
        self._solvers = {}

    @classmethod
    def from_vertices(cls, template: Mesh, vertices) -> "ArapContext":
        return cls(template.with_vertices(vertices))

    def _solver(self, fixed: np.ndarray):
        key = fixed.tobytes()
        if key not in self._solvers:
            free = np.setdiff1d(np.arange(self.n), fixed)
            L = self.laplacian
            Lff = L[free][:, free].tocsc()
            Lfc = L[free][:, fixed].tocsr()
            try:
                lu = splu(Lff)
            except RuntimeError as exc:
                raise ArapError("singular ARAP global system") from exc
            self._solvers[key] = (free, lu, Lfc)
        return self._solvers[key]


@dataclass
class EnergyReport:
    energy: float
    per_vertex: np.ndarray


@dataclass
class ProjectionResult:
    vertices: np.ndarray
    energy: float
    initial_energy: float
    iterations: int
    status: str
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _as_positions(ctx: ArapContext, deformed) -> np.ndarray:
    W = np.ascontiguousarray(np.asarray(deformed, dtype=np.float64).reshape(-1, 3))
    if W.shape[0] != ctx.n:
        raise MeshError(f"expected {ctx.n} vertices, got {W.shape[0]}")
    return W


def fit_rotations(ctx: ArapContext, deformed) -> np.ndarray:
    """Best-fit rotation per vertex, shape (N, 3, 3), via SVD of the
    weighted edge covariance. Reflections are fixed by flipping the
    singular vector of the smallest singular value."""
    W = _as_positions(ctx, deformed)
    S = kernels.covariances(ctx.rest_vertices, W, ctx.ei, ctx.ej, ctx.w)
    return kernels.rotations_from_covariances(S)


def arap_energy(ctx: ArapContext, deformed, rotations=None) -> EnergyReport:
    W = _as_positions(ctx, deformed)
    R = fit_rotations(ctx, W) if rotations is None else rotations
    pv = kernels.vertex_energies(ctx.rest_vertices, W, R, ctx.ei, ctx.ej, ctx.w) / ctx.n
    return EnergyReport(float(pv.sum()), pv)


def energy(ctx: ArapContext, deformed, rotations=None) -> float:
    return arap_energy(ctx, deformed, rotations).energy


def arap_gradient(ctx: ArapContext, deformed, rotations=None) -> np.ndarray:
    """Gradient with rotations held at their fit; exact for the energy with
    rotations minimised out wherever the fit is unique."""
    W = _as_positions(ctx, deformed)
    R = fit_rotations(ctx, W) if rotations is None else rotations
    g = kernels.rotation_fixed_gradient(ctx.rest_vertices, W, R, ctx.ei, ctx.ej, ctx.w)
    return (2.0 / ctx.n) * g


def arap_hessian_vertices(ctx: ArapContext, deformed=None) -> sparse.csr_matrix:
    """Rotation-fixed (Gauss-Newton) Hessian, ``4/N * kron(L, I3)``.

    Rows/columns are ordered ``3*i + c``. Symmetric positive semidefinite,
    with the three translations in its kernel.
    """
    return (4.0 / ctx.n) * sparse.kron(ctx.laplacian, sparse.eye(3), format="csr")


def _normalize_constraints(ctx, constraints):
    if constraints is None:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    if isinstance(constraints, tuple) and len(constraints) == 2 and np.ndim(constraints[0]) == 1 \
            and np.ndim(constraints[1]) == 2:
        idx, pos = constraints
    else:
        constraints = list(constraints)
        idx = [int(c[0]) for c in constraints]
        pos = [c[1] for c in constraints]
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    if len(idx) != len(pos):
        raise ValueError("constraint indices and positions differ in length")
    if len(idx) and (idx.min() < 0 or idx.max() >= ctx.n):
        raise ValueError("constraint index out of range")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("duplicate constraint index")
    order = np.argsort(idx)
    return idx[order], pos[order]


def project_arap(ctx: ArapContext, start, threshold: float = 1e-5, max_iters: int = 500,
                 constraints=None, method: str = "local-global", rel_tol: float = 0.0) -> ProjectionResult:
    """Lower the ARAP energy of ``start`` until it drops to ``threshold``.

    Parameters
    ----------
    constraints : sequence of (index, position), or (indices, positions)
        Hard vertex constraints; those vertices are placed on their targets
        before the first iteration and never move.
    method : {"local-global", "gradient"}
        Alternating rotation fit / sparse solve, or gradient descent with
        Armijo backtracking.
    rel_tol : float
        Stop as ``"stalled"`` once an iteration lowers the energy by less than
        this fraction.

    Energies never increase between iterations; an iteration that would
    increase it is discarded and the run stops.
    """
    if method not in ("local-global", "gradient"):
        raise ValueError(f"unknown projection method {method!r}")
    W = _as_positions(ctx, start).copy()
    cidx, cpos = _normalize_constraints(ctx, constraints)
    if len(cidx):
        W[cidx] = cpos
    e0 = energy(ctx, W)
    history = [e0]
    if e0 <= threshold:
        return ProjectionResult(W, e0, e0, 0, "converged", history)
    if len(cidx) == ctx.n:
        return ProjectionResult(W, e0, e0, 0, "stalled", history)
    if method == "local-global":
        step = _local_global_step(ctx, W, cidx, cpos)
    else:
        step = _gradient_step(ctx, cidx)

    e = e0
    status = "max_iters"
    it = 0
    while it < max_iters:
        W_new, e_new = step(W, e)
        it += 1
        if W_new is W or not np.isfinite(e_new) or e_new > e:
            status = "stalled"
            break
        decrease = e - e_new
        W, e = W_new, e_new
        history.append(e)
        if e <= threshold:
            status = "converged"
            break
        if rel_tol > 0 and decrease <= rel_tol * max(history[-2], 1e-300):
            status = "stalled"
            break
    return ProjectionResult(W, e, e0, it, status, history)


def _local_global_step(ctx, W0, cidx, cpos):
    if len(cidx):
        fixed = cidx
    else:
        fixed = np.array([0], dtype=np.int64)
    free, lu, Lfc = ctx._solver(fixed)
    centroid = W0.mean(axis=0)

    def step(W, e):
        R = fit_rotations(ctx, W)
        b = kernels.global_rhs(ctx.rest_vertices, R, ctx.ei, ctx.ej, ctx.w)
        out = W.copy()
        rhs = b[free] - Lfc @ W[fixed]
        out[free] = lu.solve(rhs)
        if not len(cidx):
            out += centroid - out.mean(axis=0)
        return out, energy(ctx, out)

    return step


def _gradient_step(ctx, cidx, c1: float = 1e-4):
    state = {"t": 1.0}
    mask = np.ones(ctx.n, dtype=bool)
    mask[cidx] = False

    def step(W, e):
        g = arap_gradient(ctx, W)
        g[~mask] = 0.0
        gg = float(np.sum(g * g))
        if gg == 0.0:
            return W, e
        t = state["t"] * 2.0
        for _ in range(60):
            cand = W - t * g
            ec = energy(ctx, cand)
            if ec <= e - c1 * t * gg:
                state["t"] = t
                return cand, ec
            t *= 0.5
        return W, e

    return step


def kabsch(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimising ``||R src + t - dst||``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def highres_project(low_deformed: Mesh, low_to_high, high_rest: Mesh, max_iters: int = 200,
                    threshold: float = 0.0, rel_tol: float = 1e-9,
                    ctx: ArapContext | None = None) -> Mesh:
    """Lift a deformed decimated mesh onto its high-resolution rest mesh.

    Mapped vertices land exactly on the low-res positions; the others solve
    constrained ARAP starting from the best rigid alignment of the rest.
    """
    m = np.asarray(low_to_high, dtype=np.int64)
    validate_vertex_map(m, high_rest.n_vertices)
    if len(m) != low_deformed.n_vertices:
        raise MeshError(f"vertex map has {len(m)} entries for {low_deformed.n_vertices} vertices")
    ctx = ArapContext(high_rest) if ctx is None else ctx
    target = low_deformed.vertices
    R, t = kabsch(high_rest.vertices[m], target)
    start = high_rest.vertices @ R.T + t
    res = project_arap(ctx, start, threshold=threshold, max_iters=max_iters,
                       constraints=(m, target), rel_tol=rel_tol)
    logger.debug("highres projection: %s after %d iterations (E=%.3g)", res.status, res.iterations, res.energy)
    out = res.vertices
    out[m] = target
    return high_rest.with_vertices(out)
