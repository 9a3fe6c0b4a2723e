"""Energy-guided latent exploration.

From a training shape's latent code, step along the eigenvectors of the
latent ARAP Hessian with the smallest eigenvalues, keep the candidate that
best trades similarity to the source against novelty w.r.t. the registry,
and project it back to low ARAP energy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .arap import ArapContext, arap_energy, arap_hessian_vertices, project_arap
from .mesh import Mesh

logger = logging.getLogger(__name__)


@dataclass
class PerturbationParams:
    k: int = 5
    s: int = 16
    delta: float = 0.05
    alpha_cap: float = 2.0
    gamma: float = 0.5
    proj_threshold: float = 1e-5
    proj_max_iters: int = 500
    similarity: str = "displacement"  # or "latent"
    proj_method: str = "local-global"  # or "gradient"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.alpha_cap > 0:
            raise ValueError("alpha_cap must be positive")
        if self.similarity not in ("displacement", "latent"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.proj_method not in ("local-global", "gradient"):
            raise ValueError(f"unknown projection method {self.proj_method!r}")


@dataclass
class LatentSpectrum:
    eigenvalues: np.ndarray  # ascending, length k
    eigenvectors: np.ndarray  # (K, k), unit columns
    source: np.ndarray | None = None


@dataclass
class Candidate:
    latent: np.ndarray
    deformed: np.ndarray
    energy: float
    alpha: float
    mmr_score: float = float("nan")


def latent_hessian(model, ctx: ArapContext, l) -> np.ndarray:
    """``J^T H J``: vertex-space Gauss-Newton ARAP Hessian pulled back
    through the decoder Jacobian at ``l``. Symmetrised, shape (K, K)."""
    J = model.decoder_jacobian(l)
    H = arap_hessian_vertices(ctx)
    Hbar = J.T @ (H @ J)
    return 0.5 * (Hbar + Hbar.T)


def spectrum(hbar, k: int, source=None) -> LatentSpectrum:
    """The ``k`` smallest eigenpairs of a symmetric matrix, ascending."""
    hbar = np.asarray(hbar, dtype=np.float64)
    if hbar.ndim != 2 or hbar.shape[0] != hbar.shape[1]:
        raise ValueError("expected a square matrix")
    if not 1 <= k <= hbar.shape[0]:
        raise ValueError(f"k={k} outside [1, {hbar.shape[0]}]")
    sym = 0.5 * (hbar + hbar.T)
    lam, U = eigh(sym, subset_by_index=[0, k - 1])
    return LatentSpectrum(lam, U, None if source is None else np.asarray(source, dtype=np.float64))


def step_size(spec: LatentSpectrum, beta_hat, delta: float, alpha_cap: float = 2.0) -> float:
    """Largest step whose second-order energy increase stays below ``delta``,
    capped at ``alpha_cap``. ``beta_hat`` must have unit norm."""
    lam = np.maximum(np.asarray(spec.eigenvalues, dtype=np.float64), 0.0)
    bh = np.asarray(beta_hat, dtype=np.float64)
    curv = float(np.sum(bh * bh * lam))
    if curv <= 1e-12:
        return float(alpha_cap)
    return float(min(alpha_cap, np.sqrt(2.0 * delta / curv)))


def draw_directions(rng, k: int, s: int) -> np.ndarray:
    """``s`` unit-norm coefficient vectors in R^k."""
    beta = rng.standard_normal((s, k))
    norms = np.linalg.norm(beta, axis=1, keepdims=True)
    return beta / norms


def perturb(model, base_ctx: ArapContext, l, spec: LatentSpectrum, params: PerturbationParams, rng,
            betas=None) -> list:
    """``s`` candidates ``decode(l + alpha * U beta_hat)``; energies are taken
    w.r.t. the context's rest (normally ``decode(l)``)."""
    l = np.asarray(l, dtype=np.float64)
    k = spec.eigenvectors.shape[1]
    if betas is None:
        betas = draw_directions(rng, k, params.s)
    alphas = np.array([step_size(spec, bh, params.delta, params.alpha_cap) for bh in betas])
    codes = l + alphas[:, None] * (betas @ spec.eigenvectors.T)
    # one code at a time so each candidate is bit-identical to decode(latent)
    decoded = [model.decode(c) for c in codes]
    return [Candidate(codes[j], decoded[j], arap_energy(base_ctx, decoded[j]).energy, float(alphas[j]))
            for j in range(len(codes))]


def _cosine_matrix(A, B):
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    dots = A @ B.T
    denom = np.outer(na, nb)
    out = np.zeros_like(dots)
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return out


def displacement_features(shapes, rest_vertices) -> np.ndarray:
    """Flattened vertex displacements from the rest pose, mean-centred per shape."""
    S = np.asarray(shapes, dtype=np.float64).reshape(-1, rest_vertices.shape[0], 3)
    D = S - rest_vertices
    D = D - D.mean(axis=1, keepdims=True)
    return D.reshape(D.shape[0], -1)


def mmr_scores(source_feat, cand_feats, registry_feats, gamma: float) -> np.ndarray:
    """``gamma * M(c, source) - (1 - gamma) * max_r M(c, r)`` per candidate."""
    rel = _cosine_matrix(cand_feats, source_feat[None, :])[:, 0]
    red = _cosine_matrix(cand_feats, registry_feats).max(axis=1)
    return gamma * rel - (1.0 - gamma) * red


def mmr_select(w, candidates, registry, gamma: float, rest_vertices=None, features=None):
    """Pick the candidate maximising the MMR score; ties go to the lowest index.

    By default similarity is the cosine between displacement features (shape
    minus ``rest_vertices``). Pass ``features=(source, candidates, registry)``
    to score precomputed feature vectors instead (e.g. latent codes).
    Returns ``(index, candidate)``; the candidate's ``mmr_score`` is set.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to select from")
    if features is None:
        reg = [r.vertices if isinstance(r, Mesh) else r for r in registry]
        if len(reg) == 0:
            raise ValueError("empty registry")
        if rest_vertices is None:
            raise ValueError("rest_vertices required for displacement similarity")
        src = displacement_features([np.asarray(w)], rest_vertices)[0]
        cf = displacement_features([c.deformed for c in candidates], rest_vertices)
        rf = displacement_features(reg, rest_vertices)
    else:
        src, cf, rf = (np.asarray(f, dtype=np.float64) for f in features)
        cf = cf.reshape(len(candidates), -1)
        rf = rf.reshape(rf.shape[0], -1)
    scores = mmr_scores(src, cf, rf, gamma)
    best = int(np.argmax(scores))
    for c, sc in zip(candidates, scores):
        c.mmr_score = float(sc)
    return best, candidates[best]


@dataclass
class AugmentReport:
    alpha: float
    eigenvalues: list
    energy_candidate: float
    energy_pre: float
    energy_post: float
    iterations: int
    converged: bool
    status: str
    mmr_score: float
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"alpha": self.alpha, "eigenvalues": list(map(float, self.eigenvalues)),
                "energyCandidate": self.energy_candidate,
                "energyPrePost": [self.energy_pre, self.energy_post], "iterations": self.iterations,
                "converged": self.converged, "status": self.status, "mmrScore": self.mmr_score}


def latent_augment(model, template: Mesh, w, registry, params: PerturbationParams, rng,
                   rest_vertices=None, registry_latents=None, source_ctx: ArapContext | None = None):
    """Search the latent neighbourhood of ``w`` for one new low-energy shape.

    Parameters
    ----------
    template : Mesh
        Supplies the shared faces.
    w : array_like, shape (N, 3)
        Source deformation (a registry member).
    registry : sequence of (N, 3) arrays
        All shapes collected so far, for the novelty term.
    rest_vertices : array_like, optional
        Rest pose for displacement similarity; defaults to the template's.
    registry_latents : array_like, optional
        Encoded means of the registry, needed for ``similarity="latent"``.
    source_ctx : ArapContext, optional
        Context with ``w`` as rest pose; built when omitted.

    Returns
    -------
    projected : ndarray (N, 3)
    report : AugmentReport
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1, 3)
    rest_vertices = template.vertices if rest_vertices is None else rest_vertices
    l, _ = model.encode(w)
    anchor = model.decode(l)
    anchor_ctx = ArapContext(template.with_vertices(anchor))
    hbar = latent_hessian(model, anchor_ctx, l)
    spec = spectrum(hbar, params.k, source=l)
    cands = perturb(model, anchor_ctx, l, spec, params, rng)
    if params.similarity == "latent":
        if registry_latents is None:
            registry_latents = model.encode_batch(np.asarray(registry))[0]
        idx, best = mmr_select(w, cands, registry, params.gamma,
                               features=(l, np.array([c.latent for c in cands]), registry_latents))
    else:
        idx, best = mmr_select(w, cands, registry, params.gamma, rest_vertices=rest_vertices)
    ctx_w = source_ctx if source_ctx is not None else ArapContext(template.with_vertices(w))
    res = project_arap(ctx_w, best.deformed, threshold=params.proj_threshold,
                       max_iters=params.proj_max_iters, method=params.proj_method)
    report = AugmentReport(alpha=best.alpha, eigenvalues=spec.eigenvalues.tolist(), energy_candidate=best.energy,
                           energy_pre=res.initial_energy, energy_post=res.energy, iterations=res.iterations,
                           converged=res.converged, status=res.status, mmr_score=best.mmr_score,
                           extra={"candidate_index": idx})
    return res.vertices, report
