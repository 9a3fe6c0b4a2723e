"""Triangle meshes, OBJ I/O and cotangent operators."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Invalid mesh data or a malformed mesh file."""


@dataclass(frozen=True)
class Mesh:
    """Fixed-topology triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
        Vertex positions.
    faces : array_like, shape (T, 3)
        Zero-based vertex indices, counter-clockwise.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (T, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if vertices.shape[0] != self.n_vertices:
            raise MeshError(f"expected {self.n_vertices} vertices, got {vertices.shape[0]}")
        return Mesh(vertices, self.faces)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` pairs with ``i < j``."""
        return unique_edges(self.faces)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def same_topology(a: Mesh, b: Mesh) -> bool:
    return a.n_vertices == b.n_vertices and np.array_equal(a.faces, b.faces)


def check_topology(reference: Mesh, others) -> None:
    for k, m in enumerate(others):
        if not same_topology(reference, m):
            raise MeshError(f"mesh {k} does not share the reference topology")


# --------------------------------------------------------------------------
# OBJ

def load_obj(path) -> Mesh:
    """Read a triangle mesh from a Wavefront OBJ file.

    Only ``v`` and ``f`` records are used; texture/normal slots in face
    records (``f 1/2/3 ...``) are stripped. Vertex order is preserved.
    """
    path = os.fspath(path)
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise MeshError(f"{path}: malformed vertex at line {lineno}")
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}: cannot parse vertex at line {lineno}") from exc
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshError(f"{path}: non-triangle face at line {lineno}")
                try:
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}: cannot parse face at line {lineno}") from exc
                if 0 in idx:
                    raise MeshError(f"{path}: face index out of range at line {lineno}")
                # negative indices are relative to the vertices read so far
                tri = [k - 1 if k > 0 else len(verts) + k for k in idx]
                faces.append((lineno, tri))
    n = len(verts)
    fa = np.zeros((len(faces), 3), dtype=np.int64)
    for r, (lineno, tri) in enumerate(faces):
        if min(tri) < 0 or max(tri) >= n:
            raise MeshError(f"{path}: face index out of range at line {lineno}")
        if len(set(tri)) != 3:
            raise MeshError(f"{path}: degenerate face at line {lineno}")
        fa[r] = tri
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), fa)


def save_obj(mesh: Mesh, path) -> None:
    """Write ``mesh`` as OBJ with six decimals per coordinate."""
    lines = ["v %.6f %.6f %.6f\n" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d\n" % tuple(t + 1) for t in mesh.faces]
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# vertex subset maps

def load_vertex_map(path, n_high: int | None = None) -> np.ndarray:
    """Low-to-high vertex correspondence, one integer per line."""
    idx = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s:
                continue
            try:
                idx.append(int(s))
            except ValueError as exc:
                raise MeshError(f"{path}: bad index at line {lineno}") from exc
    out = np.array(idx, dtype=np.int64)
    validate_vertex_map(out, n_high)
    return out


def save_vertex_map(low_to_high, path) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(i)}\n" for i in low_to_high)


def validate_vertex_map(low_to_high: np.ndarray, n_high: int | None = None) -> None:
    m = np.asarray(low_to_high)
    if m.ndim != 1:
        raise MeshError("vertex map must be one-dimensional")
    if m.size and m.min() < 0:
        raise MeshError("negative index in vertex map")
    if n_high is not None and m.size and m.max() >= n_high:
        raise MeshError(f"vertex map index {int(m.max())} out of range for {n_high} vertices")
    if len(np.unique(m)) != len(m):
        raise MeshError("vertex map indices must be distinct")


# --------------------------------------------------------------------------
# cotangent operators

@dataclass(frozen=True)
class CotanWeights:
    """Symmetric cotangent edge weights of a rest mesh.

    ``edges[e] = (i, j)`` with ``i < j`` and ``weights[e] = w_ij = w_ji``.
    ``indptr``/``indices`` give each vertex's one-ring in CSR layout.
    """

    edges: np.ndarray
    weights: np.ndarray
    n_vertices: int
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def clamped(self) -> "CotanWeights":
        return CotanWeights(self.edges, np.maximum(self.weights, 0.0), self.n_vertices,
                            self.indptr, self.indices)

    def laplacian(self) -> sparse.csr_matrix:
        """``L = D - W``; zero row sums, positive semidefinite for w >= 0."""
        return cotangent_laplacian(self)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def cotangent_weights(rest: Mesh) -> CotanWeights:
    """Cotangent weights ``w_ij = (cot a_ij + cot b_ij) / 2``.

    Boundary edges only receive the single available cotangent. Raises
    :class:`MeshError` on zero-area faces or edges shared by more than two
    faces. Negative weights are kept.
    """
    V, F = rest.vertices, rest.faces
    n = rest.n_vertices
    cross = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    dbl_area = np.linalg.norm(cross, axis=1)
    scale = max(rest.bbox_diagonal(), 1e-300)
    if np.any(dbl_area <= 1e-14 * scale * scale):
        bad = int(np.argmax(dbl_area <= 1e-14 * scale * scale))
        raise MeshError(f"zero-area face {bad}")

    rows, cols, vals = [], [], []
    for k in range(3):
        # angle at corner k is opposite the edge (k+1, k+2)
        a, b, c = F[:, k], F[:, (k + 1) % 3], F[:, (k + 2) % 3]
        u = V[b] - V[a]
        v = V[c] - V[a]
        cot = np.einsum("ij,ij->i", u, v) / dbl_area
        rows.append(np.minimum(b, c))
        cols.append(np.maximum(b, c))
        vals.append(0.5 * cot)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    key = rows * n + cols
    uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge shared by more than two faces")
    weights = np.bincount(inv, vals, minlength=len(uniq))
    edges = np.stack([uniq // n, uniq % n], axis=1).astype(np.int64)

    adj = sparse.coo_matrix((np.ones(2 * len(edges)),
                             (np.concatenate([edges[:, 0], edges[:, 1]]),
                              np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n)).tocsr()
    adj.sort_indices()
    return CotanWeights(edges, weights, n, adj.indptr.astype(np.int64), adj.indices.astype(np.int64))


def cotangent_laplacian(cw: CotanWeights) -> sparse.csr_matrix:
    n = cw.n_vertices
    i, j = cw.edges[:, 0], cw.edges[:, 1]
    w = cw.weights
    W = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(n, n)).tocsr()
    d = np.asarray(W.sum(axis=1)).ravel()
    return (sparse.diags(d) - W).tocsr()


def barycentric_areas(mesh: Mesh) -> np.ndarray:
    """One third of the incident face areas per vertex."""
    A = face_areas(mesh.vertices, mesh.faces)
    return np.bincount(mesh.faces.ravel(), np.repeat(A / 3.0, 3), minlength=mesh.n_vertices)


def laplace_beltrami(mesh: Mesh) -> np.ndarray:
    """Area-normalised cotangent Laplacian applied to the vertex positions.

    Returns the mean-curvature normal ``Delta x_i``, whose length is twice the
    mean curvature at interior vertices.
    """
    L = cotangent_laplacian(cotangent_weights(mesh))
    areas = barycentric_areas(mesh)
    if np.any(areas <= 0.0):
        raise MeshError("zero vertex area")
    return -(L @ mesh.vertices) / areas[:, None]


def mean_curvature_smoothness(mesh: Mesh, rest: Mesh | None = None) -> float:
    """Sum over vertices of ``||Delta x_i|| / 2``.

    Weights and areas come from ``mesh`` itself. ``rest`` only serves as a
    topology check.
    """
    if rest is not None and not same_topology(mesh, rest):
        raise MeshError("mesh and rest do not share topology")
    hn = laplace_beltrami(mesh)
    return float(np.sum(np.linalg.norm(hn, axis=1)) / 2.0)
