"""Synthetic meshes and deformation sets used by tests, benchmarks and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh


def icosphere(level: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected onto a sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return Mesh(radius * np.array(verts), np.array(faces))


def grid(nx: int = 10, ny: int = 10, size: float = 1.0) -> Mesh:
    """Flat triangulated square in the z = 0 plane."""
    xs, ys = np.meshgrid(np.linspace(0, size, nx), np.linspace(0, size, ny))
    V = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    F = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            F += [(a, a + 1, a + nx + 1), (a, a + nx + 1, a + nx)]
    return Mesh(V, np.array(F))


def tube(n_rings: int = 30, n_around: int = 10, length: float = 2.0, radius: float = 0.1,
         ring_step: int = 1, around_step: int = 1) -> tuple[Mesh, np.ndarray]:
    """Closed capped cylinder along +x.

    ``ring_step``/``around_step`` keep every k-th ring / angular sample of the
    full-resolution tube, so the coarse tube's vertices are an exact subset of
    the fine one. Returns the mesh and the indices of its vertices in the
    full-resolution layout.
    """
    rings = np.arange(0, n_rings, ring_step)
    if rings[-1] != n_rings - 1:
        rings = np.append(rings, n_rings - 1)
    arounds = np.arange(0, n_around, around_step)
    m = len(arounds)
    xs = np.linspace(0.0, length, n_rings)
    ang = 2 * np.pi * np.arange(n_around) / n_around
    V, full_idx = [], []
    for r in rings:
        for a in arounds:
            V.append((xs[r], radius * np.cos(ang[a]), radius * np.sin(ang[a])))
            full_idx.append(r * n_around + a)
    V.append((0.0, 0.0, 0.0))
    full_idx.append(n_rings * n_around)
    V.append((length, 0.0, 0.0))
    full_idx.append(n_rings * n_around + 1)
    c0, c1 = len(V) - 2, len(V) - 1
    F = []
    nr = len(rings)
    for r in range(nr - 1):
        for k in range(m):
            a = r * m + k
            b = r * m + (k + 1) % m
            c = (r + 1) * m + (k + 1) % m
            d = (r + 1) * m + k
            F += [(a, b, c), (a, c, d)]
    for k in range(m):
        F.append((c0, (k + 1) % m, k))
        last = (nr - 1) * m
        F.append((c1, last + k, last + (k + 1) % m))
    return Mesh(np.array(V), np.array(F)), np.array(full_idx, dtype=np.int64)


def _rodrigues(axis: np.ndarray, theta: np.ndarray) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    th = np.asarray(theta)[..., None, None]
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def bend(rest: Mesh, angle: float, direction: float = 0.0, joint: float | None = None,
         width: float = 0.6) -> Mesh:
    """Smoothly bend a bar lying along +x.

    Cross-sections rotate by ``angle * smoothstep`` across a joint region of
    the given width, about an axis perpendicular to x; ``direction`` spins the
    bending plane around x (0 bends within the xy-plane).
    """
    V = rest.vertices
    x = V[:, 0]
    x0, x1 = x.min(), x.max()
    if joint is None:
        joint = 0.5 * (x0 + x1)
    axis = np.array([0.0, -np.sin(direction), np.cos(direction)])

    def theta(t):
        s = np.clip((t - (joint - width / 2)) / width, 0.0, 1.0)
        return angle * s * s * (3 - 2 * s)

    ts = np.linspace(x0, x1, 4001)
    R = _rodrigues(axis, theta(ts))
    tangent = R[:, :, 0]
    seg = np.diff(ts)[:, None] * 0.5 * (tangent[1:] + tangent[:-1])
    centre = np.vstack([np.zeros(3), np.cumsum(seg, axis=0)]) + np.array([x0, 0.0, 0.0])
    cx = np.stack([np.interp(x, ts, centre[:, k]) for k in range(3)], axis=1)
    Rv = _rodrigues(axis, theta(x))
    local = V.copy()
    local[:, 0] = 0.0
    out = cx + np.einsum("nab,nb->na", Rv, local)
    out += V.mean(axis=0) - out.mean(axis=0)
    return rest.with_vertices(out)


@dataclass
class BarDataset:
    rest: Mesh
    landmarks: list
    holdout: list


def articulated_bar(n_rings: int = 30, n_around: int = 10) -> BarDataset:
    """Rest bar, three landmark bends and five held-out bends."""
    rest, _ = tube(n_rings, n_around)
    d = np.deg2rad
    landmarks = [bend(rest, d(70), 0.0), bend(rest, d(-70), 0.0), bend(rest, d(70), d(90))]
    holdout = [bend(rest, d(35), 0.0), bend(rest, d(-35), 0.0), bend(rest, d(35), d(90)),
               bend(rest, d(60), d(45)), bend(rest, d(85), 0.0)]
    return BarDataset(rest, landmarks, holdout)


@dataclass
class SequenceDataset:
    rest: Mesh
    frames: list
    key_indices: list

    @property
    def keyframes(self):
        return [self.frames[i] for i in self.key_indices]

    @property
    def excluded(self):
        keys = set(self.key_indices)
        return [f for i, f in enumerate(self.frames) if i not in keys]


def bending_sequence(n_frames: int = 30, n_keys: int = 5, n_rings: int = 30,
                     n_around: int = 10) -> SequenceDataset:
    """A bar sweeping from -80 to +80 degrees while its bend plane turns."""
    rest, _ = tube(n_rings, n_around)
    t = np.linspace(0.0, 1.0, n_frames)
    frames = [bend(rest, np.deg2rad(-80 + 160 * s), np.deg2rad(60) * s) for s in t]
    keys = [int(round(i)) for i in np.linspace(0, n_frames - 1, n_keys)]
    return SequenceDataset(rest, frames, keys)
