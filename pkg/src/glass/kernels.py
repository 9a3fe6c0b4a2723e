"""Per-edge / per-vertex ARAP kernels.

Each kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. ``GLASS_NO_NUMBA=1`` selects the numpy path.
Edges are undirected index pairs ``(ei[e], ej[e])`` with weight ``w[e]``;
every edge contributes to the one-rings of both endpoints.
"""
import numpy as np

from ._accel import USE_NUMBA, optional_njit


# --------------------------------------------------------------------------
# numba loop kernels

@optional_njit(cache=True, nogil=True)
def _covariances_loop(rest, deformed, ei, ej, w):
    n = rest.shape[0]
    S = np.zeros((n, 3, 3))
    for e in range(ei.shape[0]):
        i = ei[e]
        j = ej[e]
        we = w[e]
        for a in range(3):
            ra = we * (rest[i, a] - rest[j, a])
            for b in range(3):
                v = ra * (deformed[i, b] - deformed[j, b])
                S[i, a, b] += v
                S[j, a, b] += v
    return S


@optional_njit(cache=True, nogil=True)
def _jacobi4(A, V):
    # cyclic Jacobi on a symmetric 4x4; A is overwritten with its eigenvalues
    # on the diagonal, V receives the eigenvectors as columns
    for a in range(4):
        for b in range(4):
            V[a, b] = 1.0 if a == b else 0.0
    for sweep in range(30):
        off = 0.0
        for p in range(3):
            for q in range(p + 1, 4):
                off += A[p, q] * A[p, q]
        if off < 1e-30:
            break
        for p in range(3):
            for q in range(p + 1, 4):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(4):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(4):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(4):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq


@optional_njit(cache=True, nogil=True)
def _rotations_loop(S):
    # Horn's quaternion method: the rotation maximising tr(R S) is given by
    # the dominant eigenvector of a symmetric 4x4 built from S. Always a
    # proper rotation, so no reflection fix-up is needed.
    n = S.shape[0]
    R = np.empty((n, 3, 3))
    N = np.empty((4, 4))
    V = np.empty((4, 4))
    for i in range(n):
        sxx = S[i, 0, 0]; sxy = S[i, 0, 1]; sxz = S[i, 0, 2]
        syx = S[i, 1, 0]; syy = S[i, 1, 1]; syz = S[i, 1, 2]
        szx = S[i, 2, 0]; szy = S[i, 2, 1]; szz = S[i, 2, 2]
        N[0, 0] = sxx + syy + szz
        N[0, 1] = syz - szy
        N[0, 2] = szx - sxz
        N[0, 3] = sxy - syx
        N[1, 1] = sxx - syy - szz
        N[1, 2] = sxy + syx
        N[1, 3] = szx + sxz
        N[2, 2] = -sxx + syy - szz
        N[2, 3] = syz + szy
        N[3, 3] = -sxx - syy + szz
        for a in range(4):
            for b in range(a):
                N[a, b] = N[b, a]
        _jacobi4(N, V)
        best = 0
        for a in range(1, 4):
            if N[a, a] > N[best, best]:
                best = a
        w = V[0, best]; x = V[1, best]; y = V[2, best]; z = V[3, best]
        nq = np.sqrt(w * w + x * x + y * y + z * z)
        w /= nq; x /= nq; y /= nq; z /= nq
        R[i, 0, 0] = w * w + x * x - y * y - z * z
        R[i, 0, 1] = 2.0 * (x * y - w * z)
        R[i, 0, 2] = 2.0 * (x * z + w * y)
        R[i, 1, 0] = 2.0 * (x * y + w * z)
        R[i, 1, 1] = w * w - x * x + y * y - z * z
        R[i, 1, 2] = 2.0 * (y * z - w * x)
        R[i, 2, 0] = 2.0 * (x * z - w * y)
        R[i, 2, 1] = 2.0 * (y * z + w * x)
        R[i, 2, 2] = w * w - x * x - y * y + z * z
    return R


@optional_njit(cache=True, nogil=True)
def _energy_loop(rest, deformed, R, ei, ej, w):
    n = rest.shape[0]
    out = np.zeros(n)
    for e in range(ei.shape[0]):
        i = ei[e]
        j = ej[e]
        we = w[e]
        si = 0.0
        sj = 0.0
        for a in range(3):
            d = deformed[i, a] - deformed[j, a]
            ri = 0.0
            rj = 0.0
            for b in range(3):
                r = rest[i, b] - rest[j, b]
                ri += R[i, a, b] * r
                rj += R[j, a, b] * r
            si += (d - ri) ** 2
            sj += (d - rj) ** 2
        out[i] += we * si
        out[j] += we * sj
    return out


@optional_njit(cache=True, nogil=True)
def _gradient_loop(rest, deformed, R, ei, ej, w):
    n = rest.shape[0]
    g = np.zeros((n, 3))
    for e in range(ei.shape[0]):
        i = ei[e]
        j = ej[e]
        we = w[e]
        for a in range(3):
            rr = 0.0
            for b in range(3):
                rr += (R[i, a, b] + R[j, a, b]) * (rest[i, b] - rest[j, b])
            v = we * (2.0 * (deformed[i, a] - deformed[j, a]) - rr)
            g[i, a] += v
            g[j, a] -= v
    return g


@optional_njit(cache=True, nogil=True)
def _rhs_loop(rest, R, ei, ej, w):
    n = rest.shape[0]
    b = np.zeros((n, 3))
    for e in range(ei.shape[0]):
        i = ei[e]
        j = ej[e]
        we = 0.5 * w[e]
        for a in range(3):
            rr = 0.0
            for c in range(3):
                rr += (R[i, a, c] + R[j, a, c]) * (rest[i, c] - rest[j, c])
            b[i, a] += we * rr
            b[j, a] -= we * rr
    return b

@optional_njit(cache=True, nogil=True, error_model="numpy")
def _adam_loop(p, g, m, v, lr, b1, b2, c1, c2, eps, gscale):
    # flat, in place; gscale folds in gradient clipping
    for k in range(p.shape[0]):
        gk = g[k] * gscale
        m[k] = b1 * m[k] + (1.0 - b1) * gk
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk
        p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)


# --------------------------------------------------------------------------
# numpy kernels

def _scatter_rows(n, idx, vals):
    out = np.zeros((n,) + vals.shape[1:])
    np.add.at(out, idx, vals)
    return out


def _covariances_np(rest, deformed, ei, ej, w):
    r = rest[ei] - rest[ej]
    d = deformed[ei] - deformed[ej]
    outer = w[:, None, None] * r[:, :, None] * d[:, None, :]
    n = rest.shape[0]
    return _scatter_rows(n, ei, outer) + _scatter_rows(n, ej, outer)


def _rotations_np(S):
    U, _, Vt = np.linalg.svd(S)
    R = np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)
    neg = np.linalg.det(R) < 0.0
    if np.any(neg):
        U = U.copy()
        U[neg, :, 2] *= -1.0
        R[neg] = np.swapaxes(Vt[neg], 1, 2) @ np.swapaxes(U[neg], 1, 2)
    return R


def _energy_np(rest, deformed, R, ei, ej, w):
    r = rest[ei] - rest[ej]
    d = deformed[ei] - deformed[ej]
    ri = np.einsum("eab,eb->ea", R[ei], r)
    rj = np.einsum("eab,eb->ea", R[ej], r)
    n = rest.shape[0]
    ei_term = w * np.sum((d - ri) ** 2, axis=1)
    ej_term = w * np.sum((d - rj) ** 2, axis=1)
    return np.bincount(ei, ei_term, minlength=n) + np.bincount(ej, ej_term, minlength=n)


def _gradient_np(rest, deformed, R, ei, ej, w):
    r = rest[ei] - rest[ej]
    d = deformed[ei] - deformed[ej]
    rr = np.einsum("eab,eb->ea", R[ei] + R[ej], r)
    v = w[:, None] * (2.0 * d - rr)
    n = rest.shape[0]
    return _scatter_rows(n, ei, v) - _scatter_rows(n, ej, v)


def _rhs_np(rest, R, ei, ej, w):
    r = rest[ei] - rest[ej]
    rr = 0.5 * w[:, None] * np.einsum("eab,eb->ea", R[ei] + R[ej], r)
    n = rest.shape[0]
    return _scatter_rows(n, ei, rr) - _scatter_rows(n, ej, rr)


def _adam_np(p, g, m, v, lr, b1, b2, c1, c2, eps, gscale):
    gk = g * gscale
    m *= b1
    m += (1.0 - b1) * gk
    v *= b2
    gk *= gk
    v += (1.0 - b2) * gk
    denom = np.sqrt(v / c2)
    denom += eps
    step = m * (lr / c1)
    step /= denom
    p -= step


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    covariances = _covariances_loop
    rotations_from_covariances = _rotations_loop
    vertex_energies = _energy_loop
    rotation_fixed_gradient = _gradient_loop
    global_rhs = _rhs_loop
    adam_update = _adam_loop
else:
    covariances = _covariances_np
    rotations_from_covariances = _rotations_np
    vertex_energies = _energy_np
    rotation_fixed_gradient = _gradient_np
    global_rhs = _rhs_np
    adam_update = _adam_np

NUMPY_KERNELS = {
    "covariances": _covariances_np,
    "rotations": _rotations_np,
    "energy": _energy_np,
    "gradient": _gradient_np,
    "rhs": _rhs_np,
    "adam": _adam_np,
}
LOOP_KERNELS = {
    "covariances": _covariances_loop,
    "rotations": _rotations_loop,
    "energy": _energy_loop,
    "gradient": _gradient_loop,
    "rhs": _rhs_loop,
    "adam": _adam_loop,
}
