"""Dense variational autoencoder over mesh vertex arrays, in plain numpy.

Encoder ``3N -> hidden -> 2K`` (mean and raw variance), decoder
``K -> hidden -> 3N``; tanh on hidden layers, linear outputs. Inputs are
centred per mesh and divided by the rest pose's bounding-box diagonal;
decoded outputs are mapped back with the inverse transform around the rest
centroid.
"""
from __future__ import annotations

import base64
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .arap import arap_energy, arap_gradient, fit_rotations
from .mesh import Mesh

logger = logging.getLogger(__name__)

FORMAT_TAG = "glassvae-v1"
VAR_FLOOR = 1e-6
# softplus(x) = 1 at this value, so fresh variance heads start at unit variance
_SOFTPLUS_INV_ONE = float(np.log(np.e - 1.0))


class TrainingError(RuntimeError):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Dense:
    """Fully connected tanh stack with a linear last layer."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, sizes, rng):
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            ws.append(rng.standard_normal((fan_out, fan_in)) * std)
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def forward(self, x):
        """Batch forward pass; returns the output and the hidden activations."""
        hs = [x]
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W.T + b
            h = a if k == last else np.tanh(a)
            hs.append(h)
        return h, hs

    def backward(self, hs, grad_out):
        """Gradients wrt weights, biases and the input, given ``forward``'s cache."""
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            if k != len(self.weights) - 1:
                g = g * (1.0 - hs[k + 1] ** 2)
            gW[k] = g.T @ hs[k]
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k]
        return gW, gb, g

    def jacobian(self, x):
        """d output / d input at a single point, shape (out, in)."""
        _, hs = self.forward(x[None, :])
        J = self.weights[0]
        for k in range(1, len(self.weights)):
            J = self.weights[k] @ ((1.0 - hs[k][0] ** 2)[:, None] * J)
        return J

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return Dense([w.copy() for w in self.weights], [b.copy() for b in self.biases])


class VaeModel:
    """Encoder/decoder parameters plus normalisation constants and an RNG.

    Parameters
    ----------
    n_vertices, latent_dim : int
    encoder_hidden, decoder_hidden : sequence of int
    scale : float
        Length unit for inputs (rest bounding-box diagonal).
    center : array_like, shape (3,)
        Rest centroid that decoded shapes are placed around.
    seed : int
    faces : array_like, optional
        Template triangles, carried along so checkpoints can write meshes.
    """

    def __init__(self, n_vertices, latent_dim=8, encoder_hidden=(256, 128), decoder_hidden=(128, 256),
                 scale=1.0, center=(0.0, 0.0, 0.0), seed=0, faces=None, encoder=None, decoder=None):
        self.n_vertices = int(n_vertices)
        self.latent_dim = int(latent_dim)
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.seed = int(seed)
        self.faces = None if faces is None else np.asarray(faces, dtype=np.int64)
        self.rng = np.random.default_rng(self.seed)
        self.train_steps = 0
        d = 3 * self.n_vertices
        if encoder is None:
            encoder = Dense.init([d, *encoder_hidden, 2 * self.latent_dim], self.rng)
            encoder.biases[-1][self.latent_dim:] = _SOFTPLUS_INV_ONE
        if decoder is None:
            decoder = Dense.init([self.latent_dim, *decoder_hidden, d], self.rng)
        self.encoder = encoder
        self.decoder = decoder
        logger.debug("VAE with %d parameters", self.n_params)

    @classmethod
    def for_mesh(cls, rest: Mesh, latent_dim=8, encoder_hidden=(256, 128), decoder_hidden=(128, 256), seed=0):
        return cls(rest.n_vertices, latent_dim, encoder_hidden, decoder_hidden,
                   scale=rest.bbox_diagonal(), center=rest.vertices.mean(axis=0), seed=seed,
                   faces=rest.faces)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def set_params(self, flat_list):
        k = 0
        for net in (self.encoder, self.decoder):
            for i in range(len(net.weights)):
                net.weights[i] = flat_list[k]
                net.biases[i] = flat_list[k + 1]
                k += 2

    def copy(self) -> "VaeModel":
        m = VaeModel.__new__(VaeModel)
        m.__dict__.update(self.__dict__)
        m.encoder = self.encoder.copy()
        m.decoder = self.decoder.copy()
        m.rng = np.random.default_rng()
        m.rng.bit_generator.state = self.rng.bit_generator.state
        return m

    # -- normalisation -------------------------------------------------
    def normalize(self, W) -> np.ndarray:
        """(b, N, 3) or (N, 3) positions -> (b, 3N) network inputs."""
        W = np.asarray(W, dtype=np.float64)
        W = W.reshape(-1, self.n_vertices, 3)
        W = (W - W.mean(axis=1, keepdims=True)) / self.scale
        return W.reshape(W.shape[0], -1)

    def denormalize(self, y) -> np.ndarray:
        y = np.asarray(y).reshape(-1, self.n_vertices, 3)
        return y * self.scale + self.center

    # -- inference ------------------------------------------------------
    def _check_input(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.size % (3 * self.n_vertices) != 0:
            raise ValueError(f"expected arrays of {self.n_vertices} vertices, got shape {w.shape}")
        return w

    def encode_batch(self, W):
        out, _ = self.encoder.forward(self.normalize(self._check_input(W)))
        K = self.latent_dim
        return out[:, :K], _softplus(out[:, K:]) + VAR_FLOOR

    def encode(self, w):
        """Mean and variance (both length K) of the latent posterior of ``w``."""
        mu, var = self.encode_batch(w)
        return mu[0], var[0]

    def sample_latent(self, mean, var, rng=None):
        """Reparameterised draw ``mean + sqrt(var) * eps`` with eps from the model RNG."""
        rng = self.rng if rng is None else rng
        mean = np.asarray(mean, dtype=np.float64)
        eps = rng.standard_normal(mean.shape)
        return mean + np.sqrt(np.asarray(var)) * eps

    def decode_batch(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"latent codes must have length {self.latent_dim}")
        y, _ = self.decoder.forward(Z)
        return self.denormalize(y)

    def decode(self, z) -> np.ndarray:
        """Vertex positions (N, 3) for latent code ``z``."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent code must have shape ({self.latent_dim},), got {z.shape}")
        return self.decode_batch(z[None])[0]

    def decoder_jacobian(self, z) -> np.ndarray:
        """Exact Jacobian of ``decode`` at ``z``, shape (3N, K), rows ordered ``3*i + c``."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent code must have shape ({self.latent_dim},), got {z.shape}")
        return self.scale * self.decoder.jacobian(z)


# --------------------------------------------------------------------------
# losses

@dataclass
class LossBreakdown:
    reconstruction: float
    gaussian: float
    deformation: float
    sigma: float
    total: float

    def as_dict(self):
        return {"reconstruction": self.reconstruction, "gaussian": self.gaussian,
                "deformation": self.deformation, "sigma": self.sigma, "total": self.total}


def _ctx_for(contexts, i):
    if contexts is None:
        return None
    if isinstance(contexts, (list, tuple)):
        return contexts[i]
    return contexts


GAUSSIAN_FORMS = ("per-sample", "batch")


def loss_and_grad(model: VaeModel, batch, contexts=None, sigma: float = 0.0, eps=None,
                  need_grad: bool = True, gaussian: str = "per-sample"):
    """Loss ``L_rec + L_gauss + sigma * L_def`` on a mini-batch and its gradient.

    Parameters
    ----------
    batch : array_like, shape (b, N, 3)
        Training deformations; ``b >= 2``.
    contexts : ArapContext or list of ArapContext
        Base shape(s) for the deformation term, one per batch item or shared.
    eps : array_like, shape (b, K), optional
        Reparameterisation noise; drawn from ``model.rng`` when omitted.
    gaussian : {"per-sample", "batch"}
        ``"per-sample"`` penalises each predicted mean and variance,
        ``(1/b) sum_i ||mu_i||^2 + ||var_i - 1||^2``. ``"batch"`` matches the
        mini-batch moments of the sampled codes instead,
        ``||mean(z)||^2 + ||cov(z) - I||_F^2`` (unbiased covariance).

    Returns
    -------
    LossBreakdown, list of gradient arrays aligned with ``model.params()``
    """
    W = np.asarray(batch, dtype=np.float64).reshape(-1, model.n_vertices, 3)
    b = W.shape[0]
    if b < 2:
        raise ValueError("mini-batch needs at least two deformations")
    if gaussian not in GAUSSIAN_FORMS:
        raise ValueError(f"unknown gaussian form {gaussian!r}")
    K = model.latent_dim
    x = model.normalize(W)
    enc_out, enc_hs = model.encoder.forward(x)
    mu = enc_out[:, :K]
    raw = enc_out[:, K:]
    var = _softplus(raw) + VAR_FLOOR
    if eps is None:
        eps = model.rng.standard_normal((b, K))
    std = np.sqrt(var)
    z = mu + std * eps
    y, dec_hs = model.decoder.forward(z)

    diff = y - x
    l_rec = float(np.sum(diff * diff) / b)
    if gaussian == "batch":
        zbar = z.mean(axis=0)
        dev = z - zbar
        C = dev.T @ dev / (b - 1)
        G = 2.0 * (C - np.eye(K))
        l_gauss = float(zbar @ zbar + np.sum((C - np.eye(K)) ** 2))
    else:
        l_gauss = float((np.sum(mu * mu) + np.sum((var - 1.0) ** 2)) / b)

    dy = (2.0 / b) * diff
    l_def = 0.0
    if contexts is not None and (sigma != 0.0 or not need_grad):
        phys = model.denormalize(y)
        for i in range(b):
            ctx = _ctx_for(contexts, i)
            R = fit_rotations(ctx, phys[i])
            l_def += arap_energy(ctx, phys[i], R).energy
            if need_grad and sigma != 0.0:
                g = arap_gradient(ctx, phys[i], R)
                dy[i] += (sigma / b) * model.scale * g.reshape(-1)
        l_def /= b
    total = l_rec + l_gauss + sigma * l_def
    report = LossBreakdown(l_rec, l_gauss, l_def, float(sigma), total)
    if not need_grad:
        return report, None

    gWd, gbd, dz = model.decoder.backward(dec_hs, dy)
    if gaussian == "batch":
        # centring drops out: the deviations sum to zero
        dz = dz + (2.0 / b) * zbar + (2.0 / (b - 1)) * dev @ G
        dmu = dz
        dvar = dz * eps / (2.0 * std)
    else:
        dmu = dz + (2.0 / b) * mu
        dvar = dz * eps / (2.0 * std) + (2.0 / b) * (var - 1.0)
    draw = dvar * _sigmoid(raw)
    gWe, gbe, _ = model.encoder.backward(enc_hs, np.concatenate([dmu, draw], axis=1))
    grads = []
    for gw, gb_ in zip(gWe, gbe):
        grads += [gw, gb_]
    for gw, gb_ in zip(gWd, gbd):
        grads += [gw, gb_]
    return report, grads


def loss(model: VaeModel, batch, contexts=None, sigma: float = 0.0, eps=None,
         gaussian: str = "per-sample") -> LossBreakdown:
    return loss_and_grad(model, batch, contexts, sigma, eps, need_grad=False, gaussian=gaussian)[0]


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place and return them."""
        norm = np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
        if not np.isfinite(norm):
            raise TrainingError("non-finite gradient")
        gscale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if not p.flags.c_contiguous:
                raise TrainingError("parameters must be C-contiguous for in-place updates")
            kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
                                v.reshape(-1), self.lr, self.b1, self.b2, c1, c2, self.eps, gscale)
        return params

    def state_dict(self):
        return {"lr": self.lr, "betas": [self.b1, self.b2], "eps": self.eps, "clip_norm": self.clip_norm,
                "t": self.t, "m": [_pack(a) for a in self.m], "v": [_pack(a) for a in self.v]}

    @classmethod
    def from_state(cls, state):
        opt = cls.__new__(cls)
        opt.lr = state["lr"]
        opt.b1, opt.b2 = state["betas"]
        opt.eps = state["eps"]
        opt.clip_norm = state["clip_norm"]
        opt.t = state["t"]
        opt.m = [_unpack(a) for a in state["m"]]
        opt.v = [_unpack(a) for a in state["v"]]
        return opt


def train_step(model: VaeModel, batch, optimizer: Adam, sigma: float = 0.0, contexts=None,
               gaussian: str = "per-sample"):
    """One Adam update on ``batch``; mutates ``model`` and returns it with the losses."""
    report, grads = loss_and_grad(model, batch, contexts, sigma, gaussian=gaussian)
    if not np.isfinite(report.total):
        raise TrainingError(f"non-finite loss {report.total}")
    model.set_params(optimizer.step(model.params(), grads))
    return model, report


# --------------------------------------------------------------------------
# checkpoints

def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def model_to_dict(model: VaeModel) -> dict:
    return {
        "format": FORMAT_TAG,
        "n_vertices": model.n_vertices,
        "latent_dim": model.latent_dim,
        "activation": "tanh",
        "encoder_sizes": model.encoder.sizes,
        "decoder_sizes": model.decoder.sizes,
        "scale": model.scale,
        "center": model.center.tolist(),
        "seed": model.seed,
        "rng_state": model.rng.bit_generator.state,
        "faces": None if model.faces is None else model.faces.tolist(),
        "encoder": [_pack(p) for p in model.encoder.params()],
        "decoder": [_pack(p) for p in model.decoder.params()],
    }


def model_from_dict(d: dict) -> VaeModel:
    if d.get("format") != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} checkpoint (format={d.get('format')!r})")
    enc = [_unpack(p) for p in d["encoder"]]
    dec = [_unpack(p) for p in d["decoder"]]
    model = VaeModel(d["n_vertices"], d["latent_dim"], scale=d["scale"], center=d["center"], seed=d["seed"],
                     faces=d.get("faces"), encoder=Dense(enc[0::2], enc[1::2]), decoder=Dense(dec[0::2], dec[1::2]))
    model.rng.bit_generator.state = d["rng_state"]
    return model


def save_model(model: VaeModel, path, extra: dict | None = None) -> None:
    d = model_to_dict(model)
    if extra:
        d["extra"] = extra
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(d, fh)
    os.replace(tmp, path)


def load_model(path, with_extra: bool = False):
    with open(path) as fh:
        d = json.load(fh)
    model = model_from_dict(d)
    if with_extra:
        return model, d.get("extra", {})
    return model
