"""Outer augmentation loop: train, explore, append, retrain."""
from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arap import ArapContext, arap_gradient, energy
from .config import RunConfig
from .explorer import latent_augment
from .mesh import Mesh, MeshError, check_topology, save_obj
from .vae import Adam, TrainingError, VaeModel, load_model, save_model, train_step

logger = logging.getLogger(__name__)

PROVENANCES = ("landmark", "generated", "baseline-interp")


class PipelineError(RuntimeError):
    pass


@dataclass
class Entry:
    id: int
    vertices: np.ndarray
    provenance: str
    parents: tuple = ()
    iteration: int = 0
    report: dict | None = None

    @property
    def converged(self) -> bool:
        return self.report is None or bool(self.report.get("converged", True))


@dataclass
class DeformationSet:
    """Rest mesh plus the growing list of deformations."""

    rest: Mesh
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def add(self, vertices, provenance: str, parents=(), iteration: int = 0, report=None) -> Entry:
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        v = np.array(vertices, dtype=np.float64).reshape(self.rest.n_vertices, 3)
        eid = (self.entries[-1].id + 1) if self.entries else 0
        e = Entry(eid, v, provenance, tuple(int(p) for p in parents), int(iteration), report)
        self.entries.append(e)
        return e

    def vertices(self, ids=None) -> np.ndarray:
        es = self.entries if ids is None else [self.by_id(i) for i in ids]
        return np.stack([e.vertices for e in es]) if es else np.zeros((0, self.rest.n_vertices, 3))

    def by_id(self, eid: int) -> Entry:
        for e in self.entries:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def meshes(self):
        return [self.rest.with_vertices(e.vertices) for e in self.entries]

    @property
    def n_landmarks(self) -> int:
        return sum(e.provenance == "landmark" for e in self.entries)

    def manifest(self) -> list:
        return [{"id": e.id, "provenance": e.provenance, "parents": list(e.parents), "iteration": e.iteration,
                 "file": f"shapes/{e.id:04d}.obj", "converged": e.converged} for e in self.entries]

    @classmethod
    def from_landmarks(cls, rest: Mesh, landmarks) -> "DeformationSet":
        check_topology(rest, landmarks)
        ds = cls(rest)
        for m in landmarks:
            ds.add(m.vertices, "landmark")
        return ds


# --------------------------------------------------------------------------
# training

def _batches(rng, n: int, batch_size: int):
    perm = rng.permutation(n)
    bs = max(2, batch_size)
    out = [perm[i:i + bs] for i in range(0, n, bs)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


class Trainer:
    """Owns the optimiser and the per-shape ARAP contexts for the deformation loss."""

    def __init__(self, model: VaeModel, cfg: RunConfig, rest: Mesh, optimizer: Adam | None = None):
        self.model = model
        self.cfg = cfg
        self.rest = rest
        self.optimizer = optimizer or Adam(model.params(), lr=cfg.vae.lr, clip_norm=cfg.vae.clip_norm)
        self._rest_ctx = ArapContext(rest)
        self._ctx_cache = {}
        self.steps = 0

    def contexts(self, entries):
        if self.cfg.vae.deformation_base == "rest":
            return self._rest_ctx
        if self.cfg.vae.deformation_base != "self":
            raise PipelineError(f"unknown deformation_base {self.cfg.vae.deformation_base!r}")
        out = []
        for e in entries:
            if e.id not in self._ctx_cache:
                self._ctx_cache[e.id] = ArapContext(self.rest.with_vertices(e.vertices))
            out.append(self._ctx_cache[e.id])
        return out

    def train(self, entries, epochs: int, rng, sigma: float | None = None, log=None, round_no: int = 0):
        sigma = self.cfg.vae.sigma if sigma is None else sigma
        if len(entries) < 2:
            raise PipelineError("training needs at least two shapes")
        data = np.stack([e.vertices for e in entries])
        history = []
        for ep in range(epochs):
            sums = np.zeros(4)
            nb = 0
            for idx in _batches(rng, len(entries), self.cfg.vae.batch_size):
                ctxs = self.contexts([entries[i] for i in idx])
                _, rep = train_step(self.model, data[idx], self.optimizer, sigma, ctxs if sigma else None,
                                    gaussian=self.cfg.vae.gaussian)
                self.steps += 1
                sums += (rep.reconstruction, rep.gaussian, rep.deformation, rep.total)
                nb += 1
            mean = sums / nb
            rec = {"event": "epoch", "round": round_no, "epoch": ep, "reconstruction": mean[0],
                   "gaussian": mean[1], "deformation": mean[2], "total": mean[3], "sigma": sigma}
            history.append(rec)
            if log is not None:
                log(rec)
        return history


def new_model(cfg: RunConfig, rest: Mesh, seed: int) -> VaeModel:
    return VaeModel.for_mesh(rest, latent_dim=cfg.vae.latent_dim, encoder_hidden=tuple(cfg.vae.encoder_hidden),
                             decoder_hidden=tuple(cfg.vae.decoder_hidden), seed=seed)


def _seeds(seed: int):
    model_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    return int(model_seq.generate_state(1)[0]), np.random.default_rng(run_seq)


# --------------------------------------------------------------------------
# run directory

class RunDir:
    """``config.toml``, ``log.jsonl``, ``shapes/####.obj`` and
    ``checkpoints/round_####/{model.glassvae, manifest.json, registry.npy}``."""

    def __init__(self, path):
        self.path = Path(path)

    def prepare(self, cfg: RunConfig):
        (self.path / "shapes").mkdir(parents=True, exist_ok=True)
        (self.path / "checkpoints").mkdir(exist_ok=True)
        (self.path / "config.toml").write_text(cfg.to_toml())

    def log(self, record: dict):
        with open(self.path / "log.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoints(self):
        d = self.path / "checkpoints"
        return sorted(p for p in d.glob("round_*") if p.is_dir()) if d.exists() else []

    def latest(self):
        cps = self.checkpoints()
        return cps[-1] if cps else None

    def write_checkpoint(self, round_no: int, model, optimizer, registry: DeformationSet, state: dict):
        for e in registry.entries:
            p = self.path / "shapes" / f"{e.id:04d}.obj"
            if not p.exists():
                save_obj(registry.rest.with_vertices(e.vertices), p)
        final = self.path / "checkpoints" / f"round_{round_no:04d}"
        tmp = Path(tempfile.mkdtemp(prefix=".tmp_round_", dir=self.path / "checkpoints"))
        save_model(model, tmp / "model.glassvae", extra={"optimizer": optimizer.state_dict()})
        np.save(tmp / "registry.npy", registry.vertices())
        manifest = {"round": round_no, "entries": registry.manifest(),
                    "reports": {str(e.id): e.report for e in registry.entries if e.report is not None},
                    **state}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
        return final


def load_checkpoint(cp_dir, rest: Mesh):
    cp_dir = Path(cp_dir)
    model, extra = load_model(cp_dir / "model.glassvae", with_extra=True)
    opt = Adam.from_state(extra["optimizer"]) if "optimizer" in extra else None
    manifest = json.loads((cp_dir / "manifest.json").read_text())
    verts = np.load(cp_dir / "registry.npy")
    reg = DeformationSet(rest)
    reports = manifest.get("reports", {})
    for meta, v in zip(manifest["entries"], verts):
        reg.entries.append(Entry(meta["id"], v, meta["provenance"], tuple(meta["parents"]), meta["iteration"],
                                 reports.get(str(meta["id"]))))
    return model, opt, reg, manifest


def load_run(run_dir):
    """Final model and registry of a run directory."""
    rd = RunDir(run_dir)
    cp = rd.latest()
    if cp is None:
        raise PipelineError(f"{run_dir}: no checkpoints")
    model = load_model(cp / "model.glassvae")
    rest = Mesh(json.loads((cp / "manifest.json").read_text())["rest_vertices"], model.faces)
    _, _, reg, manifest = load_checkpoint(cp, rest)
    return model, reg, manifest


# --------------------------------------------------------------------------
# main loop

def run_glass(cfg: RunConfig, landmarks, rest: Mesh | None = None, run_dir=None, resume: bool = False,
              augment: bool = True):
    """Alternate VAE training and latent augmentation until the registry
    reaches ``cfg.pipeline.target_set_size`` (or ``max_rounds``).

    With ``run_dir`` set, every round is checkpointed and events go to
    ``log.jsonl``; ``resume=True`` continues from the newest checkpoint with
    the saved RNG streams.

    Returns the trained model and the registry. The model's ``train_steps``
    attribute holds the total number of optimiser updates of the run.
    """
    landmarks = list(landmarks)
    if len(landmarks) < 2:
        raise PipelineError("need at least two landmarks")
    rest = landmarks[0] if rest is None else rest
    check_topology(rest, landmarks)
    pc = cfg.pipeline
    rd = RunDir(run_dir) if run_dir is not None else None
    log = rd.log if rd is not None else (lambda rec: None)

    model_seed, run_rng = _seeds(cfg.seed)
    round_no = 0
    cursor = 0
    if resume:
        if rd is None or rd.latest() is None:
            raise PipelineError("nothing to resume from")
        model, opt, registry, manifest = load_checkpoint(rd.latest(), rest)
        run_rng.bit_generator.state = manifest["run_rng_state"]
        round_no = manifest["round"]
        cursor = manifest["cursor"]
        trainer = Trainer(model, cfg, rest, opt)
        trainer.steps = manifest.get("steps", 0)
        logger.info("resuming at round %d with %d shapes", round_no, len(registry))
    else:
        registry = DeformationSet.from_landmarks(rest, landmarks)
        model = new_model(cfg, rest, model_seed)
        trainer = Trainer(model, cfg, rest)
        if rd is not None:
            rd.prepare(cfg)
            log({"event": "start", "config_hash": cfg.hash(), "n_landmarks": len(landmarks),
                 "n_params": model.n_params, "deformation_loss": "arap"})
        _train_round(trainer, registry, pc.epochs_initial, run_rng, log, 0, rd)
        _checkpoint(rd, pc, 0, trainer, registry, run_rng, cursor)

    n_aug = pc.augmentations_per_round or registry.n_landmarks
    explorer = cfg.explorer
    while augment and len(registry) < pc.target_set_size and round_no < pc.max_rounds:
        round_no += 1
        registry_arr = registry.vertices()
        for _ in range(n_aug):
            if len(registry) >= pc.target_set_size:
                break
            src = registry.entries[cursor % len(registry)]
            cursor += 1
            new, report = latent_augment(trainer.model, rest, src.vertices, registry_arr, explorer, run_rng,
                                         rest_vertices=rest.vertices)
            e = registry.add(new, "generated", parents=(src.id,), iteration=round_no, report=report.as_dict())
            registry_arr = np.concatenate([registry_arr, new[None]], axis=0)
            rec = {"event": "augment", "iteration": round_no, "shapeId": e.id, "sourceShapeId": src.id,
                   **report.as_dict()}
            log(rec)
            logger.info("round %d: shape %d from %d, alpha=%.3g, E %.3g -> %.3g (%s)", round_no, e.id, src.id,
                        report.alpha, report.energy_pre, report.energy_post, report.status)
        if not pc.warm_start:
            done = trainer.steps
            trainer = Trainer(new_model(cfg, rest, model_seed + round_no), cfg, rest)
            trainer.steps = done
        _train_round(trainer, registry, pc.epochs_per_round, run_rng, log, round_no, rd)
        _checkpoint(rd, pc, round_no, trainer, registry, run_rng, cursor)
    trainer.model.train_steps = trainer.steps
    return trainer.model, registry


def _train_round(trainer, registry, epochs, rng, log, round_no, rd):
    entries = registry.entries
    if trainer.cfg.pipeline.exclude_nonconverged:
        entries = [e for e in entries if e.converged]
    try:
        trainer.train(entries, epochs, rng, log=log, round_no=round_no)
    except TrainingError as exc:
        last = rd.latest() if rd is not None else None
        raise PipelineError(f"training diverged in round {round_no}: {exc}; last good checkpoint: {last}") from exc


def _checkpoint(rd, pc, round_no, trainer, registry, run_rng, cursor):
    if rd is None or not pc.checkpoint:
        return
    state = {"run_rng_state": run_rng.bit_generator.state, "cursor": cursor, "steps": trainer.steps,
             "rest_vertices": registry.rest.vertices.tolist()}
    rd.write_checkpoint(round_no, trainer.model, trainer.optimizer, registry, state)


def train_vanilla(cfg: RunConfig, landmarks, rest: Mesh | None = None, steps: int | None = None, run_dir=None):
    """Plain VAE on the landmarks alone (no deformation loss, no augmentation).

    ``steps`` fixes the number of optimiser updates, to match another run's
    budget; otherwise ``epochs_initial`` epochs are used.
    """
    c = RunConfig.from_dict(cfg.to_dict())
    c.vae.sigma = 0.0
    if steps is not None:
        per_epoch = len(_batches(np.random.default_rng(0), len(landmarks), c.vae.batch_size))
        c.pipeline.epochs_initial = int(np.ceil(steps / per_epoch))
    c.pipeline.target_set_size = len(landmarks)
    return run_glass(c, landmarks, rest, run_dir=run_dir, augment=False)


def train_on_set(cfg: RunConfig, registry: DeformationSet, epochs: int, sigma: float | None = None):
    """Train a fresh VAE on a fixed set (used for interpolation baselines)."""
    model_seed, rng = _seeds(cfg.seed)
    model = new_model(cfg, registry.rest, model_seed)
    trainer = Trainer(model, cfg, registry.rest)
    trainer.train(registry.entries, epochs, rng, sigma=sigma)
    return model


# --------------------------------------------------------------------------
# baselines

def _pair_allotment(n_pairs: int, count: int):
    base, extra = divmod(count, n_pairs)
    return [base + (1 if p < extra else 0) for p in range(n_pairs)]


def _blend_ts(m: int) -> np.ndarray:
    if m <= 0:
        return np.zeros(0)
    if m == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, m)


def pairwise_energy_descent(ctx_a: ArapContext, ctx_b: ArapContext, start, iters: int = 50, c1: float = 1e-4):
    """Gradient descent with Armijo backtracking on ``f_A + f_B``.

    Returns the final positions and the energy after every accepted step.
    """
    W = np.array(start, dtype=np.float64)

    def f(X):
        return energy(ctx_a, X) + energy(ctx_b, X)

    e = f(W)
    hist = [e]
    t = 1.0
    for _ in range(iters):
        g = arap_gradient(ctx_a, W) + arap_gradient(ctx_b, W)
        gg = float(np.sum(g * g))
        if gg <= 1e-30:
            break
        t *= 2.0
        accepted = False
        for _ in range(60):
            cand = W - t * g
            ec = f(cand)
            if ec <= e - c1 * t * gg:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        W, e = cand, ec
        hist.append(e)
    return W, hist


def baseline_interp_augment(landmarks, count: int, with_energy_projection: bool = False, rest: Mesh | None = None,
                            iters: int = 50) -> DeformationSet:
    """Linear vertex blends over all landmark pairs, optionally relaxed on the
    pair's summed ARAP energy. The set holds the landmarks plus ``count`` blends."""
    landmarks = list(landmarks)
    if len(landmarks) < 2:
        raise PipelineError("need at least two landmarks")
    rest = landmarks[0] if rest is None else rest
    ds = DeformationSet.from_landmarks(rest, landmarks)
    pairs = [(a, b) for a in range(len(landmarks)) for b in range(a + 1, len(landmarks))]
    ctxs = {}
    for (a, b), m in zip(pairs, _pair_allotment(len(pairs), count)):
        A, B = landmarks[a].vertices, landmarks[b].vertices
        for t in _blend_ts(m):
            W = (1.0 - t) * A + t * B
            report = None
            if with_energy_projection:
                for i in (a, b):
                    if i not in ctxs:
                        ctxs[i] = ArapContext(landmarks[i])
                e_before = energy(ctxs[a], W) + energy(ctxs[b], W)
                W, hist = pairwise_energy_descent(ctxs[a], ctxs[b], W, iters)
                report = {"t": float(t), "energyPrePost": [e_before, hist[-1]], "history": hist}
            else:
                report = {"t": float(t)}
            ds.add(W, "baseline-interp", parents=(a, b), report=report)
    return ds


# --------------------------------------------------------------------------
# sampling

def _faces(model: VaeModel, template: Mesh | None):
    if template is not None:
        return template.faces
    if model.faces is None:
        raise MeshError("model carries no faces; pass a template mesh")
    return model.faces


def generate(model: VaeModel, count: int, rng, template: Mesh | None = None):
    """Decode ``count`` codes drawn from the unit Gaussian."""
    faces = _faces(model, template)
    if count <= 0:
        return []
    Z = rng.standard_normal((count, model.latent_dim))
    return [Mesh(v, faces) for v in model.decode_batch(Z)]


def interpolate(model: VaeModel, a: Mesh, b: Mesh, steps: int, template: Mesh | None = None):
    """Decode evenly spaced points on the segment between the encoded means of ``a`` and ``b``."""
    faces = _faces(model, template if template is not None else a)
    la, _ = model.encode(a.vertices)
    lb, _ = model.encode(b.vertices)
    ts = np.linspace(0.0, 1.0, steps) if steps > 1 else np.zeros(max(steps, 0))
    Z = (1.0 - ts)[:, None] * la + ts[:, None] * lb
    return [Mesh(v, faces) for v in model.decode_batch(Z)] if len(ts) else []
