"""``glass`` command-line interface.

Subcommands: train, generate, interpolate, evaluate, project-highres, embed.
Run ``glass <command> --help`` for the options of each. Config keys can be
overridden with dotted ``section.key=value`` arguments (``--`` prefix
optional); overrides win over the config file. ``GLASS_LOG`` sets the stderr
log level (error, info, debug).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .mesh import Mesh, MeshError, check_topology, load_obj, load_vertex_map, save_obj
from .pipeline import PipelineError, RunDir, generate, interpolate, load_run, run_glass
from .vae import FORMAT_TAG, load_model

logger = logging.getLogger("glass")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _setup_logging():
    level = os.environ.get("GLASS_LOG", "info").lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"GLASS_LOG must be one of {', '.join(levels)}, got {level!r}")
    root = logging.getLogger("glass")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(levels[level])
    root.propagate = False


def _limit_threads(n):
    """Cap the BLAS/OpenMP worker pools; results do not depend on it.

    The numba kernels are serial, so there is no numba pool to cap.
    """
    if n is None:
        return None
    if n < 1:
        raise CliError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _split_overrides(extra):
    """Turn leftover argv items into ``key=value`` override strings."""
    out = []
    i = 0
    while i < len(extra):
        item = extra[i]
        key = item[2:] if item.startswith("--") else item
        if "=" in key:
            out.append(key)
        elif item.startswith("--") and "." in key and i + 1 < len(extra):
            out.append(f"{key}={extra[i + 1]}")
            i += 1
        else:
            raise CliError(f"unrecognised argument {item!r}")
        if "." not in out[-1].split("=", 1)[0]:
            raise CliError(f"override {out[-1]!r} must be a dotted section.key")
        i += 1
    return out


def _load_config(args, overrides) -> tuple[RunConfig, Path]:
    if args.config is not None:
        if not Path(args.config).is_file():
            raise CliError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
        base = Path(args.config).resolve().parent
    else:
        cfg = RunConfig()
        base = Path.cwd()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg, base


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _read_mesh(path, what="mesh") -> Mesh:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"{what} file not found: {path}")
    return load_obj(path)


def _model_path(target) -> Path:
    """Accept a model file, a checkpoint directory or a run directory."""
    p = Path(target)
    if p.is_file():
        return p
    if (p / "model.glassvae").is_file():
        return p / "model.glassvae"
    latest = RunDir(p).latest() if p.is_dir() else None
    if latest is not None:
        return latest / "model.glassvae"
    raise CliError(f"no {FORMAT_TAG} model found at {p}")


def _write_frames(meshes, out: Path, prefix: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(max(len(meshes) - 1, 0))))
    for i, m in enumerate(meshes):
        save_obj(m, out / f"{prefix}{i:0{width}d}.obj")


def _holdout(dirpath) -> list:
    d = Path(dirpath)
    if not d.is_dir():
        raise CliError(f"holdout directory not found: {d}")
    files = sorted(d.glob("*.obj"))
    if not files:
        raise CliError(f"no .obj files in {d}")
    return [load_obj(f) for f in files]


# --------------------------------------------------------------------------
# commands

def cmd_train(args, overrides):
    cfg, base = _load_config(args, overrides)
    if args.out is not None:
        cfg.paths.out = str(args.out)
    if not cfg.paths.landmarks:
        raise CliError("no landmarks given (set paths.landmarks)")
    lm_paths = [_resolve(base, p) for p in cfg.paths.landmarks]
    landmarks = [_read_mesh(p, "landmark") for p in lm_paths]
    rest = _read_mesh(_resolve(base, cfg.paths.rest), "rest") if cfg.paths.rest else landmarks[0]
    check_topology(rest, landmarks)
    out = Path(cfg.paths.out) if args.out is not None else _resolve(base, cfg.paths.out)
    rd = RunDir(out)
    if args.resume:
        if rd.latest() is None:
            raise CliError(f"nothing to resume in {out}")
    elif out.exists() and any(out.iterdir()):
        raise CliError(f"run directory {out} is not empty (use --resume to continue it)")
    model, registry = run_glass(cfg, landmarks, rest, run_dir=out, resume=args.resume)
    for e in registry.entries:
        p = out / "shapes" / f"{e.id:04d}.obj"
        if not p.exists():
            save_obj(rest.with_vertices(e.vertices), p)
    logger.info("run finished: %d shapes in %s", len(registry), out)
    return 0


def cmd_generate(args, overrides):
    model = load_model(_model_path(args.checkpoint))
    if args.count < 0:
        raise CliError("--count must be >= 0")
    seed = 0 if args.seed is None else args.seed
    meshes = generate(model, args.count, np.random.default_rng(seed))
    out = Path(args.out)
    _write_frames(meshes, out)
    logger.info("wrote %d shapes to %s", len(meshes), out)
    return 0


def cmd_interpolate(args, overrides):
    model = load_model(_model_path(args.checkpoint))
    a = _read_mesh(args.a)
    b = _read_mesh(args.b)
    check_topology(a, [b])
    if args.steps < 2:
        raise CliError("--steps must be >= 2")
    frames = interpolate(model, a, b, args.steps)
    _write_frames(frames, Path(args.out), prefix="frame_")
    logger.info("wrote %d frames to %s", len(frames), args.out)
    return 0


def _evaluate_run(run_dir, holdout, count, seed, interp_samples, frames_per_segment):
    from . import metrics as M

    model, registry, _ = load_run(run_dir)
    gen = generate(model, count, np.random.default_rng(seed))
    landmarks = [e.vertices for e in registry.entries if e.provenance == "landmark"]
    interp = [M.interpolation_smoothness(model, a, b, n_samples=interp_samples)
              for a, b in zip(landmarks[:-1], landmarks[1:])]
    path = []
    for a, b in zip(landmarks[:-1], landmarks[1:]):
        path += [m.vertices for m in interpolate(model, registry.rest.with_vertices(a),
                                                 registry.rest.with_vertices(b), frames_per_segment)]
    return M.MetricReport(
        coverage=M.coverage(holdout, gen) if gen else float("nan"),
        smoothness=M.smoothness(gen) if gen else float("nan"),
        interp_std=float(np.mean(interp)) if interp else float("nan"),
        l2_holdout=M.sequence_l2(path, holdout) if path else None,
        recon=M.reconstruction_error(model, holdout),
    )


def cmd_evaluate(args, overrides):
    from .metrics import write_metrics_csv

    holdout = _holdout(args.holdout)
    seed = 0 if args.seed is None else args.seed
    opts = (args.count, seed, args.interp_samples, args.frames)
    rep = _evaluate_run(args.run, holdout, *opts)
    dataset = args.dataset or Path(args.holdout).name
    rows = []
    if args.reference is not None:
        ref = _evaluate_run(args.reference, holdout, *opts)
        rows.append((dataset, Path(args.reference).name, ref, ref))
        rows.append((dataset, Path(args.run).name, rep, ref))
    else:
        rows.append((dataset, Path(args.run).name, rep, None))
    out = Path(args.out) if args.out else Path(args.run) / "metrics.csv"
    text = write_metrics_csv(rows, out, with_ratios=args.reference is not None)
    sys.stdout.write(text)
    return 0


def cmd_project_highres(args, overrides):
    from .arap import highres_project

    low = _read_mesh(args.low, "low-res mesh")
    high = _read_mesh(args.high_rest, "high-res rest")
    if not Path(args.map).is_file():
        raise CliError(f"vertex map file not found: {args.map}")
    m = load_vertex_map(args.map, high.n_vertices)
    if len(m) != low.n_vertices:
        raise CliError(f"vertex map has {len(m)} entries but {args.low} has {low.n_vertices} vertices")
    out = highres_project(low, m, high, max_iters=args.max_iters)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_obj(out, args.out)
    logger.info("wrote %s", args.out)
    return 0


def embed_registry(registry) -> np.ndarray:
    """2-D PCA coordinates of the registry's rest-relative displacements.

    Components are ordered by variance and signed so the largest-magnitude
    loading is positive. A single shape maps to the origin.
    """
    V = registry.vertices()
    D = (V - registry.rest.vertices).reshape(len(V), -1)
    D = D - D.mean(axis=0)
    xy = np.zeros((len(V), 2))
    if len(V) < 2:
        return xy
    _, S, Vt = np.linalg.svd(D, full_matrices=False)
    for c in range(min(2, len(S))):
        if S[c] <= 1e-12 * max(S[0], 1e-300):
            break
        axis = Vt[c]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        xy[:, c] = D @ axis
    return xy


def cmd_embed(args, overrides):
    _, registry, _ = load_run(args.run)
    xy = embed_registry(registry)
    out = Path(args.out) if args.out else Path(args.run) / "embed.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "x", "y", "provenance", "parent"])
        for e, (x, y) in zip(registry.entries, xy):
            wr.writerow([e.id, repr(float(x)), repr(float(y)), e.provenance, ";".join(map(str, e.parents))])
    logger.info("wrote %s", out)
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--threads", type=int, help="cap on worker threads (does not change results)")

    p = argparse.ArgumentParser(prog="glass", description="Energy-guided latent augmentation for sparse mesh sets.",
                                epilog="Dotted overrides such as pipeline.target_set_size=50 apply to the config.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    t = sub.add_parser("train", parents=[common], help="run the augmentation pipeline",
                       description="Train the VAE and augment the landmark set; writes a run directory.")
    t.add_argument("--out", type=Path, help="run directory (overrides paths.out)")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", parents=[common], help="sample shapes from a trained model",
                       description="Decode unit-Gaussian latent samples to OBJ files ####.obj.")
    g.add_argument("checkpoint", help="model file, checkpoint directory or run directory")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("interpolate", parents=[common], help="latent interpolation between two meshes",
                       description="Write frame_####.obj along the segment between the encoded means.")
    i.add_argument("checkpoint")
    i.add_argument("a", help="start mesh (OBJ)")
    i.add_argument("b", help="end mesh (OBJ)")
    i.add_argument("--steps", type=int, default=30)
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("evaluate", parents=[common], help="metrics CSV for a run",
                       description="Coverage, smoothness, interpolation smoothness, holdout L2 and reconstruction; "
                                   "ratio columns are added when a reference run is given.")
    e.add_argument("run", help="run directory")
    e.add_argument("--holdout", required=True, help="directory of held-out OBJ files")
    e.add_argument("--reference", help="reference run directory for *_ratio columns")
    e.add_argument("--count", type=int, default=100, help="generated shapes for coverage/smoothness")
    e.add_argument("--interp-samples", type=int, default=1000)
    e.add_argument("--frames", type=int, default=30, help="interpolation frames per landmark pair for l2_holdout")
    e.add_argument("--dataset", help="dataset label (default: holdout directory name)")
    e.add_argument("--out", type=Path, help="CSV path (default: RUN/metrics.csv)")
    e.set_defaults(func=cmd_evaluate)

    h = sub.add_parser("project-highres", parents=[common], help="lift a low-res deformation to high res",
                       description="Constrained ARAP projection of a decimated deformation onto the full mesh.")
    h.add_argument("low", help="deformed low-res mesh (OBJ)")
    h.add_argument("map", help="vertex map: one high-res index per low-res vertex, one per line")
    h.add_argument("high_rest", help="high-res rest mesh (OBJ)")
    h.add_argument("--out", type=Path, required=True)
    h.add_argument("--max-iters", type=int, default=200)
    h.set_defaults(func=cmd_project_highres)

    m = sub.add_parser("embed", parents=[common], help="2-D PCA embedding of a run's registry",
                       description="CSV with columns id,x,y,provenance,parent.")
    m.add_argument("run")
    m.add_argument("--out", type=Path, help="CSV path (default: RUN/embed.csv)")
    m.set_defaults(func=cmd_embed)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        _setup_logging()
        overrides = _split_overrides(extra)
        if overrides and args.command != "train":
            raise CliError("config overrides only apply to 'train'")
        limiter = _limit_threads(args.threads)
        try:
            return args.func(args, overrides)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CliError, ConfigError, MeshError, PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"glass: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
