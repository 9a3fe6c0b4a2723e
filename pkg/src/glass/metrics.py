"""Evaluation metrics for generated shape sets and latent interpolations.

All metrics are "lower is better". Tables normalise each column by a
Vanilla-VAE reference run.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .mesh import Mesh, mean_curvature_smoothness


def _stack(shapes) -> np.ndarray:
    arrs = [s.vertices if isinstance(s, Mesh) else np.asarray(s, dtype=np.float64) for s in shapes]
    if not arrs:
        raise ValueError("empty shape set")
    return np.stack(arrs)


def pairwise_mean_distance(A, B) -> np.ndarray:
    """``D[a, b]`` = mean over vertices of ``||A[a, i] - B[b, i]||``."""
    A, B = _stack(A), _stack(B)
    out = np.empty((len(A), len(B)))
    for a in range(len(A)):
        out[a] = np.linalg.norm(B - A[a], axis=2).mean(axis=1)
    return out


def coverage(holdout, generated) -> float:
    """Mean over held-out shapes of the distance to the closest generated shape."""
    return float(pairwise_mean_distance(holdout, generated).min(axis=1).mean())


def sequence_l2(generated_interp, ground_truth) -> float:
    """Coverage restricted to an interpolation sequence: each ground-truth
    frame is matched to its closest generated frame."""
    return coverage(ground_truth, generated_interp)


def smoothness(shapes, rest: Mesh | None = None) -> float:
    """Mean over ``shapes`` of the summed mean-curvature norm."""
    faces = rest.faces if rest is not None else None
    vals = []
    for s in shapes:
        m = s if isinstance(s, Mesh) else Mesh(s, faces)
        vals.append(mean_curvature_smoothness(m))
    return float(np.mean(vals))


def equal_spacing_frames(frames: np.ndarray, n_keep: int = 30) -> np.ndarray:
    """Indices of ``n_keep`` frames placed at equal cumulative arc-length
    quantiles along a dense path (nearest frame to each quantile)."""
    steps = np.linalg.norm(frames[1:] - frames[:-1], axis=2).mean(axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    targets = np.linspace(0.0, cum[-1], n_keep)
    pos = np.searchsorted(cum, targets)
    pos = np.clip(pos, 1, len(cum) - 1)
    left = pos - 1
    pick = np.where(np.abs(cum[left] - targets) <= np.abs(cum[pos] - targets), left, pos)
    return pick


def interpolation_smoothness(model, a, b, n_samples: int = 1000, n_keep: int = 30) -> float:
    """Standard deviation of adjacent-frame distances after resampling a
    dense latent interpolation to ``n_keep`` roughly equally spaced frames."""
    va = a.vertices if isinstance(a, Mesh) else np.asarray(a)
    vb = b.vertices if isinstance(b, Mesh) else np.asarray(b)
    la, _ = model.encode(va)
    lb, _ = model.encode(vb)
    ts = np.linspace(0.0, 1.0, n_samples)
    frames = model.decode_batch(la + ts[:, None] * (lb - la))
    total = np.linalg.norm(frames[1:] - frames[:-1], axis=2).mean(axis=1).sum()
    if total <= 1e-12 * model.scale:
        return 0.0
    keep = frames[equal_spacing_frames(frames, n_keep)]
    gaps = np.linalg.norm(keep[1:] - keep[:-1], axis=2).mean(axis=1)
    return float(np.std(gaps))


def reconstruction_error(model, shapes) -> float:
    """Mean per-vertex distance between shapes and their mean-code reconstructions
    (length units, not squared)."""
    W = _stack(shapes)
    mu, _ = model.encode_batch(W)
    rec = model.decode_batch(mu)
    return float(np.linalg.norm(rec - W, axis=2).mean())


def squared_reconstruction_error(model, shapes) -> float:
    """Same reconstruction in the training loss's units: squared norm of the
    normalised (centred, scaled) residual, averaged over shapes."""
    W = _stack(shapes)
    mu, _ = model.encode_batch(W)
    x = model.normalize(W)
    y = ((model.decode_batch(mu) - model.center) / model.scale).reshape(len(W), -1)
    return float(np.sum((y - x) ** 2) / len(W))


@dataclass
class MetricReport:
    coverage: float
    smoothness: float
    interp_std: float
    l2_holdout: float | None = None
    recon: float | None = None

    FIELDS = ("coverage", "smoothness", "interp_std", "l2_holdout", "recon")

    def ratios(self, reference: "MetricReport") -> dict:
        out = {}
        for f in self.FIELDS:
            mine, ref = getattr(self, f), getattr(reference, f)
            if mine is None or ref is None:
                out[f + "_ratio"] = None
            elif ref == 0.0:
                out[f + "_ratio"] = 1.0 if mine == 0.0 else float("inf")
            else:
                out[f + "_ratio"] = mine / ref
        return out

    def as_dict(self):
        return {k: v for k, v in asdict(self).items()}


def write_metrics_csv(rows, path=None, with_ratios: bool = False) -> str:
    """Rows of ``(dataset, method, MetricReport, reference-or-None)``.

    Columns: dataset, method, coverage, smoothness, interp_std, l2_holdout,
    recon, then ``*_ratio`` columns when ``with_ratios``.
    """
    cols = ["dataset", "method", *MetricReport.FIELDS]
    if with_ratios:
        cols += [f + "_ratio" for f in MetricReport.FIELDS]
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    wr.writeheader()
    for dataset, method, rep, ref in rows:
        row = {"dataset": dataset, "method": method}
        for f in MetricReport.FIELDS:
            v = getattr(rep, f)
            row[f] = "" if v is None else repr(float(v))
        if with_ratios:
            for k, v in rep.ratios(ref).items():
                row[k] = "" if v is None else repr(float(v))
        wr.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
