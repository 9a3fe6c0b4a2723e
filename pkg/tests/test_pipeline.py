import json

import numpy as np
import pytest

from glass.arap import ArapContext, energy
from glass.config import RunConfig
from glass.datasets import articulated_bar
from glass.mesh import load_obj
from glass.pipeline import (DeformationSet, PipelineError, RunDir, baseline_interp_augment, generate, interpolate,
                            load_run, pairwise_energy_descent, run_glass, train_vanilla)


def small_cfg(seed=0, target=6):
    cfg = RunConfig(seed=seed)
    cfg.vae.latent_dim = 3
    cfg.vae.encoder_hidden = [16]
    cfg.vae.decoder_hidden = [16]
    cfg.vae.gaussian = "batch"
    cfg.explorer.k = 2
    cfg.explorer.s = 4
    cfg.explorer.delta = 2e-3
    cfg.pipeline.epochs_initial = 20
    cfg.pipeline.epochs_per_round = 5
    cfg.pipeline.augmentations_per_round = 2
    cfg.pipeline.target_set_size = target
    return cfg


@pytest.fixture(scope="module")
def bar():
    return articulated_bar(n_rings=12, n_around=6)


@pytest.fixture(scope="module")
def run(bar, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    model, reg = run_glass(small_cfg(), bar.landmarks, bar.rest, run_dir=d)
    return d, model, reg


# -- registry -------------------------------------------------------------------

def test_deformation_set_ids_and_provenance(bar):
    ds = DeformationSet.from_landmarks(bar.rest, bar.landmarks)
    assert [e.id for e in ds.entries] == [0, 1, 2]
    assert ds.n_landmarks == 3
    e = ds.add(bar.rest.vertices, "generated", parents=(1,), iteration=2)
    assert e.id == 3 and e.parents == (1,)
    with pytest.raises(ValueError):
        ds.add(bar.rest.vertices, "other")
    assert ds.vertices().shape == (4, bar.rest.n_vertices, 3)
    with pytest.raises(KeyError):
        ds.by_id(99)


# -- run_glass ------------------------------------------------------------------

def test_run_reaches_target_and_logs(run, bar):
    d, model, reg = run
    assert len(reg) == 6
    assert [e.provenance for e in reg.entries[:3]] == ["landmark"] * 3
    for e, lm in zip(reg.entries[:3], bar.landmarks):
        np.testing.assert_array_equal(e.vertices, lm.vertices)
    gen = [e for e in reg.entries if e.provenance == "generated"]
    assert len(gen) == 3 and all(e.report is not None for e in gen)
    recs = [json.loads(x) for x in (d / "log.jsonl").read_text().splitlines()]
    aug = [r for r in recs if r["event"] == "augment"]
    assert sorted(r["shapeId"] for r in aug) == [e.id for e in gen]
    for r in aug:
        assert r["energyPrePost"][0] >= r["energyPrePost"][1]
        if r["converged"]:
            assert r["energyPrePost"][1] <= 1e-5
    assert model.train_steps > 0


def test_run_dir_layout(run):
    d, model, reg = run
    assert (d / "config.toml").exists()
    cps = RunDir(d).checkpoints()
    assert [p.name for p in cps] == ["round_0000", "round_0001", "round_0002"]
    for p in cps:
        assert (p / "model.glassvae").exists() and (p / "manifest.json").exists()
    sizes = [len(json.loads((p / "manifest.json").read_text())["entries"]) for p in cps]
    assert sizes == sorted(sizes)
    for e in reg.entries:
        m = load_obj(d / "shapes" / f"{e.id:04d}.obj")
        np.testing.assert_allclose(m.vertices, e.vertices, atol=5e-7)  # six decimals in OBJ
    assert RunConfig.load(d / "config.toml") == small_cfg()


def test_load_run_matches(run):
    d, model, reg = run
    m2, reg2, manifest = load_run(d)
    np.testing.assert_array_equal(reg2.vertices(), reg.vertices())
    z = np.zeros(3)
    np.testing.assert_array_equal(m2.decode(z), model.decode(z))
    assert manifest["round"] == 2


def test_run_is_deterministic(run, bar, tmp_path):
    _, model, reg = run
    m2, reg2 = run_glass(small_cfg(), bar.landmarks, bar.rest, run_dir=tmp_path)
    np.testing.assert_array_equal(reg2.vertices(), reg.vertices())
    a = [json.loads(x) for x in (run[0] / "log.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert a == b


def test_resume_replays_the_same_stream(bar, tmp_path):
    full_dir = tmp_path / "full"
    _, reg_full = run_glass(small_cfg(target=9), bar.landmarks, bar.rest, run_dir=full_dir)
    part_dir = tmp_path / "part"
    run_glass(small_cfg(target=7), bar.landmarks, bar.rest, run_dir=part_dir)
    _, reg_res = run_glass(small_cfg(target=9), bar.landmarks, bar.rest, run_dir=part_dir, resume=True)
    np.testing.assert_array_equal(reg_res.vertices(), reg_full.vertices())


def test_target_equal_landmarks_is_vanilla(bar):
    cfg = small_cfg(target=3)
    cfg.vae.sigma = 0.0
    m, reg = run_glass(cfg, bar.landmarks, bar.rest)
    assert len(reg) == 3
    vm, _ = train_vanilla(small_cfg(), bar.landmarks, bar.rest)
    np.testing.assert_array_equal(vm.decode(np.ones(3)), m.decode(np.ones(3)))


def test_vanilla_matches_step_budget(run, bar):
    _, model, _ = run
    vm, _ = train_vanilla(small_cfg(), bar.landmarks, bar.rest, steps=model.train_steps)
    assert vm.train_steps >= model.train_steps


def test_cold_restart_option(bar):
    cfg = small_cfg()
    cfg.pipeline.warm_start = False
    model, reg = run_glass(cfg, bar.landmarks, bar.rest)
    assert len(reg) == 6 and model.train_steps > 0


def test_run_needs_two_landmarks(bar):
    with pytest.raises(PipelineError):
        run_glass(small_cfg(), bar.landmarks[:1], bar.rest)
    with pytest.raises(PipelineError):
        run_glass(small_cfg(), bar.landmarks, bar.rest, resume=True)


# -- baselines --------------------------------------------------------------------

def test_interp_baseline_endpoints(bar):
    ds = baseline_interp_augment(bar.landmarks[:2], 5, rest=bar.rest)
    blends = [e for e in ds.entries if e.provenance == "baseline-interp"]
    assert len(blends) == 5
    ts = [e.report["t"] for e in blends]
    assert ts == [0.0, 0.25, 0.5, 0.75, 1.0]
    np.testing.assert_array_equal(blends[0].vertices, bar.landmarks[0].vertices)
    np.testing.assert_array_equal(blends[-1].vertices, bar.landmarks[1].vertices)


def test_interp_baseline_allots_pairs(bar):
    ds = baseline_interp_augment(bar.landmarks, 7, rest=bar.rest)
    pairs = [e.parents for e in ds.entries if e.provenance == "baseline-interp"]
    assert [pairs.count(p) for p in [(0, 1), (0, 2), (1, 2)]] == [3, 2, 2]


def test_translated_copies_blend_is_fixed_point(bar):
    A = bar.landmarks[0]
    B = A.with_vertices(A.vertices + [0.3, 0.0, -0.2])
    ds = baseline_interp_augment([A, B], 1, with_energy_projection=True, rest=bar.rest)
    e = ds.entries[-1]
    assert e.report["t"] == 0.5
    np.testing.assert_allclose(e.vertices, A.vertices + [0.15, 0.0, -0.1], atol=1e-12)


def test_energy_baseline_never_increases(bar):
    ds = baseline_interp_augment(bar.landmarks[:2], 10, with_energy_projection=True, rest=bar.rest, iters=20)
    blends = [e for e in ds.entries if e.provenance == "baseline-interp"]
    assert len({e.report["t"] for e in blends}) == 10
    for e in blends:
        h = e.report["history"]
        assert np.all(np.diff(h) <= 0)
        assert e.report["energyPrePost"][1] <= e.report["energyPrePost"][0]


def test_pairwise_descent_matches_direct_energy(bar):
    A, B = bar.landmarks[:2]
    ca, cb = ArapContext(A), ArapContext(B)
    start = 0.5 * (A.vertices + B.vertices)
    W, hist = pairwise_energy_descent(ca, cb, start, iters=5)
    assert hist[-1] == pytest.approx(energy(ca, W) + energy(cb, W), rel=1e-12)


# -- sampling ---------------------------------------------------------------------

def test_generate_deterministic_and_topology(run, bar):
    _, model, _ = run
    a = generate(model, 100, np.random.default_rng(7))
    b = generate(model, 100, np.random.default_rng(7))
    assert len(a) == 100
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.vertices, y.vertices)
        np.testing.assert_array_equal(x.faces, bar.rest.faces)
    assert generate(model, 0, np.random.default_rng(0)) == []
    assert np.all(np.isfinite(model.decode(np.zeros(3))))


def test_interpolate_endpoints_and_refinement(run, bar):
    _, model, _ = run
    a, b = bar.landmarks[0], bar.landmarks[1]
    two = interpolate(model, a, b, 2)
    la, _ = model.encode(a.vertices)
    lb, _ = model.encode(b.vertices)
    assert len(two) == 2
    np.testing.assert_allclose(two[0].vertices, model.decode(la), atol=1e-12)
    np.testing.assert_allclose(two[1].vertices, model.decode(lb), atol=1e-12)
    gaps = []
    for steps in (30, 300, 3000):
        fr = np.stack([m.vertices for m in interpolate(model, a, b, steps)])
        gaps.append(np.abs(np.diff(fr, axis=0)).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < gaps[0] / 50
