import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glass.arap import ArapContext, energy
from glass.datasets import articulated_bar, bend
from glass.vae import (FORMAT_TAG, VAR_FLOOR, Adam, Dense, LossBreakdown, TrainingError, VaeModel, load_model,
                       loss, loss_and_grad, save_model, train_step)


def tiny_model(mesh, seed=0, K=2):
    return VaeModel.for_mesh(mesh, latent_dim=K, encoder_hidden=(5,), decoder_hidden=(5,), seed=seed)


def tiny_batch(mesh, rng, b=3, amp=0.1):
    return mesh.vertices + amp * rng.standard_normal((b, mesh.n_vertices, 3))


# -- inference ------------------------------------------------------------------

def test_zero_final_layer_gives_zero_mean(tetra):
    m = tiny_model(tetra)
    m.encoder.weights[-1][:] = 0.0
    m.encoder.biases[-1][: m.latent_dim] = 0.0
    mu, var = m.encode(tetra.vertices * 1.3)
    np.testing.assert_array_equal(mu, 0.0)
    assert np.all(var > 0)


def test_encode_is_deterministic_and_positive(small_bar):
    m = VaeModel.for_mesh(small_bar, latent_dim=4, seed=1)
    w = bend(small_bar, 0.5).vertices
    a, b = m.encode(w), m.encode(w)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert np.all(a[1] >= VAR_FLOOR)


def test_variance_floor_with_very_negative_raw(tetra):
    m = tiny_model(tetra)
    m.encoder.weights[-1][:] = 0.0
    m.encoder.biases[-1][m.latent_dim:] = -800.0
    _, var = m.encode(tetra.vertices)
    np.testing.assert_allclose(var, VAR_FLOOR)


def test_dimension_errors(tetra):
    m = tiny_model(tetra)
    with pytest.raises(ValueError):
        m.encode(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        m.decode(np.zeros(3))
    with pytest.raises(ValueError):
        m.decoder_jacobian(np.zeros(1))


def test_sample_latent_degenerate_variance(tetra):
    m = tiny_model(tetra)
    mu = np.array([0.3, -1.2])
    z = m.sample_latent(mu, np.full(2, VAR_FLOOR))
    np.testing.assert_allclose(z, mu, atol=1e-2)


def test_sample_latent_reproducible(tetra):
    m = tiny_model(tetra, seed=9)
    state = m.rng.bit_generator.state
    z1 = m.sample_latent(np.zeros(2), np.ones(2))
    z2 = m.sample_latent(np.zeros(2), np.ones(2))
    assert not np.array_equal(z1, z2)
    m.rng.bit_generator.state = state
    np.testing.assert_array_equal(m.sample_latent(np.zeros(2), np.ones(2)), z1)
    np.testing.assert_array_equal(m.sample_latent(np.zeros(2), np.ones(2)), z2)


def test_sample_latent_monte_carlo(tetra):
    m = tiny_model(tetra, K=3, seed=4)
    Z = np.array([m.sample_latent(np.zeros(3), np.ones(3)) for _ in range(10_000)])
    assert np.all(np.abs(Z.mean(axis=0)) <= 0.05)
    assert np.all(np.abs(Z.var(axis=0) - 1.0) <= 0.1)


def test_zero_decoder_is_constant_bias_image(tetra):
    m = tiny_model(tetra)
    for W in m.decoder.weights:
        W[:] = 0.0
    m.decoder.biases[-1][:] = np.arange(12) * 0.1
    a = m.decode(np.array([0.0, 0.0]))
    b = m.decode(np.array([3.0, -2.0]))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, (np.arange(12) * 0.1).reshape(4, 3) * m.scale + m.center)
    np.testing.assert_array_equal(m.decoder_jacobian(np.ones(2)), 0.0)


def test_decode_continuous_and_finite(small_bar):
    m = VaeModel.for_mesh(small_bar, latent_dim=4, seed=2)
    z = np.random.default_rng(0).standard_normal(4)
    prev = np.inf
    for eps in (1e-1, 1e-3, 1e-5, 1e-7):
        d = np.abs(m.decode(z + eps * np.eye(4)[0]) - m.decode(z)).max()
        assert d <= prev
        prev = d
    assert prev < 1e-5
    big = m.decode_batch(10.0 * np.eye(4))
    assert np.all(np.isfinite(big))


# -- Jacobian ---------------------------------------------------------------------

def test_linear_decoder_jacobian_is_weight_matrix(tetra):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((12, 3))
    m = VaeModel(4, 3, encoder_hidden=(4,), scale=1.0, decoder=Dense([M], [np.zeros(12)]))
    np.testing.assert_array_equal(m.decoder_jacobian(rng.standard_normal(3)), M)


@pytest.mark.parametrize("seed", range(20))
def test_decoder_jacobian_finite_differences(seed, small_bar):
    rng = np.random.default_rng(seed)
    m = VaeModel.for_mesh(small_bar, latent_dim=4, encoder_hidden=(16,), decoder_hidden=(16, 32), seed=seed)
    z = rng.standard_normal(4)
    J = m.decoder_jacobian(z)
    h = 1e-5
    fd = np.column_stack([(m.decode(z + h * e) - m.decode(z - h * e)).ravel() / (2 * h) for e in np.eye(4)])
    assert np.linalg.norm(J - fd) <= 1e-4 * np.linalg.norm(fd)


# -- losses -----------------------------------------------------------------------

def _fd_loss_grad(m, batch, eps, ctxs, sigma, gaussian, h=1e-6):
    out = []
    for p in m.params():
        g = np.zeros_like(p)
        flat, gf = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            lp = loss(m, batch, ctxs, sigma, eps, gaussian=gaussian).total
            flat[k] = old - h
            lm = loss(m, batch, ctxs, sigma, eps, gaussian=gaussian).total
            flat[k] = old
            gf[k] = (lp - lm) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("gaussian", ["per-sample", "batch"])
@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_finite_differences(seed, gaussian, tetra):
    rng = np.random.default_rng(seed)
    m = tiny_model(tetra, seed=seed)
    batch = tiny_batch(tetra, rng)
    eps = rng.standard_normal((3, 2))
    ctxs = [ArapContext(tetra.with_vertices(w)) for w in tiny_batch(tetra, rng, amp=0.05)]
    sigma = 0.7
    _, grads = loss_and_grad(m, batch, ctxs, sigma, eps, gaussian=gaussian)
    fd = _fd_loss_grad(m, batch, eps, ctxs, sigma, gaussian)
    g, f = np.concatenate([x.ravel() for x in grads]), np.concatenate([x.ravel() for x in fd])
    assert np.linalg.norm(g - f) <= 1e-4 * np.linalg.norm(f)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 100.0), st.sampled_from(["per-sample", "batch"]))
def test_loss_recombination(seed, sigma, gaussian):
    from glass.datasets import tube
    mesh = tube(4, 5, length=1.0, radius=0.2)[0]
    rng = np.random.default_rng(seed)
    m = tiny_model(mesh, seed=seed % 1000)
    rep = loss(m, tiny_batch(mesh, rng), ArapContext(mesh), sigma, gaussian=gaussian)
    assert isinstance(rep, LossBreakdown)
    assert rep.total == pytest.approx(rep.reconstruction + rep.gaussian + sigma * rep.deformation, abs=1e-9)
    assert rep.reconstruction >= 0 and rep.gaussian >= 0 and rep.deformation >= 0


def test_gaussian_term_zero_at_standard_posterior(tetra):
    m = tiny_model(tetra)
    m.encoder.weights[-1][:] = 0.0
    m.encoder.biases[-1][:2] = 0.0
    m.encoder.biases[-1][2:] = np.log(np.expm1(1.0 - VAR_FLOOR))
    rep = loss(m, tiny_batch(tetra, np.random.default_rng(0)))
    assert rep.gaussian == pytest.approx(0.0, abs=1e-20)


def test_batch_gaussian_closed_form(tetra):
    m = tiny_model(tetra, K=2)
    m.encoder.weights[-1][:] = 0.0
    m.encoder.biases[-1][:2] = 0.0
    m.encoder.biases[-1][2:] = np.log(np.expm1(1.0 - VAR_FLOOR))
    eps = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0]])
    rep = loss(m, tiny_batch(tetra, np.random.default_rng(0)), eps=eps, gaussian="batch")
    zbar = eps.mean(axis=0)
    C = np.cov(eps.T)
    assert rep.gaussian == pytest.approx(zbar @ zbar + np.sum((C - np.eye(2)) ** 2), rel=1e-12)


def test_loss_rejects_single_item_batch(tetra):
    m = tiny_model(tetra)
    with pytest.raises(ValueError):
        loss(m, tetra.vertices[None])
    with pytest.raises(ValueError):
        loss(m, tiny_batch(tetra, np.random.default_rng(0)), gaussian="kl")


def test_deformation_term_zero_for_rest_reconstruction(tetra):
    # a decoder whose output is the normalised rest pose for every code
    m = tiny_model(tetra)
    for W in m.decoder.weights:
        W[:] = 0.0
    m.decoder.biases[-1][:] = m.normalize(tetra.vertices)[0]
    rep = loss(m, np.stack([tetra.vertices, tetra.vertices]), ArapContext(tetra), sigma=1.0)
    assert rep.reconstruction == pytest.approx(0.0, abs=1e-24)
    assert rep.deformation == pytest.approx(0.0, abs=1e-24)


# -- training ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def bar_data():
    ds = articulated_bar()
    return ds.rest, np.stack([w.vertices for w in ds.landmarks])


def _train(rest, data, steps, sigma, seed=0):
    m = VaeModel.for_mesh(rest, latent_dim=3, encoder_hidden=(32,), decoder_hidden=(32,), seed=seed)
    opt = Adam(m.params())
    ctx = ArapContext(rest)
    reports = []
    for _ in range(steps):
        m, rep = train_step(m, data, opt, sigma=sigma, contexts=ctx if sigma else None)
        reports.append(rep)
    return m, reports


def test_training_reduces_reconstruction(bar_data):
    rest, data = bar_data
    m, reps = _train(rest, data, 500, 0.0)
    first = loss(VaeModel.for_mesh(rest, 3, (32,), (32,), seed=0), data, eps=np.zeros((3, 3))).reconstruction
    last = loss(m, data, eps=np.zeros((3, 3))).reconstruction
    assert last <= first / 10
    mu, _ = m.encode_batch(data)
    assert np.linalg.norm(mu[0] - mu[1]) > 0


def test_training_is_deterministic(bar_data):
    rest, data = bar_data
    a = [r.total for r in _train(rest, data, 30, 1.0)[1]]
    b = [r.total for r in _train(rest, data, 30, 1.0)[1]]
    assert a == b


def test_large_sigma_lowers_deformation(bar_data):
    rest, data = bar_data
    ctx = ArapContext(rest)
    res = {}
    for sigma in (0.0, 1e3):
        m, _ = _train(rest, data, 400, sigma)
        res[sigma] = loss(m, data, ctx, eps=np.zeros((3, 3))).deformation
    assert res[1e3] < res[0.0]


def test_adam_rejects_non_finite(tetra):
    m = tiny_model(tetra)
    opt = Adam(m.params())
    bad = [np.full_like(p, np.nan) for p in m.params()]
    with pytest.raises(TrainingError):
        opt.step(m.params(), bad)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    ref = [x.copy() for x in p]
    opt = Adam(p, lr=1e-2, clip_norm=1.0)
    m = [np.zeros_like(x) for x in p]
    v = [np.zeros_like(x) for x in p]
    for t in range(1, 6):
        g = [rng.standard_normal(x.shape) for x in p]
        norm = np.sqrt(sum(np.sum(x * x) for x in g))
        scale = min(1.0, 1.0 / norm)
        for i in range(2):
            gi = g[i] * scale
            m[i] = 0.9 * m[i] + 0.1 * gi
            v[i] = 0.999 * v[i] + 0.001 * gi * gi
            ref[i] = ref[i] - 1e-2 * (m[i] / (1 - 0.9 ** t)) / (np.sqrt(v[i] / (1 - 0.999 ** t)) + 1e-8)
        opt.step(p, g)
    for a, b in zip(p, ref):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_bar):
    m = VaeModel.for_mesh(small_bar, latent_dim=4, seed=3)
    m.rng.standard_normal(7)
    path = tmp_path / "model.glassvae"
    save_model(m, path, extra={"note": 1})
    import json
    assert json.loads(path.read_text())["format"] == FORMAT_TAG
    m2, extra = load_model(path, with_extra=True)
    assert extra == {"note": 1}
    for a, b in zip(m.params(), m2.params()):
        np.testing.assert_array_equal(a, b)
    z = np.ones(4)
    np.testing.assert_array_equal(m.decode(z), m2.decode(z))
    np.testing.assert_array_equal(m.rng.standard_normal(3), m2.rng.standard_normal(3))
    np.testing.assert_array_equal(m2.faces, small_bar.faces)


def test_checkpoint_rejects_wrong_tag(tmp_path, tetra):
    import json
    path = tmp_path / "m.json"
    save_model(tiny_model(tetra), path)
    d = json.loads(path.read_text())
    d["format"] = "other-v0"
    path.write_text(json.dumps(d))
    with pytest.raises(ValueError, match="glassvae-v1"):
        load_model(path)
