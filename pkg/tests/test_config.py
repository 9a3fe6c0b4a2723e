import pytest
from hypothesis import given, settings, strategies as st

from glass.config import ConfigError, RunConfig


def test_defaults():
    cfg = RunConfig()
    assert cfg.vae.latent_dim == 8
    assert cfg.vae.encoder_hidden == [256, 128] and cfg.vae.decoder_hidden == [128, 256]
    assert cfg.vae.lr == 1e-3 and cfg.vae.clip_norm == 10.0
    ex = cfg.explorer
    assert (ex.k, ex.s, ex.delta, ex.gamma, ex.alpha_cap, ex.proj_threshold, ex.proj_max_iters) == \
        (5, 16, 0.05, 0.5, 2.0, 1e-5, 500)
    assert cfg.pipeline.epochs_per_round == 200
    assert cfg.pipeline.augmentations_per_round == 0  # one per landmark
    assert cfg.pipeline.warm_start and not cfg.pipeline.exclude_nonconverged


def test_toml_round_trip(tmp_path):
    cfg = RunConfig(seed=11).with_overrides(["vae.latent_dim=4", "explorer.gamma=0.25",
                                              'paths.landmarks=["a.obj", "b.obj"]'])
    p = tmp_path / "c.toml"
    p.write_text(cfg.to_toml())
    back = RunConfig.load(p)
    assert back == cfg
    assert back.hash() == cfg.hash()
    text = p.read_text()
    for section in ("[vae]", "[explorer]", "[pipeline]", "[paths]"):
        assert section in text


@settings(max_examples=30)
@given(st.integers(1, 64), st.floats(1e-6, 1.0), st.integers(0, 2**63 - 1))
def test_hash_tracks_content(k, delta, seed):
    a = RunConfig(seed=seed).with_overrides([f"vae.latent_dim={k}", f"explorer.delta={delta!r}"])
    b = RunConfig.from_dict(a.to_dict())
    assert a.hash() == b.hash()
    c = b.with_overrides([f"vae.latent_dim={k + 1}"])
    assert c.hash() != a.hash()


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"vae": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["vae.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["vae.latent_dim"])
    p = tmp_path / "bad.toml"
    p.write_text("[vae\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_invalid_values_rejected():
    with pytest.raises((ConfigError, ValueError)):
        RunConfig().with_overrides(["explorer.gamma=2.0"])
    with pytest.raises((ConfigError, ValueError)):
        RunConfig().with_overrides(['vae.gaussian="kl"'])
    with pytest.raises((ConfigError, ValueError)):
        RunConfig().with_overrides(['vae.deformation_base="other"'])


def test_override_value_parsing():
    cfg = RunConfig().with_overrides(["pipeline.warm_start=false", "vae.sigma=0", "paths.out=runs/a"])
    assert cfg.pipeline.warm_start is False
    assert cfg.vae.sigma == 0
    assert cfg.paths.out == "runs/a"
