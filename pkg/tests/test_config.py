import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqground import config as C
from seqground.model import ModelConfig


def test_defaults_round_trip():
    cfg = C.RunConfig()
    assert C.loads(C.dumps(cfg)) == cfg


def test_file_round_trip(tmp_path):
    cfg = C.RunConfig(task="res", seed=9, shuffle_mode="cyclic", shuffle_pct=0.2, decay_epochs=(3, 7),
                      model=ModelConfig(bins=32, max_points=12, pooling="mean"))
    C.save(cfg, tmp_path / "a.cfg")
    once = C.load(tmp_path / "a.cfg")
    C.save(once, tmp_path / "b.cfg")
    assert once == cfg and C.load(tmp_path / "b.cfg") == cfg
    assert (tmp_path / "a.cfg").read_text() == (tmp_path / "b.cfg").read_text()


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["rec", "res", "multitask"]), st.integers(0, 10**6), st.floats(1e-6, 1e-2),
       st.lists(st.integers(1, 100), max_size=3), st.sampled_from(["none", "cyclic", "full_permutation"]),
       st.floats(0, 1))
def test_round_trip_property(task, seed, lr, decay, kind, pct):
    cfg = C.RunConfig(task=task, seed=seed, lr=lr, decay_epochs=tuple(decay), shuffle_mode=kind, shuffle_pct=pct)
    assert C.loads(C.dumps(cfg)) == cfg


def test_missing_keys_take_defaults():
    cfg = C.loads("[run]\ntask = res\n")
    assert cfg.task == "res" and cfg.model == ModelConfig() and cfg.lr == C.RunConfig().lr


@pytest.mark.parametrize("text", ["[run]\ntask = detect\n", "[run]\ncolour = red\n", "[extra]\na = 1\n",
                                  "[model]\nhidden = 30\n", "[codec]\nshuffle_pct = 2\n", "[model]\nmax_points = 2\n"])
def test_invalid_configs_rejected(text):
    with pytest.raises(C.ConfigError):
        C.loads(text)


def test_profiles():
    toy, paper = C.profile("toy"), C.profile("paper")
    assert toy.model.image_size == toy.scene_size
    assert (paper.model.bins, paper.model.hidden, paper.model.enc_layers, paper.model.dec_layers) == (1000, 256, 6, 3)
    assert paper.model.token_weights[0] == 1.5 and paper.lr == 5e-4
    with pytest.raises(C.ConfigError):
        C.profile("huge")


def test_scene_radii_scale_with_canvas():
    small, big = C.RunConfig(scene_size=64).scene(), C.RunConfig(scene_size=640).scene()
    assert big.size == 640
    assert big.small_radius == pytest.approx(tuple(10 * r for r in small.small_radius))
    assert big.large_radius == pytest.approx(tuple(10 * r for r in small.large_radius))
