import numpy as np
import pytest

from wavesplit import tensor as T
from wavesplit.cluster import KMeansConfig
from wavesplit.errors import ContractViolation, FormatError
from wavesplit.model import (ModelConfig, SeparationStackConfig, SpeakerCentroids, SpeakerStackConfig,
                             WavesplitModel, load_checkpoint, preset, read_checkpoint, save_checkpoint,
                             separate, separation_stack_forward, speaker_stack_forward)


@pytest.fixture(scope="module")
def desk():
    return WavesplitModel(preset("desk"), seed=0)


def tiny(seed=0, film=True):
    cfg = ModelConfig(SpeakerStackConfig(3, 8, 4, 2), SeparationStackConfig(4, 8, 2, film=film,
                                                                             dilation_cycle=2), 6)
    return WavesplitModel(cfg, seed=seed)


def test_presets():
    d, p = preset("desk"), preset("paper")
    assert d.speaker.dilations() == [2 ** l for l in range(8)] and d.speaker.channels == 64
    assert d.speaker.latent_dim == 64 and d.separation.layers == 20
    assert d.separation.dilations() == [2 ** (l % 10) for l in range(20)]
    assert p.speaker.dilations()[-1] == 2 ** 13 and p.speaker.channels == 512
    assert p.separation.layers == 40 and p.speaker.latent_dim == 512
    with pytest.raises(ContractViolation):
        preset("laptop")


def test_speaker_stack_shape_and_unit_norm(desk):
    x = np.random.default_rng(0).normal(scale=0.1, size=100)
    h = speaker_stack_forward(x, desk).data
    assert h.shape == (100, 2, 64)
    np.testing.assert_allclose(np.linalg.norm(h, axis=-1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(h, speaker_stack_forward(x, desk).data)


def test_speaker_stack_rejects_empty(desk):
    with pytest.raises(ContractViolation):
        speaker_stack_forward(np.zeros(0), desk)


def test_separation_stack_outputs_per_layer(desk):
    rng = np.random.default_rng(1)
    x = rng.normal(scale=0.1, size=200)
    c = rng.normal(size=(2, 64))
    outs = separation_stack_forward(x, c, desk)
    assert len(outs) == 20 and all(o.shape == (200, 2) for o in outs)
    swapped = separation_stack_forward(x, c[::-1], desk)[-1].data
    assert not np.allclose(outs[-1].data, swapped)
    dropped = separation_stack_forward(x, np.stack([c[0], np.zeros(64)]), desk)[-1].data
    assert dropped.shape == (200, 2) and np.all(np.isfinite(dropped))


def test_separation_rejects_wrong_centroids(desk):
    with pytest.raises(ContractViolation):
        separation_stack_forward(np.zeros(10), np.zeros((3, 64)), desk)


def test_separate_untrained(desk):
    x = np.random.default_rng(2).normal(scale=0.1, size=400)
    res = separate(x, desk)
    assert res.estimates.shape == (400, 2) and np.all(np.isfinite(res.estimates))
    assert res.centroids.provenance == "kmeans"
    assert np.all(np.linalg.norm(res.centroids.values, axis=1) <= 1 + 1e-5)
    again = separate(x, desk)
    np.testing.assert_array_equal(res.estimates, again.estimates)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia_history, res.inertia_history[1:]))


def test_separate_rejects_mismatched_kmeans(desk):
    with pytest.raises(ContractViolation):
        separate(np.zeros(10), desk, KMeansConfig(3))


def test_separation_commutes_with_input_gain():
    m = tiny()
    rng = np.random.default_rng(3)
    x, c = rng.normal(scale=0.1, size=64), rng.normal(size=(2, 4))
    a = separation_stack_forward(x, c, m)[-1].data
    b = separation_stack_forward(8.0 * x, c, m)[-1].data
    np.testing.assert_allclose(b, 8.0 * a, rtol=1e-4, atol=1e-6)


def test_time_shift_locality():
    m = tiny()
    rf = sum(2 * d for d in m.cfg.speaker.dilations())
    rng = np.random.default_rng(4)
    x = np.zeros(200, dtype=np.float32)
    x[40:160] = rng.normal(size=120)
    shifted = np.roll(x, 1)          # moves a zero across the boundary, RMS unchanged
    h, hs = speaker_stack_forward(x, m).data, speaker_stack_forward(shifted, m).data
    inner = slice(rf + 1, 200 - rf - 1)
    np.testing.assert_allclose(hs[1:][inner], h[:-1][inner], atol=1e-5)


def test_parameter_names_unique_and_additive_mode():
    film, additive = tiny(film=True), tiny(film=False)
    names = list(film.parameters())
    assert len(names) == len(set(names))
    assert any("film_scale" in n for n in names)
    assert not any("film_scale" in n for n in additive.parameters())
    assert film.alpha.item() == 1.0 and film.beta.item() == 0.0


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = tiny(seed=5)
    for t in m.parameters().values():
        t.data = t.data + np.float32(0.01)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    back = load_checkpoint(path)
    assert back.cfg == m.cfg
    for name, t in m.parameters().items():
        assert np.array_equal(back.parameters()[name].data, t.data), name
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    raw = path.read_bytes()
    assert raw[:4] == b"WSPL" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_format_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        read_checkpoint(bad)
    m = tiny()
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, m)
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-10])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "cut.ckpt")


def test_centroid_object_is_accepted(desk):
    c = SpeakerCentroids(np.ones((2, 64), np.float32) / 8, "training-aggregate")
    assert separation_stack_forward(np.ones(20), c, desk)[-1].shape == (20, 2)
