import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavesplit import data as D
from wavesplit.data import CorpusConfig, SyntheticSpeaker
from wavesplit.errors import ContractViolation


@pytest.fixture(scope="module")
def corpus():
    return D.generate_corpus(CorpusConfig(n_train=40, n_valid=6, n_test=20, duration_s=1.0))


@pytest.fixture(scope="module")
def speakers():
    return D.make_speakers(14)


def test_speakers_distinct_and_below_nyquist(speakers):
    assert [s.id for s in speakers] == list(range(1, 15))
    for a, b in itertools.combinations(speakers, 2):
        assert D.band_overlap(a, b) < 0.5
    assert all(s.f_hi < 4000 for s in speakers)


def test_synth_source_deterministic_and_normalized(speakers):
    a = D.synth_source(speakers[3], 8000, seed=7)
    b = D.synth_source(speakers[3], 8000, seed=7)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32
    assert np.sqrt(np.mean(a.astype(np.float64) ** 2)) == pytest.approx(0.1, abs=1e-3)


@pytest.mark.parametrize("idx", [0, 5, 13])
def test_synth_source_spectral_peak_in_band(speakers, idx):
    s = speakers[idx]
    x = D.synth_source(s, 16000, seed=idx).astype(np.float64)
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    freqs = np.fft.rfftfreq(len(x), 1 / 8000)
    peak = freqs[np.argmax(mag)]
    assert s.f_lo <= peak <= s.f_hi


def test_synth_source_contracts(speakers):
    with pytest.raises(ContractViolation):
        D.synth_source(speakers[0], 0, seed=0)
    high = SyntheticSpeaker(99, 3900.0, 4100.0, 0.5, 5.0, 0.01, 3.0)
    with pytest.raises(ContractViolation):
        D.synth_source(high, 100, seed=0)


def test_make_mixture_examples():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=100).astype(np.float32), rng.normal(size=100).astype(np.float32)
    ex = D.make_mixture([a, b], [0.0, 0.0], [1, 2])
    np.testing.assert_array_equal(ex.mixture, a + b)
    half = D.make_mixture([a, b], [-6.0206, 0.0], [1, 2])
    np.testing.assert_allclose(half.sources[:, 0], 0.5 * a, rtol=1e-5)


def test_make_mixture_energy_additivity_for_orthogonal_tones():
    t = np.arange(8000) / 8000
    a, b = np.sin(2 * np.pi * 100 * t), np.sin(2 * np.pi * 300 * t)
    ex = D.make_mixture([a, b], [0.0, 3.0], [1, 2])
    m = ex.mixture.astype(np.float64)
    s = ex.sources.astype(np.float64)
    assert np.sum(m ** 2) == pytest.approx(np.sum(s ** 2), rel=1e-4)


def test_make_mixture_contracts():
    with pytest.raises(ContractViolation):
        D.make_mixture([np.ones(5), np.ones(6)], [0, 0], [1, 2])
    with pytest.raises(ContractViolation):
        D.make_mixture([np.ones(5), np.ones(5)], [0, 0], [1, 1])


def test_noisy_mixture_keeps_clean_references():
    rng = np.random.default_rng(1)
    srcs = [rng.normal(size=50), rng.normal(size=50)]
    noise = D.pink_noise(50, rng)
    ex = D.make_mixture(srcs, [0, 0], [1, 2], noise, -10.0)
    np.testing.assert_allclose(ex.sources[:, 0], srcs[0], rtol=1e-6)
    np.testing.assert_array_equal(ex.mixture, ex.sources[:, 0] + ex.sources[:, 1] + ex.noise)


def test_corpus_split_hygiene(corpus):
    test_ids = set(corpus.test_speakers)
    assert not test_ids & set(corpus.train_speakers)
    for split in ("train", "valid"):
        for ex in getattr(corpus, split):
            assert not set(ex.speakers.tolist()) & test_ids
    for ex in corpus.test:
        assert set(ex.speakers.tolist()) <= test_ids


def test_corpus_invariants(corpus):
    for ex in corpus.train + corpus.valid + corpus.test:
        acc = np.zeros(len(ex), dtype=np.float32)
        for i in range(ex.n_sources):
            acc += ex.sources[:, i]
        assert np.array_equal(ex.mixture, acc)
        assert len(set(ex.speakers.tolist())) == ex.n_sources
        assert np.all(np.sqrt(np.mean(ex.sources.astype(np.float64) ** 2, axis=0)) >= 1e-4)


def test_corpus_default_sizes_and_pair_blocks():
    cfg = CorpusConfig()
    assert (cfg.n_train, cfg.n_valid, cfg.n_test, cfg.n_train_speakers, cfg.n_test_speakers) == (500, 50, 50, 10, 4)
    c = D.generate_corpus(CorpusConfig(n_train=2, n_valid=0, n_test=30, duration_s=0.1))
    pairs = [tuple(sorted(e.speakers.tolist())) for e in c.test]
    for k in range(0, 30, D.PAIR_BLOCK):
        assert len(set(pairs[k:k + D.PAIR_BLOCK])) == 1


def test_corpus_seeded_and_n3():
    cfg = CorpusConfig(n_train=3, n_valid=1, n_test=2, duration_s=0.1, n_sources=3)
    a, b = D.generate_corpus(cfg), D.generate_corpus(cfg)
    assert a.train[0].sources.shape[1] == 3
    np.testing.assert_array_equal(a.test[1].mixture, b.test[1].mixture)


def test_dynamic_mix_determinism_and_distinct_ids(corpus):
    s1 = D.dynamic_mix(corpus.recordings, np.random.default_rng(3), 800)
    s2 = D.dynamic_mix(corpus.recordings, np.random.default_rng(3), 800)
    for _ in range(5):
        a, b = next(s1), next(s2)
        np.testing.assert_array_equal(a.mixture, b.mixture)
    stream = D.dynamic_mix(corpus.recordings, np.random.default_rng(4), 16)
    for _ in range(10000):
        ex = next(stream)
        assert ex.speakers[0] != ex.speakers[1]


def test_dynamic_mix_gain_distribution_uniform(corpus):
    # Recover each draw's gains from the reference/recording level ratio.
    rng = np.random.default_rng(5)
    recs = {s: [np.ones(32, np.float32) * 0.1] for s in corpus.train_speakers}
    stream = D.dynamic_mix(recs, rng, 32, gain_range_db=2.5)
    gains = np.array([20 * np.log10(next(stream).sources[0, 0] / 0.1) for _ in range(10000)])
    u = np.sort((gains + 2.5) / 5.0)
    ks = np.max(np.abs(u - np.arange(1, len(u) + 1) / len(u)))
    assert ks < 0.02


def test_dynamic_mix_pads_short_recordings():
    recs = {1: [np.ones(10, np.float32)], 2: [np.ones(10, np.float32)]}
    ex = next(D.dynamic_mix(recs, np.random.default_rng(0), 16))
    assert ex.padded and len(ex) == 16


def test_dynamic_mix_needs_enough_speakers():
    with pytest.raises(ContractViolation):
        next(D.dynamic_mix({1: [np.ones(10)]}, np.random.default_rng(0), 5))


def test_sample_window(corpus):
    ex = corpus.train[0]
    assert D.sample_window(ex, len(ex), np.random.default_rng(0)) is ex
    w = D.sample_window(ex, 1000, np.random.default_rng(1))
    acc = np.zeros(1000, dtype=np.float32)
    for i in range(ex.n_sources):
        acc += w.sources[:, i]
    assert np.array_equal(w.mixture, acc)
    assert np.array_equal(w.speakers, ex.speakers)
    long = D.sample_window(ex, len(ex) + 5, np.random.default_rng(2))
    assert long.padded and len(long) == len(ex) + 5


def test_sample_window_offsets_uniform():
    T, W = 120, 20
    ex = D.MixtureExample(np.arange(T, dtype=np.float32), np.arange(T, dtype=np.float32)[:, None] * np.ones((1, 2)),
                          np.array([1, 2]))
    rng = np.random.default_rng(6)
    starts = np.array([D.sample_window(ex, W, rng).mixture[0] for _ in range(10000)])
    u = np.sort((starts + 0.5) / (T - W + 1))
    ks = np.max(np.abs(u - np.arange(1, len(u) + 1) / len(u)))
    assert ks < 0.02


@settings(max_examples=10, deadline=None)
@given(N=st.integers(1, 3))
def test_permutation_replicate(N):
    rng = np.random.default_rng(N)
    srcs = [rng.normal(size=20) for _ in range(N)]
    ex = D.make_mixture(srcs, [0.0] * N, list(range(1, N + 1)))
    copies = D.permutation_replicate(ex)
    assert len(copies) == int(np.prod(range(1, N + 1)))
    for c in copies:
        assert np.array_equal(c.mixture, ex.mixture)
        for i in range(N):
            j = int(c.speakers[i]) - 1
            assert np.array_equal(c.sources[:, i], ex.sources[:, j])
    if N == 2:
        assert copies[1].speakers.tolist() == [2, 1]


def test_collate_maps_ids_to_rows(corpus):
    batch = D.collate(corpus.train[:3], corpus.speaker_index)
    assert batch.mixture.shape == (3, len(corpus.train[0]))
    assert batch.speakers.max() < len(corpus.train_speakers) and batch.speakers.min() >= 0


def test_export_and_reload(tmp_path):
    c = D.generate_corpus(CorpusConfig(n_train=3, n_valid=1, n_test=2, duration_s=0.1, noisy=True))
    manifest = D.export_corpus(c, tmp_path)
    splits = D.load_manifest_examples(manifest)
    assert [len(splits[s]) for s in D.SPLITS] == [3, 1, 2]
    ex, orig = splits["test"][1], c.test[1]
    assert ex.id == orig.id and ex.speakers.tolist() == orig.speakers.tolist()
    assert np.max(np.abs(ex.sources - orig.sources)) <= 1 / 32768
    assert ex.noise is not None
    np.testing.assert_allclose(ex.mixture, ex.sources.sum(1) + ex.noise, atol=1e-6)
    (tmp_path / "wav" / f"{orig.id}.src2.wav").unlink()
    kept, skipped = D.load_manifest_split(manifest, "test", skip_missing=True)
    assert skipped == 1 and len(kept) == 1
