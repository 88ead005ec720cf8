import io

import numpy as np
import pytest

from wavesplit import data as D
from wavesplit import train as TR
from wavesplit.errors import ContractViolation, NumericError
from wavesplit.model import (ModelConfig, SeparationStackConfig, SpeakerStackConfig, WavesplitModel,
                             load_checkpoint)
from wavesplit.objective import LossWeights


@pytest.fixture(scope="module")
def corpus():
    return D.generate_corpus(D.CorpusConfig(n_train=12, n_valid=3, n_test=20, duration_s=1.0))


def tiny(corpus, seed=0):
    cfg = ModelConfig(SpeakerStackConfig(3, 8, 4, 2), SeparationStackConfig(3, 8, 2, dilation_cycle=3),
                      len(corpus.train_speakers))
    return WavesplitModel(cfg, seed=seed)


def cfg(**kw):
    base = dict(batch_size=2, window_len=6000, steps=4, valid_every=2, log_every=1)
    return TR.TrainConfig(**{**base, **kw})


def test_config_contracts():
    with pytest.raises(ContractViolation):
        TR.TrainConfig(window_len=5999)
    with pytest.raises(ContractViolation):
        TR.TrainConfig(steps=0)
    with pytest.raises(ContractViolation):
        TR.TrainConfig(lr=-1.0)


def test_static_stream_visits_every_replica_once_per_epoch(corpus):
    exs = corpus.train[:3]
    stream = TR.static_stream(exs, len(exs[0]), np.random.default_rng(0))
    seen = [(next(stream).id, ) for _ in range(6)]
    assert len(seen) == 6
    ids = [ex.id for ex in exs]
    first = [next(TR.static_stream(exs, 6000, np.random.default_rng(s))) for s in range(3)]
    assert all(w.id in ids and len(w) == 6000 for w in first)
    with pytest.raises(ContractViolation):
        next(TR.static_stream([], 6000, np.random.default_rng(0)))


def test_train_logs_validates_and_checkpoints(corpus, tmp_path):
    model = tiny(corpus)
    log = io.StringIO()
    ckpt = tmp_path / "m.ckpt"
    res = TR.train(model, corpus.train, cfg(checkpoint=str(ckpt)), corpus.speaker_index, corpus.valid, log)
    lines = log.getvalue().splitlines()
    assert lines[0] == TR.LOG_HEADER and len(lines) == 5
    assert [s for s, _ in res.validations] == [2, 4]
    assert res.best_valid == max(v for _, v in res.validations)
    back = load_checkpoint(ckpt)
    for name, p in back.parameters().items():
        np.testing.assert_array_equal(p.data, res.best_params[name])


def test_train_is_seeded(corpus):
    runs = []
    for _ in range(2):
        m = tiny(corpus)
        TR.train(m, corpus.train, cfg(steps=2, valid_every=100), corpus.speaker_index)
        runs.append({k: p.data.copy() for k, p in m.parameters().items()})
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_loss_decreases_on_fixed_batch(corpus):
    m = tiny(corpus)
    from wavesplit.nn import AdamState
    batch = D.collate([D.sample_window(ex, 6000, np.random.default_rng(0)) for ex in corpus.train[:2]],
                      corpus.speaker_index)
    c = cfg(weights=LossWeights(noise_std=0.0, speaker_dropout_rate=0.0, speaker_mixup_rate=0.0), lr=3e-3)
    state = AdamState(lr=c.lr)
    first = TR.train_step(m, batch, c, state, np.random.default_rng(0)).total
    for _ in range(15):
        last = TR.train_step(m, batch, c, state, np.random.default_rng(0)).total
    assert last < first


def test_dynamic_mixing_and_epoch(corpus):
    m = tiny(corpus)
    res = TR.train(m, corpus.train, cfg(steps=2, dynamic_mixing=True), corpus.speaker_index,
                   recordings=corpus.recordings)
    assert len(res.history) == 2 and res.best_step == 2
    stats = TR.train_epoch(tiny(corpus), corpus.train[:2], cfg(), corpus.speaker_index)
    assert np.isfinite(stats.total)


def test_non_finite_loss_aborts(corpus):
    m = tiny(corpus)
    next(iter(m.parameters().values())).data[...] = np.nan
    with pytest.raises(NumericError, match="step 1"):
        TR.train(m, corpus.train, cfg(steps=1), corpus.speaker_index)


def test_mismatched_source_count_rejected(corpus):
    c3 = D.generate_corpus(D.CorpusConfig(n_train=2, n_valid=0, n_test=0, duration_s=1.0, n_sources=3))
    with pytest.raises(ContractViolation):
        TR.train(tiny(corpus), c3.train, cfg(steps=1), c3.speaker_index)


def test_restore(corpus):
    a, b = tiny(corpus, 0), tiny(corpus, 1)
    TR.restore(b, {k: p.data for k, p in a.parameters().items()})
    for k, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, b.parameters()[k].data)


def test_concatenate_pair_alternates_dominance(corpus):
    groups, notes = TR.concat_groups(corpus.test, 4)
    assert not notes and len(groups) == 4
    joined = TR.concatenate_pair(groups[0])
    n = len(groups[0][0])
    assert len(joined) == 4 * n
    np.testing.assert_array_equal(joined.mixture, joined.sources[:, 0] + joined.sources[:, 1])
    rms = np.sqrt(np.mean(joined.sources.reshape(4, n, 2).astype(np.float64) ** 2, axis=1))
    loud = np.argmax(rms, axis=1)
    assert all(loud[k] != loud[k + 1] for k in range(3))
    assert joined.speakers.tolist() == sorted(joined.speakers.tolist())


def test_concat_groups_skips_short_pairs(corpus):
    groups, notes = TR.concat_groups(corpus.test, 10)
    assert len(groups) == 2 and not notes
    groups, notes = TR.concat_groups(corpus.test[:15], 10)
    assert len(groups) == 1 and "5 sequences < factor 10" in notes[0]
    with pytest.raises(ContractViolation):
        TR.concat_groups(corpus.test, 0)


def test_concat_stress_eval_with_oracle_inference(corpus):
    class Oracle:
        def __init__(self, refs):
            self.estimates = refs

    lookup = {}
    for f in (1, 4):
        for g in (TR.concat_groups(corpus.test, f)[0] if f > 1 else [[e] for e in corpus.test]):
            ex = TR.concatenate_pair(g) if f > 1 else g[0]
            lookup[ex.mixture.tobytes()] = ex.sources
    fn = lambda x, m: Oracle(lookup[np.asarray(x, np.float32).tobytes()] + 1e-3)
    r1 = TR.concat_stress_eval(None, corpus.test, 1, fn)
    r4 = TR.concat_stress_eval(None, corpus.test, 4, fn)
    assert len(r1.examples) == 20 and len(r4.examples) == 4
    assert r1.mean_dsi_sdr > 20 and r4.mean_dsi_sdr > 20
