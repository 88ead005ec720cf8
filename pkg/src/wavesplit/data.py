"""Synthetic multi-speaker corpus, mixing, dynamic mixing, windowing and replication.

Synthetic "speakers" are harmonic voices with a speaker-specific pitch band,
timbre (harmonic decay), vibrato and syllable-rate envelope, so that identity
is learnable from the waveform and test speakers can be held out.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractViolation, FormatError

SOURCE_RMS = 0.1
MIN_REF_RMS = 1e-4
SPLITS = ("train", "valid", "test")
PAIR_BLOCK = 10
FLOOR_DB = -40.0  # background floor relative to the voiced signal; recordings are never digitally silent


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    f_lo: float
    f_hi: float
    decay: float           # amplitude ratio between successive harmonics
    vibrato_rate: float    # Hz
    vibrato_depth: float   # fraction of f0
    envelope_rate: float   # Hz, syllable-like amplitude modulation

    @property
    def center(self) -> float:
        return float(np.sqrt(self.f_lo * self.f_hi))


@dataclass
class MixtureExample:
    mixture: np.ndarray        # (T,)
    sources: np.ndarray        # (T, N), scaled clean references
    speakers: np.ndarray       # (N,) speaker ids
    sample_rate: int = 8000
    id: str = ""
    noise: np.ndarray | None = None
    padded: bool = False

    @property
    def n_sources(self) -> int:
        return self.sources.shape[1]

    def __len__(self) -> int:
        return len(self.mixture)


@dataclass
class Batch:
    mixture: np.ndarray   # (B, T)
    sources: np.ndarray   # (B, T, N)
    speakers: np.ndarray  # (B, N) rows of the embedding table


def collate(examples: list[MixtureExample], speaker_index: dict[int, int] | None = None) -> Batch:
    spk = np.stack([e.speakers for e in examples])
    if speaker_index is not None:
        spk = np.vectorize(speaker_index.__getitem__)(spk)
    return Batch(np.stack([e.mixture for e in examples]),
                 np.stack([e.sources for e in examples]), spk.astype(np.int64))


# speakers and sources --------------------------------------------------------------
def make_speakers(n_speakers: int, seed: int = 0, f_min: float = 95.0, f_max: float = 330.0,
                  band_ratio: float = 1.085) -> list[SyntheticSpeaker]:
    """``n_speakers`` voices (ids 1..n) with log-spaced pitch bands (+-``band_ratio`` around each center)."""
    rng = np.random.default_rng(seed)
    centers = np.geomspace(f_min, f_max, n_speakers)
    decays = rng.permutation(np.linspace(0.35, 0.8, n_speakers))
    speakers = []
    for i, c in enumerate(centers):
        speakers.append(SyntheticSpeaker(
            id=i + 1, f_lo=float(c / band_ratio), f_hi=float(c * band_ratio), decay=float(decays[i]),
            vibrato_rate=float(rng.uniform(4.0, 7.0)), vibrato_depth=float(rng.uniform(0.005, 0.015)),
            envelope_rate=float(rng.uniform(2.5, 5.0))))
    return speakers


def band_overlap(a: SyntheticSpeaker, b: SyntheticSpeaker) -> float:
    """Overlap of two pitch bands as a fraction of the narrower band."""
    inter = min(a.f_hi, b.f_hi) - max(a.f_lo, b.f_lo)
    return max(inter, 0.0) / min(a.f_hi - a.f_lo, b.f_hi - b.f_lo)


def _phrase_gate(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    gate = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.2) * sr)
    on = True
    while pos < n:
        dur = int((rng.uniform(0.5, 1.4) if on else rng.uniform(0.08, 0.3)) * sr)
        if on:
            seg = np.ones(min(dur, n - pos))
            ramp = min(int(0.01 * sr), len(seg) // 2)
            if ramp > 0:
                r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
                seg[:ramp] *= r
                seg[len(seg) - ramp:] *= r[::-1]
            gate[pos:pos + len(seg)] = seg
        pos += dur
        on = not on
    if not gate.any():
        gate[:] = 1.0
    return gate


def synth_source(speaker: SyntheticSpeaker, n_samples: int, seed: int,
                 sample_rate: int = 8000) -> np.ndarray:
    """Harmonic voice with phrase on/off structure, normalized to RMS 0.1 (float32)."""
    if n_samples < 1:
        raise ContractViolation("synth_source needs n_samples >= 1")
    nyquist = sample_rate / 2
    if speaker.f_hi >= nyquist:
        raise ContractViolation(f"speaker band {speaker.f_hi} Hz is above Nyquist {nyquist} Hz")
    rng = np.random.default_rng(seed)
    t = np.arange(n_samples) / sample_rate
    # pitch: base within the band, slow glide, vibrato; clipped to stay inside the band
    depth = speaker.vibrato_depth
    lo, hi = speaker.f_lo * (1 + depth), speaker.f_hi * (1 - depth)
    start, end = rng.uniform(lo, hi, size=2)
    glide = start + (end - start) * (0.5 - 0.5 * np.cos(np.pi * t / max(t[-1], 1e-9)))
    f0 = glide * (1 + depth * np.sin(2 * np.pi * speaker.vibrato_rate * t + rng.uniform(0, 2 * np.pi)))
    f0 = np.clip(f0, speaker.f_lo, speaker.f_hi)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = max(1, int(0.9 * nyquist // speaker.f_hi))
    k = np.arange(1, n_harm + 1)
    amps = speaker.decay ** (k - 1)
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    voice = np.sin(phase[:, None] * k[None, :] + offsets[None, :]) @ amps
    env = 0.65 + 0.35 * np.sin(2 * np.pi * speaker.envelope_rate * t + rng.uniform(0, 2 * np.pi))
    sig = voice * env * _phrase_gate(n_samples, sample_rate, rng)
    sig = sig + 10.0 ** (FLOOR_DB / 20.0) * np.std(voice) * rng.normal(size=n_samples)
    rms = np.sqrt(np.mean(sig ** 2))
    return (sig * (SOURCE_RMS / rms)).astype(np.float32)


def pink_noise(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """1/f noise by spectral shaping of white noise, unit RMS."""
    spectrum = np.fft.rfft(rng.normal(size=n_samples))
    f = np.arange(len(spectrum), dtype=np.float64)
    f[0] = 1.0
    noise = np.fft.irfft(spectrum / np.sqrt(f), n=n_samples)
    return noise / np.sqrt(np.mean(noise ** 2))


# mixtures ---------------------------------------------------------------------------
def make_mixture(sources, gains_db, speakers, noise: np.ndarray | None = None,
                 noise_gain_db: float | None = None, sample_rate: int = 8000,
                 id: str = "") -> MixtureExample:
    """Scale each source by 10**(g/20) and sum; references are the scaled clean sources."""
    srcs = [np.asarray(s, dtype=np.float32) for s in sources]
    if len({len(s) for s in srcs}) != 1:
        raise ContractViolation(f"sources have different lengths {[len(s) for s in srcs]}")
    if len(gains_db) != len(srcs) or len(speakers) != len(srcs):
        raise ContractViolation("need one gain and one speaker id per source")
    if len(set(int(s) for s in speakers)) != len(srcs):
        raise ContractViolation(f"speaker ids must be distinct, got {list(speakers)}")
    scaled = np.stack([s * np.float32(10.0 ** (g / 20.0)) for s, g in zip(srcs, gains_db)], axis=1)
    mix = np.zeros(len(srcs[0]), dtype=np.float32)
    for i in range(scaled.shape[1]):
        mix += scaled[:, i]
    scaled_noise = None
    if noise is not None:
        if len(noise) != len(mix):
            raise ContractViolation("noise length differs from sources")
        gain = 10.0 ** ((noise_gain_db or 0.0) / 20.0)
        scaled_noise = (np.asarray(noise) * gain).astype(np.float32)
        mix = mix + scaled_noise
    return MixtureExample(mix, scaled, np.asarray(speakers, dtype=np.int64), sample_rate, id, scaled_noise)


def sample_window(example: MixtureExample, window_len: int, rng: np.random.Generator) -> MixtureExample:
    """Crop mixture, references and noise at one uniformly drawn start offset.

    A window longer than the example is zero-padded at the end and flagged.
    """
    n = len(example)
    if window_len >= n:
        if window_len == n:
            return example
        pad = window_len - n

        def grow(a):
            return None if a is None else np.concatenate([a, np.zeros((pad,) + a.shape[1:], a.dtype)])

        return replace(example, mixture=grow(example.mixture), sources=grow(example.sources),
                       noise=grow(example.noise), padded=True)
    start = int(rng.integers(0, n - window_len + 1))
    sl = slice(start, start + window_len)
    return replace(example, mixture=example.mixture[sl], sources=example.sources[sl],
                   noise=None if example.noise is None else example.noise[sl])


def permutation_replicate(example: MixtureExample) -> list[MixtureExample]:
    """One copy per ordering of the targets (sources and speaker ids permuted together)."""
    out = []
    for perm in itertools.permutations(range(example.n_sources)):
        p = list(perm)
        out.append(replace(example, sources=example.sources[:, p], speakers=example.speakers[p]))
    return out


# corpus -------------------------------------------------------------------------------
@dataclass
class CorpusConfig:
    n_train_speakers: int = 10
    n_test_speakers: int = 4
    n_train: int = 500
    n_valid: int = 50
    n_test: int = 50
    duration_s: float = 4.0
    sample_rate: int = 8000
    n_sources: int = 2
    gain_range_db: float = 2.5
    band_ratio: float = 1.085   # adjacent bands overlap ~43%, so train voices cover the pitch range
    noisy: bool = False
    snr_range_db: tuple[float, float] = (0.0, 10.0)
    seed: int = 0


@dataclass
class Corpus:
    cfg: CorpusConfig
    speakers: dict[int, SyntheticSpeaker]
    train_speakers: list[int]
    test_speakers: list[int]
    train: list[MixtureExample] = field(default_factory=list)
    valid: list[MixtureExample] = field(default_factory=list)
    test: list[MixtureExample] = field(default_factory=list)
    # unscaled clean recordings of the train speakers, the pool for dynamic mixing
    recordings: dict[int, list[np.ndarray]] = field(default_factory=dict)

    @property
    def speaker_index(self) -> dict[int, int]:
        """Speaker id -> embedding-table row (train speakers only)."""
        return {s: i for i, s in enumerate(self.train_speakers)}


def held_out_positions(n_total: int, n_test: int) -> list[int]:
    """Test speakers interleaved across the pitch range, never at the extremes."""
    return sorted({int(round(x)) for x in np.linspace(1, n_total - 2, n_test)})


def _draw_example(spk_ids, speakers, cfg: CorpusConfig, rng, ex_id, recordings=None):
    n = int(round(cfg.duration_s * cfg.sample_rate))
    srcs = []
    for s in spk_ids:
        src = synth_source(speakers[int(s)], n, int(rng.integers(2 ** 31)), cfg.sample_rate)
        srcs.append(src)
        if recordings is not None:
            recordings.setdefault(int(s), []).append(src)
    gains = rng.uniform(-cfg.gain_range_db, cfg.gain_range_db, size=len(spk_ids))
    noise, noise_db = None, None
    if cfg.noisy:
        clean = sum(s * 10 ** (g / 20) for s, g in zip(srcs, gains))
        snr = rng.uniform(*cfg.snr_range_db)
        noise = pink_noise(n, rng)
        noise_db = 20 * np.log10(np.sqrt(np.mean(clean ** 2))) - snr
    return make_mixture(srcs, gains, spk_ids, noise, noise_db, cfg.sample_rate, ex_id)


def generate_corpus(cfg: CorpusConfig | None = None) -> Corpus:
    """Train/valid share the train speakers; test uses held-out speakers only.

    Test examples come in blocks of ``PAIR_BLOCK`` consecutive mixtures per
    held-out speaker combination, so the long-sequence evaluation finds ten
    same-pair sequences for as many combinations as the test size allows.
    """
    cfg = cfg or CorpusConfig()
    total = cfg.n_train_speakers + cfg.n_test_speakers
    speakers = {s.id: s for s in make_speakers(total, seed=cfg.seed, band_ratio=cfg.band_ratio)}
    test_ids = [p + 1 for p in held_out_positions(total, cfg.n_test_speakers)]
    train_ids = [i for i in sorted(speakers) if i not in test_ids]
    if len(train_ids) < cfg.n_sources or len(test_ids) < cfg.n_sources:
        raise ContractViolation("not enough speakers for the requested number of sources")
    rng = np.random.default_rng(cfg.seed + 1)
    corpus = Corpus(cfg, speakers, train_ids, test_ids)
    for split, count in (("train", cfg.n_train), ("valid", cfg.n_valid)):
        for k in range(count):
            ids = rng.choice(train_ids, size=cfg.n_sources, replace=False)
            rec = corpus.recordings if split == "train" else None
            getattr(corpus, split).append(_draw_example(ids, speakers, cfg, rng, f"{split}{k:04d}", rec))
    combos = list(itertools.combinations(test_ids, cfg.n_sources))
    for k in range(cfg.n_test):
        ids = np.array(combos[(k // PAIR_BLOCK) % len(combos)])
        corpus.test.append(_draw_example(rng.permutation(ids), speakers, cfg, rng, f"test{k:04d}"))
    return corpus


def dynamic_mix(recordings: dict[int, list[np.ndarray]], rng: np.random.Generator, window_len: int,
                n_sources: int = 2, gain_range_db: float = 2.5,
                sample_rate: int = 8000) -> Iterator[MixtureExample]:
    """Endless stream of fresh mixtures from random windows of the train recordings."""
    ids = sorted(recordings)
    if len(ids) < n_sources:
        raise ContractViolation(f"dynamic mixing needs >= {n_sources} speakers, corpus has {len(ids)}")
    count = 0
    while True:
        chosen = rng.choice(ids, size=n_sources, replace=False)
        windows, padded = [], False
        for s in chosen:
            pool = recordings[int(s)]
            rec = pool[int(rng.integers(len(pool)))]
            if len(rec) <= window_len:
                padded |= len(rec) < window_len
                windows.append(np.pad(rec, (0, window_len - len(rec))))
            else:
                start = int(rng.integers(0, len(rec) - window_len + 1))
                windows.append(rec[start:start + window_len])
        # a window can land inside a pause; redraw silent windows so SDR stays defined
        if any(np.sqrt(np.mean(np.square(w, dtype=np.float64))) < MIN_REF_RMS for w in windows):
            continue
        gains = rng.uniform(-gain_range_db, gain_range_db, size=n_sources)
        ex = make_mixture(windows, gains, chosen, sample_rate=sample_rate, id=f"dyn{count:07d}")
        ex.padded = padded
        count += 1
        yield ex


# on-disk corpora ------------------------------------------------------------------------
def export_corpus(corpus: Corpus, out_dir) -> Path:
    """Write every example's references (and noise, if any) as WAVs plus ``manifest.tsv``."""
    from .wavio import ManifestEntry, wav_write, write_manifest

    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        for ex in getattr(corpus, split):
            files = []
            for i in range(ex.n_sources):
                rel = Path("wav") / f"{ex.id}.src{i + 1}.wav"
                wav_write(out / rel, ex.sources[:, i], ex.sample_rate)
                files.append(rel)
            if ex.noise is not None:
                wav_write(out / "wav" / f"{ex.id}.noise.wav", ex.noise, ex.sample_rate)
            entries.append(ManifestEntry(ex.id, split, [int(s) for s in ex.speakers], files))
    write_manifest(out / "manifest.tsv", entries)
    return out / "manifest.tsv"


def load_manifest_split(path, split: str, skip_missing: bool = False) -> tuple[list[MixtureExample], int]:
    """Examples of one split, the mixture rebuilt as the sum of the stored references
    (plus ``<id>.noise.wav`` next to the first source when present).

    With ``skip_missing`` entries whose reference files are absent are
    skipped and counted instead of raising.
    """
    from .wavio import read_manifest, wav_read

    examples, skipped = [], 0
    for e in read_manifest(path):
        if e.split != split:
            continue
        if skip_missing and not all(p.exists() for p in e.sources):
            skipped += 1
            continue
        srcs, rates = zip(*(wav_read(p) for p in e.sources))
        if len(set(rates)) != 1:
            raise FormatError(f"{e.id}: sources have different sample rates {rates}")
        noise_path = e.sources[0].parent / f"{e.id}.noise.wav"
        noise = wav_read(noise_path)[0] if noise_path.exists() else None
        examples.append(make_mixture(srcs, [0.0] * len(srcs), e.speakers, noise, 0.0, rates[0], e.id))
    return examples, skipped


def load_manifest_examples(path) -> dict[str, list[MixtureExample]]:
    return {split: load_manifest_split(path, split)[0] for split in SPLITS}


def recordings_from(examples: list[MixtureExample]) -> dict[int, list[np.ndarray]]:
    """Per-speaker pool of reference signals, the raw material for dynamic mixing."""
    pool: dict[int, list[np.ndarray]] = {}
    for ex in examples:
        for i, s in enumerate(ex.speakers):
            pool.setdefault(int(s), []).append(ex.sources[:, i])
    return pool
