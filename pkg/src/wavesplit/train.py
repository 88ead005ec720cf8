"""Training loop: shuffled, replicated, windowed batches; Adam; validation; checkpoints;
and the long-sequence concatenation evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, TextIO

import numpy as np

from .data import (Batch, MixtureExample, collate, dynamic_mix, make_mixture, permutation_replicate,
                   recordings_from, sample_window)
from .errors import ContractViolation, NumericError
from .metrics import EvalReport, evaluate_corpus
from .model import WavesplitModel, save_checkpoint, separate
from .nn import AdamState, adam_step, clip_grad_norm
from .objective import LossWeights, total_loss
from .tensor import Tape

MIN_WINDOW_S = 0.75
LOG_HEADER = "step\tloss\tl_spk\tl_rec\tl_reg\tvalid_dsisdr"


@dataclass
class TrainConfig:
    batch_size: int = 8
    window_len: int = 8000
    steps: int = 1000
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    dynamic_mixing: bool = False
    gain_range_db: float = 2.5
    seed: int = 0
    valid_every: int = 500
    valid_examples: int | None = None   # cap on validation examples per check (None = all)
    log_every: int = 50
    checkpoint: str | None = None
    sample_rate: int = 8000
    grad_clip: float | None = None

    def __post_init__(self):
        if self.window_len < int(MIN_WINDOW_S * self.sample_rate):
            raise ContractViolation(f"window_len {self.window_len} is shorter than {MIN_WINDOW_S * 1000:.0f} ms")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractViolation("steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ContractViolation("lr must be non-negative")


@dataclass
class StepStats:
    total: float
    speaker: float
    reconstruction: float
    regularizer: float


def _mean_stats(stats: list[StepStats]) -> StepStats:
    return StepStats(*(float(np.mean([getattr(s, f) for s in stats]))
                       for f in ("total", "speaker", "reconstruction", "regularizer")))


def static_stream(examples: list[MixtureExample], window_len: int,
                  rng: np.random.Generator) -> Iterator[MixtureExample]:
    """Endless epochs: replicate every sequence over target orderings, shuffle, draw one window per visit."""
    if not examples:
        raise ContractViolation("no training examples")
    pool = [r for ex in examples for r in permutation_replicate(ex)]
    while True:
        for i in rng.permutation(len(pool)):
            yield sample_window(pool[i], window_len, rng)


def batches(stream: Iterator[MixtureExample], batch_size: int,
            speaker_index: dict[int, int]) -> Iterator[Batch]:
    while True:
        yield collate([next(stream) for _ in range(batch_size)], speaker_index)


def train_step(model: WavesplitModel, batch: Batch, cfg: TrainConfig, state: AdamState,
               rng: np.random.Generator, step: int = 0) -> StepStats:
    """Forward, backward and one Adam update; aborts on a non-finite loss component."""
    with Tape() as tape:
        lb = total_loss(batch, model, cfg.weights, rng)
    stats = StepStats(lb.total.item(), lb.speaker.item(), lb.reconstruction.item(), lb.regularizer.item())
    for name in ("speaker", "reconstruction", "regularizer", "total"):
        if not math.isfinite(getattr(stats, name)):
            raise NumericError(f"non-finite {name} loss at step {step}")
    model.zero_grad()
    tape.backward(lb.total)
    params = model.parameters()
    grads = {k: p.grad for k, p in params.items()}
    if cfg.grad_clip:
        clip_grad_norm(grads, cfg.grad_clip)
    adam_step(params, grads, state)
    return stats


def train_epoch(model: WavesplitModel, examples: list[MixtureExample], cfg: TrainConfig,
                speaker_index: dict[int, int], state: AdamState | None = None,
                rng: np.random.Generator | None = None) -> StepStats:
    """One shuffled pass over the replicated training set; returns mean loss components."""
    rng = rng or np.random.default_rng(cfg.seed)
    state = state or AdamState(lr=cfg.lr)
    pool = [r for ex in examples for r in permutation_replicate(ex)]
    order = rng.permutation(len(pool))
    stats = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = [sample_window(pool[i], cfg.window_len, rng) for i in order[start:start + cfg.batch_size]]
        stats.append(train_step(model, collate(chunk, speaker_index), cfg, state, rng, len(stats)))
    return _mean_stats(stats)


def validate(model: WavesplitModel, valid_set: list[MixtureExample],
             separate_fn: Callable = separate) -> EvalReport:
    """Full-length sequences through the k-means inference path (labels are never consulted)."""
    return evaluate_corpus(model, valid_set, separate_fn)


@dataclass
class TrainResult:
    history: list[tuple[int, StepStats]] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_valid: float = -math.inf
    best_params: dict[str, np.ndarray] | None = None
    seconds: float = 0.0


def train(model: WavesplitModel, train_set: list[MixtureExample], cfg: TrainConfig,
          speaker_index: dict[int, int], valid_set: list[MixtureExample] | None = None,
          log: TextIO | None = None, recordings: dict[int, list[np.ndarray]] | None = None) -> TrainResult:
    """Fixed step budget; keeps (and optionally checkpoints) the validation-best parameters.

    With ``dynamic_mixing`` every batch is freshly mixed from the training
    references; otherwise epochs over the replicated, windowed training set.
    """
    t0 = time.time()
    rng_data = np.random.default_rng([cfg.seed, 1])
    rng_reg = np.random.default_rng([cfg.seed, 2])
    n_src = model.n_sources
    if any(ex.n_sources != n_src for ex in train_set):
        raise ContractViolation(f"training data and model disagree on N={n_src}")
    if cfg.dynamic_mixing:
        pool = recordings or recordings_from(train_set)
        stream = dynamic_mix(pool, rng_data, cfg.window_len, n_src, cfg.gain_range_db, cfg.sample_rate)
    else:
        stream = static_stream(train_set, cfg.window_len, rng_data)
    state = AdamState(lr=cfg.lr)
    result = TrainResult()
    valid = list(valid_set or [])[:cfg.valid_examples]
    if log is not None:
        log.write(LOG_HEADER + "\n")
    window: list[StepStats] = []
    for step, batch in enumerate(batches(stream, cfg.batch_size, speaker_index), 1):
        window.append(train_step(model, batch, cfg, state, rng_reg, step))
        score = float("nan")
        if valid and (step % cfg.valid_every == 0 or step == cfg.steps):
            score = validate(model, valid).mean_dsi_sdr
            result.validations.append((step, score))
            if score > result.best_valid:
                result.best_valid, result.best_step = score, step
                result.best_params = {k: p.data.copy() for k, p in model.parameters().items()}
                if cfg.checkpoint:
                    save_checkpoint(cfg.checkpoint, model)
        if step % cfg.log_every == 0 or step == cfg.steps or not math.isnan(score):
            m = _mean_stats(window)
            result.history.append((step, m))
            window = []
            if log is not None:
                write_log_line(log, step, m, score)
                log.flush()
        if step >= cfg.steps:
            break
    if result.best_params is None:
        result.best_params = {k: p.data.copy() for k, p in model.parameters().items()}
        result.best_step = cfg.steps
        if cfg.checkpoint:
            save_checkpoint(cfg.checkpoint, model)
    result.seconds = time.time() - t0
    return result


def restore(model: WavesplitModel, params: dict[str, np.ndarray]) -> None:
    for name, p in model.parameters().items():
        p.data = params[name].copy()


# long-sequence evaluation -------------------------------------------------------------
def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a, dtype=np.float64))))


def concatenate_pair(segments: list[MixtureExample]) -> MixtureExample:
    """Join same-pair sequences with the louder speaker alternating between segments.

    Reference channels are ordered by speaker id.  The first segment keeps
    its levels; a later segment whose dominant speaker is the wrong one has
    its two reference levels exchanged.  The mixture of every segment is the
    sum of its (possibly rescaled) references, so the concatenated mixture
    equals the concatenation of the per-segment mixtures.
    """
    if not segments:
        raise ContractViolation("nothing to concatenate")
    ids = sorted(int(s) for s in segments[0].speakers)
    if len(ids) != 2:
        raise ContractViolation("alternating dominance is defined for two-speaker mixtures")
    parts, mixes = [], []
    lead = None
    for k, ex in enumerate(segments):
        if sorted(int(s) for s in ex.speakers) != ids:
            raise ContractViolation("all segments must share the same speaker pair")
        order = [list(ex.speakers).index(s) for s in ids]
        refs = ex.sources[:, order].astype(np.float32)
        if len(segments) > 1:
            r = [_rms(refs[:, 0]), _rms(refs[:, 1])]
            loud = int(r[1] > r[0])
            if lead is None:
                lead = loud
            want = lead if k % 2 == 0 else 1 - lead
            if loud != want:
                refs = refs * np.array([r[1] / r[0], r[0] / r[1]], dtype=np.float32)
        seg = make_mixture([refs[:, 0], refs[:, 1]], [0.0, 0.0], ids, sample_rate=ex.sample_rate)
        parts.append(seg.sources)
        mixes.append(seg.mixture)
    sources = np.concatenate(parts, axis=0)
    mixture = np.concatenate(mixes)
    return MixtureExample(mixture, sources, np.array(ids), segments[0].sample_rate,
                          "+".join(s.id for s in segments))


def concat_groups(test_set: list[MixtureExample], factor: int) -> tuple[list[list[MixtureExample]], list[str]]:
    """Consecutive groups of ``factor`` same-pair sequences; pairs with too few are noted and skipped."""
    if factor < 1:
        raise ContractViolation("concatenation factor must be >= 1")
    by_pair: dict[tuple[int, ...], list[MixtureExample]] = {}
    for ex in test_set:
        by_pair.setdefault(tuple(sorted(int(s) for s in ex.speakers)), []).append(ex)
    groups, notes = [], []
    for pair, exs in sorted(by_pair.items()):
        if len(exs) < factor:
            notes.append(f"skipped pair {pair}: {len(exs)} sequences < factor {factor}")
            continue
        for g in range(len(exs) // factor):
            groups.append(exs[g * factor:(g + 1) * factor])
    return groups, notes


def concat_stress_eval(model: WavesplitModel, test_set: list[MixtureExample], factor: int,
                       separate_fn: Callable = separate) -> EvalReport:
    """Evaluate on sequences ``factor`` times longer, built from same-pair test sequences."""
    if factor == 1:
        return evaluate_corpus(model, test_set, separate_fn)
    groups, notes = concat_groups(test_set, factor)
    report = evaluate_corpus(model, [concatenate_pair(g) for g in groups], separate_fn)
    report.notes.extend(notes)
    report.skipped = len(notes)
    return report


def write_log_line(out: TextIO, step: int, stats: StepStats, valid: float) -> None:
    out.write(f"{step}\t{stats.total:.6f}\t{stats.speaker:.6f}\t{stats.reconstruction:.6f}\t"
              f"{stats.regularizer:.6f}\t{valid:.4f}\n")

