"""Desk experiment: train one variant on the synthetic corpus and evaluate it on held-out speakers.

A run directory holds ``model.ckpt`` (validation-best parameters),
``train.log`` and ``result.json``.  ``result.json`` records the
configuration key, so a cached run is only reused for the same settings.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CorpusConfig, generate_corpus
from .metrics import EvalReport
from .model import WavesplitModel, load_checkpoint, preset, separate
from .objective import LossWeights
from .train import TrainConfig, concat_stress_eval, restore, train

VARIANTS = ("base", "no-mixup", "no-film", "static")


@dataclass
class ExperimentConfig:
    variant: str = "base"
    steps: int = 1800
    batch_size: int = 4
    window_len: int = 6000
    lr: float = 2e-3
    seed: int = 0
    valid_every: int = 300
    valid_examples: int = 10
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def train_config(self, checkpoint: str | None) -> TrainConfig:
        w = LossWeights(loss_variant="global")
        if self.variant == "no-mixup":
            w = LossWeights(loss_variant="global", speaker_mixup_rate=0.0)
        return TrainConfig(batch_size=self.batch_size, window_len=self.window_len, steps=self.steps,
                           lr=self.lr, weights=w, dynamic_mixing=self.variant != "static", seed=self.seed,
                           valid_every=self.valid_every, valid_examples=self.valid_examples,
                           checkpoint=checkpoint, sample_rate=self.corpus.sample_rate)


class InertiaLog:
    """separate() wrapper that keeps every k-means inertia trace it produces."""

    def __init__(self):
        self.histories: list[list[float]] = []

    def __call__(self, x, model):
        res = separate(x, model)
        self.histories.append(list(res.inertia_history))
        return res

    def all_monotone(self, tol: float = 1e-9) -> bool:
        return all(b <= a + tol * max(1.0, abs(a)) for h in self.histories for a, b in zip(h, h[1:]))


def evaluate(model: WavesplitModel, corpus, factors=(1,)) -> tuple[dict[int, EvalReport], InertiaLog]:
    log = InertiaLog()
    return {f: concat_stress_eval(model, corpus.test, f, log) for f in factors}, log


def run(cfg: ExperimentConfig, out_dir, factors=(1,), log_stream=None) -> dict:
    """Train (timed) and evaluate one variant; writes the run directory and returns the result record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.corpus)
    mcfg = preset("desk", n_sources=cfg.corpus.n_sources, n_train_speakers=len(corpus.train_speakers),
                  film=cfg.variant != "no-film")
    model = WavesplitModel(mcfg, seed=cfg.seed)
    tc = cfg.train_config(str(out / "model.ckpt"))
    t0 = time.time()
    with open(out / "train.log", "w", encoding="utf-8") as log:
        res = train(model, corpus.train, tc, corpus.speaker_index, corpus.valid, log,
                    recordings=corpus.recordings)
    train_seconds = time.time() - t0
    restore(model, res.best_params)
    reports, inertia = evaluate(model, corpus, factors)
    for f, rep in reports.items():
        rep.write(out / f"test_factor{f}.tsv")
    record = {
        "key": cfg.key(), "variant": cfg.variant, "steps": cfg.steps, "train_seconds": train_seconds,
        "best_step": res.best_step, "validations": res.validations,
        "test_dsi_sdr": {str(f): r.mean_dsi_sdr for f, r in reports.items()},
        "kmeans_runs": len(inertia.histories), "kmeans_monotone": inertia.all_monotone(),
    }
    (out / "result.json").write_text(json.dumps(record, indent=1))
    return record


def load_cached(cfg: ExperimentConfig, out_dir) -> dict | None:
    """The stored result record when ``out_dir`` holds a finished run of exactly ``cfg``."""
    path = Path(out_dir) / "result.json"
    if not path.exists() or not (Path(out_dir) / "model.ckpt").exists():
        return None
    record = json.loads(path.read_text())
    return record if record.get("key") == cfg.key() else None


def reevaluate(cfg: ExperimentConfig, out_dir, factors=(1,)) -> tuple[dict[int, float], InertiaLog]:
    """Load the stored checkpoint and score it again on the regenerated test split."""
    corpus = generate_corpus(cfg.corpus)
    model = load_checkpoint(Path(out_dir) / "model.ckpt")
    reports, inertia = evaluate(model, corpus, factors)
    return {f: r.mean_dsi_sdr for f, r in reports.items()}, inertia
