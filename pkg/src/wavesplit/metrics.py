"""SDR / SI-SDR, permutation-maximized quality and corpus evaluation reports."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractViolation, FormatError

EPS = 1e-12
MAX_PERMUTED_SOURCES = 8


def _f64(a) -> np.ndarray:
    return np.asarray(getattr(a, "data", a), dtype=np.float64)


def sdr(est, ref) -> float:
    """-10 log10(||ref - est||^2 + eps) + 10 log10(||ref||^2)."""
    est, ref = _f64(est), _f64(ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise ContractViolation("SDR undefined for a zero-energy reference")
    err = ref - est
    return -10.0 * math.log10(float(np.dot(err, err)) + EPS) + 10.0 * math.log10(ref_energy)


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR: project ``est`` on ``ref`` and compare target to residual energy."""
    est, ref = _f64(est), _f64(ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise ContractViolation("SI-SDR undefined for a zero-energy reference")
    target = (float(np.dot(est, ref)) / ref_energy) * ref
    resid = est - target
    return 10.0 * math.log10((float(np.dot(target, target)) + EPS) / (float(np.dot(resid, resid)) + EPS))


def permuted_quality(est, ref, metric: Callable = si_sdr) -> tuple[float, tuple[int, ...]]:
    """max over channel permutations of the channel-mean metric.

    ``est`` and ``ref`` are (T, N); returns (value, sigma) where estimate
    channel ``sigma[i]`` is matched with reference channel ``i``.
    """
    est, ref = _f64(est), _f64(ref)
    if est.ndim == 1:
        est, ref = est[:, None], ref[:, None]
    if est.shape != ref.shape:
        raise ContractViolation(f"estimate {est.shape} and reference {ref.shape} differ")
    N = ref.shape[1]
    if N > MAX_PERMUTED_SOURCES:
        raise ContractViolation(f"refusing exhaustive search over {N}! permutations")
    scores = np.array([[metric(est[:, j], ref[:, i]) for i in range(N)] for j in range(N)])
    best_val, best_perm = -math.inf, tuple(range(N))
    for perm in itertools.permutations(range(N)):
        val = float(np.mean([scores[perm[i], i] for i in range(N)]))
        if val > best_val:
            best_val, best_perm = val, perm
    return best_val, best_perm


@dataclass
class ExampleScore:
    id: str
    sdr: float
    si_sdr: float
    dsdr: float
    dsi_sdr: float
    perm: tuple[int, ...]


@dataclass
class EvalReport:
    examples: list[ExampleScore] = field(default_factory=list)
    skipped: int = 0
    notes: list[str] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        vals = [getattr(e, attr) for e in self.examples]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_sdr(self) -> float:
        return self._mean("sdr")

    @property
    def mean_si_sdr(self) -> float:
        return self._mean("si_sdr")

    @property
    def mean_dsdr(self) -> float:
        return self._mean("dsdr")

    @property
    def mean_dsi_sdr(self) -> float:
        return self._mean("dsi_sdr")

    def to_text(self) -> str:
        lines = [f"{e.id}\t{e.sdr:.6f}\t{e.si_sdr:.6f}\t{e.dsdr:.6f}\t{e.dsi_sdr:.6f}\t"
                 f"{','.join(str(p) for p in e.perm)}" for e in self.examples]
        lines += [f"#note\t{n}" for n in self.notes]
        lines.append(f"#mean\t{self.mean_sdr:.6f}\t{self.mean_si_sdr:.6f}\t{self.mean_dsdr:.6f}\t"
                     f"{self.mean_dsi_sdr:.6f}\tn={len(self.examples)}\tskipped={self.skipped}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        report = cls()
        for line in text.splitlines():
            if line.startswith("#mean"):
                skipped = [f for f in line.split("\t") if f.startswith("skipped=")]
                report.skipped = int(skipped[0].split("=")[1]) if skipped else 0
            elif line.startswith("#note\t"):
                report.notes.append(line[len("#note\t"):])
            elif line.strip():
                parts = line.split("\t")
                if len(parts) != 6:
                    raise FormatError(f"report line has {len(parts)} fields, expected 6: {line!r}")
                perm = tuple(int(p) for p in parts[5].split(","))
                report.examples.append(ExampleScore(parts[0], *map(float, parts[1:5]), perm))
        return report


def score_example(est, ref, mixture, id: str = "") -> ExampleScore:
    """Permutation-maximized SDR / SI-SDR and their improvement over the mixture."""
    ref = _f64(ref)
    baseline = np.repeat(_f64(mixture)[:, None], ref.shape[1], axis=1)
    s, _ = permuted_quality(est, ref, sdr)
    si, perm = permuted_quality(est, ref, si_sdr)
    s0, _ = permuted_quality(baseline, ref, sdr)
    si0, _ = permuted_quality(baseline, ref, si_sdr)
    return ExampleScore(id, s, si, s - s0, si - si0, perm)


def evaluate_estimates(items: Iterable[tuple[str, np.ndarray, np.ndarray, np.ndarray]]) -> EvalReport:
    """Score (id, estimates, references, mixture) tuples into a report."""
    report = EvalReport()
    for id_, est, ref, mix in items:
        report.examples.append(score_example(est, ref, mix, id_))
    return report


def evaluate_corpus(model, examples, separate_fn=None) -> EvalReport:
    """Run inference on every example (k-means path) and score it against its references."""
    from .model import separate

    separate_fn = separate_fn or separate

    def gen():
        for ex in examples:
            result = separate_fn(ex.mixture, model)
            yield ex.id, result.estimates, ex.sources, ex.mixture

    return evaluate_estimates(gen())
