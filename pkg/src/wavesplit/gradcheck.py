"""Finite-difference gradient checks for every differentiable op, block and loss.

Each check builds float64 inputs from a seed and a closure returning a scalar
loss; analytic gradients from the tape are compared with central differences
``(f(x + h) - f(x - h)) / 2h``.  The error of one input tensor is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` and counts as
a pass below ``tol`` (or when both gradients are below ``atol``).  Op-level
inputs are kept at least ``10 h`` away from the kinks of PReLU and the
clamps; inside whole networks, coordinates whose difference step crosses a
kink are detected through the recorded branch decisions and skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import objective as O
from . import tensor as T
from .tensor import Tape, Tensor, precision

H = 1e-3
TOL = 1e-3
ATOL = 1e-7
MAX_COORDS = 12   # finite differences on at most this many sampled coordinates per tensor
MODEL_COORDS = 4  # whole-model checks have ~30 tensors; fresh coordinates are drawn every seed

Check = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


@dataclass
class GradCheckResult:
    name: str
    seed: int
    max_rel_error: float
    worst_input: str
    passed: bool
    seconds: float
    skipped: int = 0


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away(rng, shape, margin=10 * H, scale=1.0) -> np.ndarray:
    """Normal samples pushed at least ``margin`` away from zero."""
    x = rng.normal(scale=scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _scalarize(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> float:
    scale = max(float(np.abs(analytic).max(initial=0)), float(np.abs(numeric).max(initial=0)))
    if scale < atol:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_function(fn: Callable[[], Tensor], inputs: dict[str, Tensor], rng: np.random.Generator,
                   h: float = H, max_coords: int | None = MAX_COORDS) -> tuple[float, str, int]:
    """Largest per-tensor relative error between tape gradients and central differences.

    A coordinate whose +-h evaluations take a different branch than the base
    point (PReLU side, clamp mask, argmin) straddles a kink; its difference
    quotient is not a derivative estimate, so it is skipped and counted.
    Returns (error, worst input name, skipped coordinates).
    """
    for t in inputs.values():
        t.grad = None
    with T.record_branches() as base, Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst, worst_name, skipped = 0.0, "", 0
    for name, t in inputs.items():
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.permutation(n)
        limit = n if max_coords is None else min(n, max_coords)
        flat = t.data.reshape(-1)
        used, numeric = [], []
        for i in coords:
            if len(used) == limit:
                break
            orig = flat[i]
            flat[i] = orig + h
            with T.record_branches() as bp:
                plus = fn().item()
            flat[i] = orig - h
            with T.record_branches() as bm:
                minus = fn().item()
            flat[i] = orig
            if not (_same_branches(base, bp) and _same_branches(base, bm)):
                skipped += 1
                continue
            used.append(i)
            numeric.append((plus - minus) / (2 * h))
        if not used:
            continue
        err = relative_error(analytic_full.reshape(-1)[used], np.array(numeric))
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name, skipped


# checks ------------------------------------------------------------------------------------
def _elementwise(op, low=None, margin_at=None):
    def build(rng):
        shape = (3, 4)
        if low is not None:
            x = rng.uniform(low, low + 2.0, size=shape)
        elif margin_at is not None:
            x = margin_at + _away(rng, shape)
        else:
            x = rng.normal(size=shape)
        xt = _leaf(x)
        r = _scalarize(rng, shape)
        return (lambda: T.tsum(op(xt) * r)), {"x": xt}
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = _leaf(rng.normal(size=(3, 4)))
        b = _leaf(rng.uniform(0.5, 2.0, size=(4,)) if positive_b else rng.normal(size=(4,)))
        r = _scalarize(rng, (3, 4))
        return (lambda: T.tsum(op(a, b) * r)), {"a": a, "b": b}
    return build


def _reduce(op):
    def build(rng):
        x = _leaf(rng.normal(size=(2, 3, 4)))
        out_shape = op(x).shape
        r = _scalarize(rng, out_shape)
        return (lambda: T.tsum(op(x) * r)), {"x": x}
    return build


def _getitem(rng):
    x = _leaf(rng.normal(size=(4, 5)))
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 4, 0]))  # repeated row exercises accumulation
    r = _scalarize(rng, (4,))
    return (lambda: T.tsum(T.getitem(x, idx) * r)), {"x": x}


def _concat_stack(rng):
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 3)))
    r1, r2 = _scalarize(rng, (4, 3)), _scalarize(rng, (2, 2, 3))
    return (lambda: T.tsum(T.concat([a, b], 0) * r1) + T.tsum(T.stack([a, b], 1) * r2)), {"a": a, "b": b}


def _matmul(rng):
    a, w = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(4, 5)))
    b2 = _leaf(rng.normal(size=(2, 4, 2)))
    r1, r2 = _scalarize(rng, (2, 3, 5)), _scalarize(rng, (2, 3, 2))
    return (lambda: T.tsum(T.matmul(a, w) * r1) + T.tsum(T.matmul(a, b2) * r2)), {"a": a, "w": w, "b": b2}


def _linear(rng):
    x, w, b = _leaf(rng.normal(size=(2, 5, 3))), _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4,)))
    r = _scalarize(rng, (2, 5, 4))
    return (lambda: T.tsum(T.linear(x, w, b) * r)), {"x": x, "weight": w, "bias": b}


def _conv(dilation, batched=True):
    def build(rng):
        shape = (2, 9, 3) if batched else (9, 3)
        x = _leaf(rng.normal(size=shape))
        w, b = _leaf(rng.normal(size=(3, 3, 4))), _leaf(rng.normal(size=(4,)))
        r = _scalarize(rng, shape[:-1] + (4,))
        return (lambda: T.tsum(T.conv1d_dilated(x, w, b, dilation) * r)), {"x": x, "weight": w, "bias": b}
    return build


def _layer_norm(rng):
    x = _leaf(rng.normal(size=(2, 5, 6)))
    g, s = _leaf(rng.normal(size=(6,))), _leaf(rng.normal(size=(6,)))
    r = _scalarize(rng, (2, 5, 6))
    return (lambda: T.tsum(T.layer_norm(x, g, s) * r)), {"x": x, "gain": g, "shift": s}


def _prelu(rng):
    x = _leaf(_away(rng, (5, 6)))
    a = _leaf(rng.uniform(0.05, 0.5, size=(6,)))
    r = _scalarize(rng, (5, 6))
    return (lambda: T.tsum(T.prelu(x, a) * r)), {"x": x, "slope": a}


def _prelu_layer_norm(rng):
    x = _leaf(_away(rng, (2, 5, 6)))
    a, g, s = (_leaf(rng.uniform(0.05, 0.5, size=(6,))), _leaf(rng.normal(size=(6,))),
               _leaf(rng.normal(size=(6,))))
    r = _scalarize(rng, (2, 5, 6))
    return (lambda: T.tsum(T.prelu_layer_norm(x, a, g, s) * r)), {"x": x, "slope": a, "gain": g, "shift": s}


def _l2(rng):
    x = _leaf(rng.normal(size=(3, 2, 5)))
    r = _scalarize(rng, (3, 2, 5))
    return (lambda: T.tsum(T.l2_normalize(x) * r)), {"x": x}


def _lse(rng):
    x = _leaf(rng.normal(scale=3.0, size=(3, 5)))
    r = _scalarize(rng, (3,))
    return (lambda: T.tsum(T.log_sum_exp(x, axis=-1) * r)), {"x": x}


def _block_inputs(rng, C=4):
    # the PReLU input here is a conv output, so the kink margin cannot be enforced;
    # a crossing perturbs only one summand out of many and stays far below the tolerance
    return rng.normal(size=(2, 9, C))


def _residual(rng):
    p = nn.ResidualBlockParams(_leaf(rng.normal(size=(3, 4, 4))), _leaf(rng.normal(size=(4,))),
                               _leaf(rng.uniform(0.05, 0.5, size=4)), _leaf(rng.normal(size=4)),
                               _leaf(rng.normal(size=4)), dilation=2)
    x = _leaf(_block_inputs(rng))
    r = _scalarize(rng, (2, 9, 4))
    return (lambda: T.tsum(nn.residual_block(x, p) * r)), {"x": x, **p.tensors("block")}


def _film(film: bool):
    def build(rng):
        base = nn.ResidualBlockParams(_leaf(rng.normal(size=(3, 4, 4))), _leaf(rng.normal(size=(4,))),
                                      _leaf(rng.uniform(0.05, 0.5, size=4)), _leaf(rng.normal(size=4)),
                                      _leaf(rng.normal(size=4)), dilation=1)
        lin = lambda: nn.LinearParams(_leaf(rng.normal(size=(6, 4))), _leaf(rng.normal(size=4)))
        p = nn.FiLMBlockParams(**vars(base), scale=lin() if film else None, bias_proj=lin())
        x, c = _leaf(_block_inputs(rng)), _leaf(rng.normal(size=(2, 6)))
        r = _scalarize(rng, (2, 9, 4))
        return (lambda: T.tsum(nn.film_residual_block(x, c, p) * r)), {"x": x, "c": c, **p.tensors("block")}
    return build


def _speaker_loss(variant):
    def build(rng):
        B, L, N, d, M = 2, 5, 3, 4, 6
        h = _leaf(rng.normal(size=(B, L, N, d)))
        E = _leaf(rng.normal(size=(M, d)))
        alpha, beta = _leaf([rng.uniform(0.5, 2.0)]), _leaf([rng.normal()])
        spk = np.stack([rng.choice(M, N, replace=False) for _ in range(B)])
        fn = lambda: O.speaker_loss(h, spk, E, variant, alpha, beta)[0]
        inputs = {"h": h, "embedding": E}
        if variant != "distance":
            inputs.update(alpha=alpha, beta=beta)
        return fn, inputs
    return build


def _reconstruction(rng):
    y = rng.normal(size=(2, 20, 2))
    outs = [_leaf(y + rng.normal(scale=s, size=y.shape)) for s in (0.5, 1.0, 0.2)]
    return (lambda: O.reconstruction_loss(outs, y, tau=30.0)), {f"layer{i}": o for i, o in enumerate(outs)}


def _clipped(rng):
    # one channel reconstructed almost perfectly: its SDR is above tau and contributes no gradient
    y = rng.normal(size=(30, 2))
    est = y + np.stack([rng.normal(scale=1e-3, size=30), rng.normal(scale=0.5, size=30)], axis=1)
    o = _leaf(est)
    return (lambda: O.reconstruction_loss([o], y, tau=20.0)), {"layer0": o}


def _embed_reg(rng):
    E = _leaf(rng.normal(size=(6, 4)))
    return (lambda: O.embedding_entropy_reg(E)), {"embedding": E}


def _regularized_centroids(rng):
    c = _leaf(rng.normal(size=(3, 2, 4)))
    seed = int(rng.integers(2 ** 31))
    w = O.LossWeights(speaker_dropout_rate=0.5, speaker_mixup_rate=0.7)
    r = _scalarize(rng, (3, 2, 4))
    # a fresh generator per call keeps the random draws identical across evaluations
    return (lambda: T.tsum(O.regularize_centroids(c, w, np.random.default_rng(seed)) * r)), {"c": c}


def _total_loss(variant, film=True):
    def build(rng):
        from .data import Batch
        from .model import ModelConfig, SeparationStackConfig, SpeakerStackConfig, WavesplitModel

        # 16 channels: with very few channels some layer-norm rows have near-zero variance and
        # the loss curves too sharply for a 1e-3 difference step
        cfg = ModelConfig(SpeakerStackConfig(2, 16, 4, 2), SeparationStackConfig(2, 16, 2, film=film), 5)
        model = WavesplitModel(cfg, seed=int(rng.integers(2 ** 31)))
        for p in model.parameters().values():   # move off the initialization so no bias sits at zero
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        B, L = 2, 16
        y = rng.normal(scale=0.5, size=(B, L, 2))
        spk = np.stack([rng.choice(5, 2, replace=False) for _ in range(B)])
        batch = Batch(y.sum(axis=-1), y, spk)
        seed = int(rng.integers(2 ** 31))
        w = O.LossWeights(loss_variant=variant)
        # the per-timestep assignment is piecewise constant; pin the one chosen at the
        # unperturbed point so a difference step never jumps to another piece
        perms = O.total_loss(batch, model, w, np.random.default_rng(seed)).perms
        fn = lambda: O.total_loss(batch, model, w, np.random.default_rng(seed), perms=perms).total
        return fn, dict(model.parameters())
    return build


CHECKS: dict[str, Check] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _elementwise(T.neg),
    "power": _elementwise(lambda x: T.power(x, 1.7), low=0.5),
    "square": _elementwise(T.square),
    "sqrt": _elementwise(T.sqrt, low=0.5),
    "exp": _elementwise(T.exp),
    "log": _elementwise(T.log, low=0.5),
    "clamp_min": _elementwise(lambda x: T.clamp_min(x, 0.3), margin_at=0.3),
    "clamp_max": _elementwise(lambda x: T.clamp_max(x, -0.2), margin_at=-0.2),
    "sum": _reduce(lambda x: T.tsum(x, axis=(0, 2))),
    "mean": _reduce(lambda x: T.mean(x, axis=1, keepdims=True)),
    "reshape": _reduce(lambda x: T.reshape(x, (6, 4))),
    "transpose": _reduce(lambda x: T.transpose(x, (2, 0, 1))),
    "getitem": _getitem,
    "concat_stack": _concat_stack,
    "matmul": _matmul,
    "linear": _linear,
    "conv1d_dilated": _conv(1),
    "conv1d_dilated_d3": _conv(3),
    "conv1d_dilated_unbatched": _conv(2, batched=False),
    "layer_norm": _layer_norm,
    "prelu": _prelu,
    "prelu_layer_norm": _prelu_layer_norm,
    "l2_normalize": _l2,
    "log_sum_exp": _lse,
    "residual_block": _residual,
    "film_residual_block": _film(True),
    "additive_residual_block": _film(False),
    "speaker_loss_distance": _speaker_loss("distance"),
    "speaker_loss_local": _speaker_loss("local"),
    "speaker_loss_global": _speaker_loss("global"),
    "reconstruction_loss": _reconstruction,
    "reconstruction_loss_clipped": _clipped,
    "embedding_entropy_reg": _embed_reg,
    "regularize_centroids": _regularized_centroids,
    "total_loss_global": _total_loss("global"),
    "total_loss_local": _total_loss("local"),
    "total_loss_distance": _total_loss("distance"),
    "total_loss_additive": _total_loss("global", film=False),
}


def run_check(name: str, seed: int, h: float = H, tol: float = TOL) -> GradCheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.time()
    with precision(np.float64):
        fn, inputs = CHECKS[name](rng)
        coords = MODEL_COORDS if name.startswith("total_loss") else MAX_COORDS
        err, worst, skipped = check_function(fn, inputs, rng, h, coords)
    return GradCheckResult(name, seed, err, worst, err <= tol, time.time() - t0, skipped)


def run_gradchecks(seeds=range(20), names=None, h: float = H, tol: float = TOL) -> list[GradCheckResult]:
    return [run_check(n, s, h, tol) for n in (names or list(CHECKS)) for s in seeds]


def format_table(results: list[GradCheckResult]) -> str:
    """One line per check: worst error over seeds and the verdict."""
    by_name: dict[str, list[GradCheckResult]] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    lines = [f"{'check':<28}{'seeds':>6}{'max_rel_err':>14}{'kink_skips':>12}  verdict"]
    for name, rs in by_name.items():
        worst = max(rs, key=lambda r: r.max_rel_error)
        verdict = "pass" if all(r.passed for r in rs) else f"FAIL (seed {worst.seed}, {worst.worst_input})"
        skips = sum(r.skipped for r in rs)
        lines.append(f"{name:<28}{len(rs):>6}{worst.max_rel_error:>14.2e}{skips:>12}  {verdict}")
    return "\n".join(lines)
