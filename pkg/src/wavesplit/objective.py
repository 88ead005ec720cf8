"""Training losses: permutation-resolved speaker losses, clipped negative SDR,
centroid regularizers and the embedding-separation penalty.

Speaker ids are 0-based row indices into the embedding table.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

LOG10 = float(np.log(10.0))
SDR_EPS = 1e-12
DIST_FLOOR = 1e-12
VARIANTS = ("distance", "local", "global")


@dataclass
class LossWeights:
    speaker_weight: float = 2.0
    embed_reg_weight: float = 0.3
    sdr_clip: float = 30.0
    noise_std: float = 0.2
    speaker_dropout_rate: float = 0.4
    speaker_mixup_rate: float = 0.5
    loss_variant: str = "global"

    def __post_init__(self):
        for name in ("speaker_dropout_rate", "speaker_mixup_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if self.sdr_clip <= 0:
            raise ContractViolation("sdr_clip must be positive")
        if self.loss_variant not in VARIANTS:
            raise ContractViolation(f"loss_variant must be one of {VARIANTS}")


@lru_cache(maxsize=None)
def permutations(n: int) -> np.ndarray:
    """All permutations of range(n), shape (n!, n), in lexicographic order."""
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def _sq_dist(h: Tensor, e: Tensor, clamp: bool = True) -> Tensor:
    """||h_j - e_k||^2 for h (..., J, d) and e (..., K, d) -> (..., J, K).

    The expansion can round slightly below zero; ``clamp`` floors it at 0.
    """
    hh = T.tsum(h * h, axis=-1, keepdims=True)
    ee = T.tsum(e * e, axis=-1, keepdims=True)
    cross = h @ T.transpose(e, tuple(range(e.ndim - 2)) + (e.ndim - 1, e.ndim - 2))
    d = hh - 2.0 * cross + T.transpose(ee, tuple(range(ee.ndim - 2)) + (ee.ndim - 1, ee.ndim - 2))
    return T.clamp_min(d, 0.0) if clamp else d


def scaled_distance(sq: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    return sq * alpha + beta


def pairwise_speaker_losses(h: Tensor, speakers: np.ndarray, embedding: Tensor, variant: str,
                            alpha: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """ell(h_t^j, s_i) for every vector slot j and label i: (B, T, N, N) indexed [b, t, j, i]."""
    B, L, N, d = h.shape
    emb_s = embedding[speakers.reshape(-1)].reshape(B, 1, N, d)
    if variant == "distance":
        near = _sq_dist(h, emb_s)                        # (B, T, N_j, N_i)
        # self-distances sit at ~0 on the (masked) diagonal; no floor needed there
        hinge = T.clamp_min(1.0 - _sq_dist(h, h, clamp=False), 0.0)   # (B, T, N_j, N_k)
        off_diag = 1.0 - np.eye(N, dtype=T.DTYPE)
        spread = T.tsum(hinge * off_diag, axis=-1, keepdims=True)
        return near + spread
    if alpha is None or beta is None:
        raise ContractViolation(f"{variant} classifier loss needs alpha and beta")
    present = scaled_distance(_sq_dist(h, emb_s), alpha, beta)
    if variant == "local":
        partition = T.log_sum_exp(-present, axis=-1, keepdims=True)
    elif variant == "global":
        table = embedding.reshape(1, 1, *embedding.shape)
        every = scaled_distance(_sq_dist(h, table), alpha, beta)
        partition = T.log_sum_exp(-every, axis=-1, keepdims=True)
    else:
        raise ContractViolation(f"unknown speaker loss variant {variant!r}")
    return present + partition


def _check_speakers(speakers: np.ndarray, n_sources: int, n_table: int) -> np.ndarray:
    spk = np.asarray(speakers, dtype=np.int64)
    if spk.shape[-1] != n_sources:
        raise ContractViolation(f"{spk.shape[-1]} speaker ids for {n_sources} sources")
    for row in spk.reshape(-1, n_sources):
        if len(set(row.tolist())) != n_sources:
            raise ContractViolation(f"duplicate speaker ids {row.tolist()} in one example")
    if spk.min() < 0 or spk.max() >= n_table:
        raise ContractViolation(f"speaker id outside embedding table of {n_table} rows")
    return spk


def speaker_loss(h: Tensor, speakers, embedding: Tensor, variant: str = "global",
                 alpha: Tensor | None = None, beta: Tensor | None = None,
                 reduction: str = "sum", perms: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-timestep permutation-resolved speaker loss.

    For every timestep the label assignment with the lowest summed loss is
    selected among all N! permutations; ``perms[..., t, i]`` is the vector
    slot assigned to label ``i``.  Passing ``perms`` pins the assignment
    instead (differentiating inside one assignment region).  With ``reduction="sum"`` the per-sequence
    loss is the sum over time, with ``"mean"`` the average over time; a
    batch is always averaged over sequences.
    """
    batched = h.ndim == 4
    hb = h if batched else h.reshape(1, *h.shape)
    B, L, N, _ = hb.shape
    spk = _check_speakers(speakers, N, embedding.shape[0]).reshape(B, N)
    lmat = pairwise_speaker_losses(hb, spk, embedding, variant, alpha, beta)
    if perms is None:
        perm_table = permutations(N)
        # cost[b, t, p] = sum_i lmat[b, t, perm[p, i], i]
        cost = lmat.data[:, :, perm_table, np.arange(N)].sum(axis=-1)
        best = perm_table[np.argmin(cost, axis=-1)]  # (B, T, N)
        T.note_branch(best)
    else:
        best = np.asarray(perms, dtype=np.int64).reshape(B, L, N)
    bi, ti, li = np.ogrid[:B, :L, :N]
    chosen = T.getitem(lmat, (bi, ti, best, li), unique=True)    # (B, T, N)
    per_seq = T.tsum(chosen, axis=(1, 2))
    if reduction == "mean":
        per_seq = per_seq * (1.0 / L)
    elif reduction != "sum":
        raise ContractViolation(f"unknown reduction {reduction!r}")
    loss = T.mean(per_seq)
    return loss, (best if batched else best[0])


def training_centroids(h: Tensor, perms: np.ndarray) -> Tensor:
    """c_i = mean_t h_t^{perm_t(i)}: label-ordered centroids, (N, d) or (B, N, d)."""
    batched = h.ndim == 4
    hb = h if batched else h.reshape(1, *h.shape)
    pb = perms if batched else perms[None]
    B, L, N, _ = hb.shape
    bi, ti, _ = np.ogrid[:B, :L, :N]
    ordered = T.getitem(hb, (bi, ti, pb), unique=True)  # (B, T, N, d)
    c = T.mean(ordered, axis=1)
    return c if batched else c.reshape(N, c.shape[-1])


def sdr_tensor(est: Tensor, ref: Tensor, axis: int = -1) -> Tensor:
    """Differentiable SDR in dB along ``axis``."""
    ref_energy = np.sum(np.square(ref.data, dtype=np.float64), axis=axis)
    if np.any(ref_energy <= 0):
        raise ContractViolation("SDR undefined for an all-zero reference channel")
    err = T.tsum(T.square(ref - est), axis=axis)
    ref_db = (10.0 / LOG10) * np.log(ref_energy)
    return T.log(err + SDR_EPS) * (-10.0 / LOG10) + ref_db.astype(T.DTYPE)


def reconstruction_loss(per_layer_outputs, y, tau: float = 30.0) -> Tensor:
    """Mean over layers, channels and sequences of -min(tau, SDR(est, ref)).

    Layer outputs and ``y`` are (T, N) or (B, T, N) with label-aligned channels.
    """
    y = T.tensor(y)
    layer_losses = []
    for out in per_layer_outputs:
        if out.shape != y.shape:
            raise ContractViolation(f"layer output {out.shape} does not match references {y.shape}")
        sdr = sdr_tensor(out, y, axis=-2)  # (..., N)
        layer_losses.append(T.mean(-T.clamp_max(sdr, tau)))
    return T.mean(T.stack(layer_losses))


def regularize_centroids(c: Tensor, weights: LossWeights, rng: np.random.Generator,
                         return_info: bool = False):
    """Training-time centroid noise, speaker dropout and speaker mixup.

    ``c`` is (B, N, d).  Steps, in order: Gaussian noise on every centroid;
    with probability ``speaker_dropout_rate`` per example, one uniformly
    chosen centroid is zeroed; every remaining centroid is, with probability
    ``speaker_mixup_rate``, replaced by ``lam * c + (1 - lam) * c'`` with
    ``c'`` a centroid of another example in the batch and lam ~ U(0.5, 1).
    A dropped centroid is never a mixup target, so it stays exactly zero.
    """
    c = T.tensor(c)
    B, N, d = c.shape
    info = {"dropped": np.full(B, -1), "mixed": []}
    if weights.noise_std > 0:
        c = c + rng.normal(scale=weights.noise_std, size=c.shape).astype(T.DTYPE)
    if weights.speaker_dropout_rate > 0:
        keep = np.ones((B, N, 1), dtype=T.DTYPE)
        for b in range(B):
            if rng.random() < weights.speaker_dropout_rate:
                i = int(rng.integers(N))
                keep[b, i] = 0.0
                info["dropped"][b] = i
        if (keep == 0).any():
            c = c * keep
    if weights.speaker_mixup_rate > 0 and B > 1:
        mix = np.eye(B * N, dtype=T.DTYPE)
        for b in range(B):
            for i in range(N):
                if info["dropped"][b] == i or rng.random() >= weights.speaker_mixup_rate:
                    continue
                other = int(rng.integers(B - 1))
                other += other >= b
                j = int(rng.integers(N))
                lam = float(rng.uniform(0.5, 1.0))
                row = b * N + i
                mix[row, row] = lam
                mix[row, other * N + j] += 1.0 - lam
                info["mixed"].append((b, i, other, j, lam))
        if info["mixed"]:
            c = (mix @ c.reshape(B * N, d)).reshape(B, N, d)
    return (c, info) if return_info else c


def embedding_entropy_reg(embedding: Tensor) -> Tensor:
    """-sum_i log min_{j != i} ||E_i - E_j||, distances floored at 1e-12."""
    M = embedding.shape[0]
    if M < 2:
        raise ContractViolation("embedding regularizer needs at least two rows")
    sq = _sq_dist(embedding, embedding, clamp=False)  # the diagonal is masked below
    masked = sq.data + np.diag(np.full(M, np.inf, dtype=sq.data.dtype))
    nearest = np.argmin(masked, axis=1)
    T.note_branch(nearest)
    closest = T.getitem(sq, (np.arange(M), nearest))
    return T.tsum(T.log(T.clamp_min(closest, DIST_FLOOR ** 2))) * -0.5


@dataclass
class LossBreakdown:
    total: Tensor
    speaker: Tensor
    reconstruction: Tensor
    regularizer: Tensor
    perms: np.ndarray
    centroids: Tensor


def total_loss(batch, model, weights: LossWeights, rng: np.random.Generator,
               regularize: bool = True, perms: np.ndarray | None = None) -> LossBreakdown:
    """L_reconstr + speaker_weight * L_speaker + embed_reg_weight * l_reg for one batch.

    ``batch`` provides ``mixture`` (B, T), ``sources`` (B, T, N) and
    ``speakers`` (B, N).  The speaker loss is time-averaged per sequence so
    its weight does not depend on the window length.
    """
    from .model import separation_stack_forward, speaker_stack_forward

    h = speaker_stack_forward(batch.mixture, model)
    l_spk, perms = speaker_loss(h, batch.speakers, model.embedding, weights.loss_variant,
                                model.alpha, model.beta, reduction="mean", perms=perms)
    c = training_centroids(h, perms)
    if regularize:
        c = regularize_centroids(c, weights, rng)
    outs = separation_stack_forward(batch.mixture, c, model)
    l_rec = reconstruction_loss(outs, batch.sources, weights.sdr_clip)
    l_reg = embedding_entropy_reg(model.embedding)
    total = l_rec + l_spk * weights.speaker_weight + l_reg * weights.embed_reg_weight
    return LossBreakdown(total, l_spk, l_rec, l_reg, perms, c)
