"""Speaker stack, separation stack, k-means inference and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cluster import KMeansConfig, kmeans
from .errors import ContractViolation, FormatError
from .nn import FiLMBlockParams, LinearParams, ResidualBlockParams, film_residual_block, residual_block
from .tensor import Tensor

RMS_FLOOR = 1e-6  # input level below which a waveform is treated as silence


@dataclass
class SpeakerStackConfig:
    layers: int = 8
    channels: int = 64
    latent_dim: int = 64
    n_sources: int = 2
    kernel_size: int = 3

    def dilations(self) -> list[int]:
        return [2 ** l for l in range(self.layers)]


@dataclass
class SeparationStackConfig:
    layers: int = 20
    channels: int = 64
    n_sources: int = 2
    kernel_size: int = 3
    film: bool = True
    dilation_cycle: int = 10

    def dilations(self) -> list[int]:
        return [2 ** (l % self.dilation_cycle) for l in range(self.layers)]


@dataclass
class ModelConfig:
    speaker: SpeakerStackConfig = field(default_factory=SpeakerStackConfig)
    separation: SeparationStackConfig = field(default_factory=SeparationStackConfig)
    n_train_speakers: int = 10
    sample_rate: int = 8000

    @property
    def n_sources(self) -> int:
        return self.speaker.n_sources

    def __post_init__(self):
        if self.speaker.n_sources != self.separation.n_sources:
            raise ContractViolation("speaker and separation stacks disagree on n_sources")


def preset(name: str, n_sources: int = 2, n_train_speakers: int | None = None,
           film: bool = True) -> ModelConfig:
    """Named architecture presets: ``desk`` (CPU scale) or ``paper`` (full scale)."""
    if name == "desk":
        spk = SpeakerStackConfig(8, 64, 64, n_sources)
        sep = SeparationStackConfig(20, 64, n_sources, film=film)
        m = 10
    elif name == "paper":
        spk = SpeakerStackConfig(14, 512, 512, n_sources)
        sep = SeparationStackConfig(40, 512, n_sources, film=film)
        m = 101
    else:
        raise ContractViolation(f"unknown preset {name!r} (expected 'desk' or 'paper')")
    return ModelConfig(spk, sep, n_train_speakers or m)


class WavesplitModel:
    """All learnable state: both stacks, the speaker embedding table and (alpha, beta)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s, p = cfg.speaker, cfg.separation
        self.spk_in = LinearParams.init(rng, 1, s.channels)
        self.spk_blocks = [ResidualBlockParams.init(rng, s.channels, dil, s.kernel_size)
                           for dil in s.dilations()]
        self.spk_head = LinearParams.init(rng, s.channels, s.n_sources * s.latent_dim)

        cond = s.n_sources * s.latent_dim
        self.sep_in = LinearParams.init(rng, 1, p.channels)
        self.sep_blocks = [FiLMBlockParams.init(rng, p.channels, dil, cond, p.kernel_size, p.film)
                           for dil in p.dilations()]
        self.sep_heads = [LinearParams.init(rng, p.channels, p.n_sources) for _ in range(p.layers)]

        emb = rng.normal(size=(cfg.n_train_speakers, s.latent_dim))
        self.embedding = Tensor(emb / np.linalg.norm(emb, axis=1, keepdims=True), requires_grad=True)
        self.alpha_raw = Tensor(np.zeros(1), requires_grad=True)
        self.beta = Tensor(np.zeros(1), requires_grad=True)

    @property
    def n_sources(self) -> int:
        return self.cfg.n_sources

    @property
    def alpha(self) -> Tensor:
        return T.exp(self.alpha_raw)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.spk_in.tensors("speaker.input"))
        for i, blk in enumerate(self.spk_blocks):
            params.update(blk.tensors(f"speaker.block{i}"))
        params.update(self.spk_head.tensors("speaker.head"))
        params.update(self.sep_in.tensors("separation.input"))
        for i, blk in enumerate(self.sep_blocks):
            params.update(blk.tensors(f"separation.block{i}"))
        for i, head in enumerate(self.sep_heads):
            params.update(head.tensors(f"separation.head{i}"))
        params["embedding"] = self.embedding
        params["distance.alpha_raw"] = self.alpha_raw
        params["distance.beta"] = self.beta
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


@dataclass
class SpeakerCentroids:
    values: np.ndarray  # (N, d)
    provenance: str     # "kmeans" or "training-aggregate"


def _as_batch(x) -> tuple[Tensor, bool]:
    x = T.tensor(x)
    if x.ndim == 1:
        return x.reshape(1, x.shape[0], 1), False
    if x.ndim == 2:
        return x.reshape(x.shape[0], x.shape[1], 1), True
    raise ContractViolation(f"waveform must be (T,) or (B, T), got {x.shape}")


def _unit_rms(xb: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scale each waveform to unit RMS; returns the scaled input and the (B, 1, 1) factors.

    Layer norm inside the blocks discards absolute level, so the raw level
    only survives on the residual path; working at unit RMS keeps that path
    comparable to the block outputs regardless of recording gain.
    """
    rms = np.sqrt(np.mean(np.square(xb.data, dtype=np.float64), axis=(1, 2), keepdims=True))
    rms = np.maximum(rms, RMS_FLOOR).astype(xb.data.dtype)
    return xb * (1.0 / rms), rms


def speaker_stack_forward(x, model: WavesplitModel) -> Tensor:
    """Per-timestep unit-norm speaker vectors, (T, N, d) or (B, T, N, d)."""
    xb, batched = _as_batch(x)
    if xb.shape[1] < 1:
        raise ContractViolation("speaker stack needs at least one sample")
    cfg = model.cfg.speaker
    h = model.spk_in(_unit_rms(xb)[0])
    for blk in model.spk_blocks:
        h = residual_block(h, blk)
    B, L = xb.shape[0], xb.shape[1]
    v = model.spk_head(h).reshape(B, L, cfg.n_sources, cfg.latent_dim)
    v = T.l2_normalize(v)
    return v if batched else v.reshape(L, cfg.n_sources, cfg.latent_dim)


def _flat_centroids(c, model: WavesplitModel, batch: int) -> Tensor:
    if isinstance(c, SpeakerCentroids):
        c = c.values
    c = T.tensor(c)
    N, d = model.n_sources, model.cfg.speaker.latent_dim
    if c.shape[-2:] != (N, d):
        raise ContractViolation(f"expected {N} centroids of dimension {d}, got {c.shape}")
    if c.ndim == 2:
        c = c.reshape(1, N * d)
        return c if batch == 1 else T.concat([c] * batch, axis=0)
    if c.shape[0] != batch:
        raise ContractViolation(f"centroid batch {c.shape[0]} != waveform batch {batch}")
    return c.reshape(batch, N * d)


def separation_stack_forward(x, c, model: WavesplitModel) -> list[Tensor]:
    """One (T, N) / (B, T, N) estimate per separation layer; the last one is the prediction.

    The stack runs on the unit-RMS mixture and its outputs are scaled back to
    the input level, so separation commutes with a gain on the mixture.
    """
    xb, batched = _as_batch(x)
    cond = _flat_centroids(c, model, xb.shape[0])
    xn, rms = _unit_rms(xb)
    h = model.sep_in(xn)
    outs = []
    for blk, head in zip(model.sep_blocks, model.sep_heads):
        h = film_residual_block(h, cond, blk)
        y = head(h) * rms
        outs.append(y if batched else y.reshape(y.shape[1], y.shape[2]))
    return outs


@dataclass
class SeparationResult:
    estimates: np.ndarray           # (T, N)
    centroids: SpeakerCentroids
    degenerate: bool = False
    inertia_history: list[float] = field(default_factory=list)


def separate(x, model: WavesplitModel, kmeans_cfg: KMeansConfig | None = None) -> SeparationResult:
    """Inference path: speaker vectors -> k-means over all T*N vectors -> conditioned separation."""
    x = T.tensor(x)
    if x.ndim != 1:
        raise ContractViolation(f"separate() takes a single (T,) waveform, got {x.shape}")
    N = model.n_sources
    cfg = kmeans_cfg or KMeansConfig(n_clusters=N)
    if cfg.n_clusters != N:
        raise ContractViolation(f"kmeans n_clusters={cfg.n_clusters} != model N={N}")
    h = speaker_stack_forward(x, model).data
    km = kmeans(h.reshape(-1, h.shape[-1]), cfg)
    cents = SpeakerCentroids(km.centroids.astype(np.float32), "kmeans")
    y = separation_stack_forward(x, cents, model)[-1]
    return SeparationResult(y.data, cents, km.degenerate, km.history)


# checkpoints --------------------------------------------------------------------
MAGIC = b"WSPL"
VERSION = 1


def save_checkpoint(path, model: WavesplitModel) -> None:
    """Little-endian: magic, u32 version, u32 count, then (name, shape, float32 payload) entries."""
    entries = dict(model.parameters())
    entries["meta.sample_rate"] = Tensor(np.array([model.cfg.sample_rate]))
    entries["meta.dilation_cycle"] = Tensor(np.array([model.cfg.separation.dilation_cycle]))
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(entries))
    for name, t in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(data):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def _config_from_entries(entries: dict[str, np.ndarray]) -> ModelConfig:
    def count(prefix):
        return sum(1 for k in entries if k.startswith(prefix) and k.endswith(".conv.weight"))

    try:
        spk_conv = entries["speaker.block0.conv.weight"]
        sep_conv = entries["separation.block0.conv.weight"]
        n_sources = entries["separation.head0.weight"].shape[1]
        latent = entries["speaker.head.weight"].shape[1] // n_sources
        cycle = int(entries.get("meta.dilation_cycle", np.array([10]))[0])
        spk = SpeakerStackConfig(count("speaker.block"), spk_conv.shape[2], latent, n_sources, spk_conv.shape[0])
        sep = SeparationStackConfig(count("separation.block"), sep_conv.shape[2], n_sources, sep_conv.shape[0],
                                    film="separation.block0.film_scale.weight" in entries,
                                    dilation_cycle=cycle)
        sr = int(entries.get("meta.sample_rate", np.array([8000]))[0])
        return ModelConfig(spk, sep, entries["embedding"].shape[0], sr)
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entry {exc}") from exc


def load_checkpoint(path) -> WavesplitModel:
    entries = read_checkpoint(path)
    model = WavesplitModel(_config_from_entries(entries))
    for name, t in model.parameters().items():
        if name not in entries:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if entries[name].shape != t.shape:
            raise FormatError(f"{path}: {name!r} has shape {entries[name].shape}, expected {t.shape}")
        t.data = entries[name]
    return model
