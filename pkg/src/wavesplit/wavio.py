"""16-bit PCM mono WAV reading/writing and the tab-separated corpus manifest."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

SCALE = 32768.0
SPLITS = ("train", "valid", "test")


def wav_write(path, samples, sample_rate: int) -> None:
    """Clamp to [-1, 1 - 1/32768], round to nearest and write 16-bit mono PCM."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise FormatError(f"{path}: only mono signals can be written, got shape {x.shape}")
    q = np.rint(np.clip(x, -1.0, 1.0 - 1.0 / SCALE) * SCALE).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(q.tobytes())


def wav_read(path) -> tuple[np.ndarray, int]:
    """Return (float32 samples in [-1, 1), sample_rate)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: channel count is {w.getnchannels()}, expected 1 (mono)")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: bits per sample is {8 * w.getsampwidth()}, expected 16")
            n, sr = w.getnframes(), w.getframerate()
            raw = w.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            raise FormatError(f"{path}: format tag {msg.split(':')[-1].strip()} is not PCM (1)") from exc
        raise FormatError(f"{path}: bad RIFF/WAVE header ({msg})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated RIFF header") from exc
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: data chunk size declares {n} frames but only {len(raw) // 2} present")
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(SCALE)), sr


@dataclass
class ManifestEntry:
    id: str
    split: str
    speakers: list[int]
    sources: list[Path]


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = [f"{e.id}\t{e.split}\t{','.join(map(str, e.speakers))}\t" + "\t".join(str(s) for s in e.sources)
             for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; relative source paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise FormatError(f"{path}:{lineno}: expected id, split, speakers and >= 1 source, got {len(parts)} fields")
        id_, split, spk = parts[:3]
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
        try:
            speakers = [int(s) for s in spk.split(",")]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad speaker list {spk!r}") from exc
        sources = [Path(p) if Path(p).is_absolute() else base / p for p in parts[3:]]
        if len(sources) != len(speakers):
            raise FormatError(f"{path}:{lineno}: {len(speakers)} speakers but {len(sources)} source files")
        if len(set(speakers)) != len(speakers):
            raise FormatError(f"{path}:{lineno}: duplicate speaker ids {speakers}")
        entries.append(ManifestEntry(id_, split, speakers, sources))
    return entries
