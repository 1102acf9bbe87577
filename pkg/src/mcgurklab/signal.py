"""Babble rendering, exact-SNR mixing and waveform normalisation."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Waveform",
    "NoiseBank",
    "DegenerateSignalError",
    "FormatError",
    "power",
    "peak_normalize",
    "render_babble",
    "noise_gain",
    "mix_at_snr",
    "measured_snr_db",
    "read_wav",
    "write_wav",
    "save_noise_bank",
    "load_noise_bank",
]

DEFAULT_SAMPLE_RATE = 16000


class DegenerateSignalError(ValueError):
    """A signal with zero power or zero peak where one is required."""


class FormatError(ValueError):
    """Incompatible or malformed audio data."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise FormatError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise FormatError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class NoiseBank:
    waveform: Waveform
    talker_count: int
    seed: int

    def __post_init__(self):
        if self.talker_count < 2:
            raise FormatError("babble needs at least two talkers")


def power(w) -> float:
    """Mean squared sample value."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    return float(np.mean(x * x))


def peak_normalize(w: Waveform) -> Waveform:
    peak = float(np.max(np.abs(w.samples)))
    if peak == 0.0:
        raise DegenerateSignalError("cannot peak-normalise an all-zero waveform")
    return Waveform(w.samples / peak, w.sample_rate)


def render_babble(talkers: list[Waveform], seed: int = 0, duration: float | None = None) -> NoiseBank:
    """Sum talker streams sample-wise and peak-normalise the result.

    Streams shorter than the bank are looped, longer ones cropped. The bank
    length defaults to the longest talker. ``seed`` records how the talker
    streams were synthesised and is persisted with the bank.
    """
    if len(talkers) < 2:
        raise FormatError("babble needs at least two talkers")
    rates = {t.sample_rate for t in talkers}
    if len(rates) != 1:
        raise FormatError(f"talkers have mismatched sample rates: {sorted(rates)}")
    rate = rates.pop()
    n = int(round(duration * rate)) if duration is not None else max(len(t) for t in talkers)
    mix = np.zeros(n)
    for t in talkers:
        mix += t.samples[np.arange(n) % len(t)]
    return NoiseBank(peak_normalize(Waveform(mix, rate)), len(talkers), seed)


def noise_gain(speech_power: float, slice_power: float, snr_db: float) -> float:
    """Gain that puts a noise slice ``snr_db`` below the speech power."""
    if speech_power <= 0.0 or slice_power <= 0.0:
        raise DegenerateSignalError("speech and noise must both have positive power")
    return math.sqrt(speech_power / (slice_power * 10.0 ** (snr_db / 10.0)))


def noise_slice(bank: NoiseBank, n: int, rng: np.random.Generator) -> np.ndarray:
    """A contiguous ``n``-sample slice at a random offset, wrapping at the end."""
    source = bank.waveform.samples
    start = int(rng.integers(0, source.size))
    return source[(start + np.arange(n)) % source.size]


def mix_at_snr(speech: Waveform, noise: NoiseBank, snr_db: float, offset_seed) -> Waveform:
    """Add a scaled random slice of babble so the mixture sits at ``snr_db``.

    ``offset_seed`` is an int seed or a ``numpy.random.Generator``.
    """
    if noise.waveform.sample_rate != speech.sample_rate:
        raise FormatError("speech and noise sample rates differ")
    if len(noise.waveform) < len(speech):
        raise FormatError("noise bank is shorter than the speech clip")
    rng = offset_seed if isinstance(offset_seed, np.random.Generator) else np.random.default_rng(offset_seed)
    piece = noise_slice(noise, len(speech), rng)
    g = noise_gain(power(speech), power(piece), snr_db)
    return Waveform(speech.samples + g * piece, speech.sample_rate)


def measured_snr_db(speech, scaled_noise) -> float:
    return 10.0 * math.log10(power(speech) / power(scaled_noise))


# ---------------------------------------------------------------- file I/O


def write_wav(path, w: Waveform) -> None:
    """16-bit PCM mono; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)


def save_noise_bank(path, bank: NoiseBank) -> None:
    path = Path(path)
    write_wav(path, bank.waveform)
    sidecar = {"talker_count": bank.talker_count, "seed": bank.seed, "sample_rate": bank.waveform.sample_rate}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_noise_bank(path) -> NoiseBank:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return NoiseBank(read_wav(path), int(meta["talker_count"]), int(meta["seed"]))
