"""Audio waveform -> log-mel spectrogram -> time-axis patches, plus SpecAugment.

The hop size defaults to 320 samples so that 10 s at 32 kHz yields exactly
1000 frames of 64 mel bins (the shape every downstream dimension is derived
from); the 64 triangular filters use the HTK mel scale, normalized to unit
area.  Frames are centered via reflect padding, so the frame count is
ceil(num_samples / hop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataFormatError, DomainError


@dataclass
class MelConfig:
    sample_rate: int = 32000
    n_fft: int = 1024
    win_length: int = 1024
    hop: int = 320
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 16000.0
    log_floor: float = 1e-10

    def validate(self) -> None:
        if self.hop < 1 or self.win_length < 1 or self.n_fft < self.win_length:
            raise ConfigError(
                f"bad STFT geometry: n_fft={self.n_fft}, win={self.win_length}, hop={self.hop}"
            )
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(f"bad mel range [{self.fmin}, {self.fmax}]")


@dataclass
class MelSpec:
    """A (T_frames, n_mels) log-mel matrix with its framing parameters."""

    frames: np.ndarray
    sample_rate: int
    hop: int
    win: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, each normalized to unit area in Hz."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        fb[i] = tri * (2.0 / (hi - lo))
    return fb


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def log_mel(waveform: np.ndarray, cfg: MelConfig | None = None) -> MelSpec:
    """Magnitude STFT -> mel projection -> log with floor clamp.

    The waveform must be 1-d at ``cfg.sample_rate``.  Pure silence maps every
    cell to log(log_floor).
    """
    cfg = cfg or MelConfig()
    cfg.validate()
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"waveform must be non-empty and 1-d, got shape {x.shape}")
    pad = cfg.win_length // 2
    if x.size <= pad:
        raise DomainError(f"waveform of {x.size} samples too short for centered framing")
    padded = np.pad(x, pad, mode="reflect")

    n_frames = math.ceil(x.size / cfg.hop)
    window = _hann_periodic(cfg.win_length)
    starts = np.arange(n_frames) * cfg.hop
    idx = starts[:, None] + np.arange(cfg.win_length)[None, :]
    frames = padded[idx] * window
    spectrum = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    mel = spectrum @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpec(frames=logmel, sample_rate=cfg.sample_rate, hop=cfg.hop, win=cfg.win_length)


FRAMES_PER_PATCH = 4


def patchify(spec: MelSpec | np.ndarray, frames_per_patch: int = FRAMES_PER_PATCH) -> np.ndarray:
    """Group consecutive frames into flattened non-overlapping patches.

    A (T, n_mels) spectrogram becomes (T // frames_per_patch,
    frames_per_patch * n_mels); trailing frames that do not fill a patch are
    dropped.
    """
    frames = spec.frames if isinstance(spec, MelSpec) else np.asarray(spec)
    t, n_mels = frames.shape
    if t < frames_per_patch:
        raise DomainError(f"{t} frames cannot form a {frames_per_patch}-frame patch")
    n_patches = t // frames_per_patch
    trimmed = frames[: n_patches * frames_per_patch]
    return trimmed.reshape(n_patches, frames_per_patch * n_mels)


def unpatchify(patches: np.ndarray, n_mels: int, frames_per_patch: int = FRAMES_PER_PATCH) -> np.ndarray:
    """Inverse of patchify on the retained frames."""
    n_patches = patches.shape[0]
    return patches.reshape(n_patches * frames_per_patch, n_mels)


@dataclass
class SpecAugmentPolicy:
    """Mild default policy; the masking technique matters, not these numbers."""

    n_time_masks: int = 2
    max_time_width: int = 64
    n_freq_masks: int = 2
    max_freq_width: int = 8

    def to_json(self) -> dict:
        return {
            "n_time_masks": self.n_time_masks,
            "max_time_width": self.max_time_width,
            "n_freq_masks": self.n_freq_masks,
            "max_freq_width": self.max_freq_width,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SpecAugmentPolicy":
        return cls(**payload)


def spec_augment(spec: MelSpec, policy: SpecAugmentPolicy, rng: np.random.Generator) -> MelSpec:
    """Mask random time and frequency bands, filling with the spectrogram mean.

    Draw order is fixed (time masks first, then frequency; width before
    start), so a given rng state determines the result exactly.  Shapes never
    change and unmasked cells are left bit-identical.
    """
    t, f = spec.frames.shape
    if policy.max_time_width > t or policy.max_freq_width > f:
        raise ConfigError(
            f"mask widths ({policy.max_time_width}, {policy.max_freq_width}) exceed "
            f"spectrogram extents ({t}, {f})"
        )
    out = spec.frames.copy()
    fill = spec.frames.mean()
    for _ in range(policy.n_time_masks):
        width = int(rng.integers(0, policy.max_time_width + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = fill
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        start = int(rng.integers(0, f - width + 1))
        out[:, start : start + width] = fill
    return MelSpec(frames=out, sample_rate=spec.sample_rate, hop=spec.hop, win=spec.win)


def read_wav(path, expected_rate: int | None = None) -> np.ndarray:
    """Read a single-channel PCM16 or float32 WAV into float64 samples in [-1, 1]."""
    try:
        rate, samples = wavfile.read(path)
    except ValueError as exc:
        raise DataFormatError(f"{path}: not a readable WAV file: {exc}") from exc
    if samples.ndim != 1:
        raise DataFormatError(f"{path}: expected mono audio, got {samples.ndim} channels")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigError(f"{path}: sample rate {rate} != required {expected_rate}")
    if samples.dtype == np.int16:
        return samples.astype(np.float64) / 32768.0
    if samples.dtype == np.float32:
        return samples.astype(np.float64)
    raise DataFormatError(f"{path}: unsupported sample format {samples.dtype}")


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    wavfile.write(path, rate, np.asarray(samples, dtype=np.float32))
