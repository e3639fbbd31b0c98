"""Waveforms, STFT analysis/synthesis, masks and WAV I/O."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from dasr.errors import InvalidInputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

_WINDOWS = ("sqrt_hann", "hann")


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Waveform:
    """Multichannel audio, ``samples`` has shape (channels, num_samples)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise InvalidInputError(
                f"waveform must be (channels, samples), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInputError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", _frozen(samples, np.float64))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> "Waveform":
        return Waveform(self.samples[index:index + 1], self.sample_rate)

    @classmethod
    def zeros(cls, channels, num_samples, sample_rate=SAMPLE_RATE):
        return cls(np.zeros((channels, num_samples)), sample_rate)


def _window(name, length):
    # periodic windows, so shifted copies tile exactly
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(length) / length)
    if name == "hann":
        return hann
    if name == "sqrt_hann":
        return np.sqrt(hann)
    raise InvalidInputError(f"unknown window {name!r}, expected one of {_WINDOWS}")


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 512
    hop_length: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_length <= 0 or self.hop_length <= 0:
            raise InvalidInputError("window and hop length must be positive")
        if self.window_length % self.hop_length:
            raise InvalidInputError(
                f"hop {self.hop_length} must divide window {self.window_length}")
        envelope = self._envelope()
        if envelope.min() <= 0 or envelope.max() - envelope.min() > 1e-9 * envelope.max():
            raise InvalidInputError(
                f"window {self.window!r} with hop {self.hop_length} "
                "does not satisfy perfect reconstruction")

    def _envelope(self):
        w = _window(self.window, self.window_length)
        return (w ** 2).reshape(-1, self.hop_length).sum(axis=0)

    @property
    def analysis_window(self) -> np.ndarray:
        return _window(self.window, self.window_length)

    @property
    def synthesis_window(self) -> np.ndarray:
        # dual window: sum_k w_a(n + kH) * w_s(n + kH) == 1
        return self.analysis_window / self._envelope()[0]

    @property
    def frequency_bins(self) -> int:
        return self.window_length // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_length) // self.hop_length + 1


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT, ``bins`` has shape (channels, frames, frequency_bins).

    ``frame_offset`` is the absolute index of the first frame when the
    spectrogram is a block cut out of a longer analysis.
    """

    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = SAMPLE_RATE
    frame_offset: int = 0

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 3:
            raise InvalidInputError(
                f"spectrogram must be (channels, frames, bins), got {bins.shape}")
        if bins.shape[2] != self.config.frequency_bins:
            raise InvalidInputError(
                f"expected {self.config.frequency_bins} frequency bins, got {bins.shape[2]}")
        if not np.all(np.isfinite(bins)):
            raise InvalidInputError("spectrogram contains non-finite values")
        object.__setattr__(self, "bins", _frozen(bins, np.complex128))

    @property
    def channels(self) -> int:
        return self.bins.shape[0]

    @property
    def frames(self) -> int:
        return self.bins.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def block(self, start: int, stop: int) -> "Spectrogram":
        return Spectrogram(self.bins[:, start:stop], self.config, self.sample_rate,
                           self.frame_offset + start)

    def channel(self, index: int) -> "Spectrogram":
        return Spectrogram(self.bins[index:index + 1], self.config, self.sample_rate,
                           self.frame_offset)


def _clamp_mask(values, what):
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError(f"{what} contains non-finite values")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        warnings.warn(f"{what} values outside [0, 1] were clamped", RuntimeWarning,
                      stacklevel=3)
        values = np.clip(values, 0.0, 1.0)
    return values


@dataclass(frozen=True, eq=False)
class MaskSet:
    """N speech masks (N, frames, bins) and one noise mask (frames, bins)."""

    speech_masks: np.ndarray
    noise_mask: np.ndarray

    def __post_init__(self):
        speech = _clamp_mask(self.speech_masks, "speech mask")
        noise = _clamp_mask(self.noise_mask, "noise mask")
        if speech.ndim != 3 or speech.shape[0] < 1:
            raise InvalidInputError(
                f"speech masks must be (N, frames, bins), got {speech.shape}")
        if noise.shape != speech.shape[1:]:
            raise InvalidInputError(
                f"noise mask shape {noise.shape} does not match {speech.shape[1:]}")
        object.__setattr__(self, "speech_masks", _frozen(speech, np.float64))
        object.__setattr__(self, "noise_mask", _frozen(noise, np.float64))

    @property
    def num_streams(self) -> int:
        return self.speech_masks.shape[0]

    @property
    def frames(self) -> int:
        return self.speech_masks.shape[1]

    def permuted(self, order) -> "MaskSet":
        """Speech masks reordered so that stream ``i`` becomes ``order[i]``."""
        return MaskSet(self.speech_masks[list(order)], self.noise_mask)

    def frames_slice(self, start: int, stop: int) -> "MaskSet":
        return MaskSet(self.speech_masks[:, start:stop], self.noise_mask[start:stop])


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Frame, window and FFT every channel. No padding is applied."""
    if w.num_samples < cfg.window_length:
        raise InvalidInputError(
            f"signal of {w.num_samples} samples is shorter than one "
            f"window ({cfg.window_length})")
    frames = cfg.num_frames(w.num_samples)
    idx = (np.arange(frames)[:, None] * cfg.hop_length
           + np.arange(cfg.window_length)[None, :])
    framed = w.samples[:, idx] * cfg.analysis_window
    return Spectrogram(np.fft.rfft(framed, axis=-1), cfg, w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    """Weighted overlap-add with the dual synthesis window.

    Samples within ``window_length - hop_length`` of either end are covered
    by fewer frames and are not reconstructed at full gain.
    """
    cfg = s.config
    frames = s.frames
    length = (frames - 1) * cfg.hop_length + cfg.window_length if frames else 0
    out = np.zeros((s.channels, length))
    if frames == 0:
        return Waveform(out, s.sample_rate)
    segments = np.fft.irfft(s.bins, n=cfg.window_length, axis=-1) * cfg.synthesis_window
    hops_per_window = cfg.window_length // cfg.hop_length
    # add frames in strided groups that do not overlap each other
    for phase in range(hops_per_window):
        chunk = segments[:, phase::hops_per_window]
        if chunk.shape[1] == 0:
            continue
        start = phase * cfg.hop_length
        n = chunk.shape[1] * cfg.window_length
        out[:, start:start + n] += chunk.reshape(s.channels, -1)
    return Waveform(out, s.sample_rate)


def padded_stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """STFT with zero padding so that every original sample is interior.

    Pair with :func:`trimmed_istft` to recover a waveform of the input length.
    """
    pad = cfg.window_length - cfg.hop_length
    total = w.num_samples + 2 * pad
    frames = max(1, -(-(total - cfg.window_length) // cfg.hop_length) + 1)
    back = (frames - 1) * cfg.hop_length + cfg.window_length - w.num_samples - pad
    samples = np.pad(w.samples, ((0, 0), (pad, back)))
    return stft(Waveform(samples, w.sample_rate), cfg)


def trimmed_istft(s: Spectrogram, num_samples: int) -> Waveform:
    pad = s.config.window_length - s.config.hop_length
    out = istft(s)
    return Waveform(out.samples[:, pad:pad + num_samples], s.sample_rate)


def apply_mask(s: Spectrogram, m: np.ndarray) -> Spectrogram:
    """Multiply every channel of ``s`` by the (frames, bins) mask ``m``."""
    m = np.asarray(m)
    if m.shape != s.bins.shape[1:]:
        raise InvalidInputError(
            f"mask shape {m.shape} does not match spectrogram {s.bins.shape[1:]}")
    m = _clamp_mask(m, "mask")
    return Spectrogram(s.bins * m[None], s.config, s.sample_rate, s.frame_offset)


def si_snr(estimate, target, eps=1e-12) -> float:
    """Scale-invariant SNR in dB between two 1-D signals."""
    estimate = np.asarray(estimate, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    estimate = estimate - estimate.mean()
    target = target - target.mean()
    projection = np.dot(estimate, target) / (np.dot(target, target) + eps) * target
    noise = estimate - projection
    return 10 * np.log10((np.dot(projection, projection) + eps) / (np.dot(noise, noise) + eps))


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV, channel order preserved."""
    rate, data = wavfile.read(str(path))
    if expected_rate is not None and rate != expected_rate:
        raise InvalidInputError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, subtype: str = "float32"):
    """Write a WAV file (or a binary file object); returns ``path``."""
    if not hasattr(path, "write"):
        path = Path(path)
    data = w.samples.T
    if subtype == "float32":
        data = data.astype(np.float32)
    elif subtype == "int16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise InvalidInputError(f"unsupported WAV subtype {subtype!r}")
    if w.channels == 1:
        data = data[:, 0]
    wavfile.write(path if hasattr(path, "write") else str(path), w.sample_rate, data)
    return path
