"""Log-mel feature pipeline and context-window image construction.

All operations are pure functions of their inputs; the filterbank matrix
is cached and shared read-only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import AudioClip

LOG_FLOOR = 1e-10

CACHE_MAGIC = b"LMSC"
_CACHE_HEADER = struct.Struct("<4sII4x")  # magic, n_frames, n_bands, reserved


@dataclass(frozen=True)
class StftParams:
    """Short-time Fourier transform framing parameters."""

    frame_length: int = 1024  # 64 ms at 16 kHz
    hop: int = 512  # 50% overlap
    window: str = "hann"

    def __post_init__(self):
        if self.frame_length < 2 or self.frame_length & (self.frame_length - 1):
            raise ValueError("frame_length must be a power of two >= 2")
        if not 0 < self.hop <= self.frame_length:
            raise ValueError("hop must be in (0, frame_length]")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")


@dataclass
class LogMelSpectrogram:
    """Log mel-band power, one row per frame."""

    values: np.ndarray  # (n_frames, n_mels)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D (frames x bands) matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("log-mel values must be finite")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureWindows:
    """Flattened context images cut from a spectrogram at a fixed frame shift."""

    images: np.ndarray  # (n_windows, n_context * n_mels)
    n_context: int
    shift: int
    start_frames: list[int]


def _hann(length: int) -> np.ndarray:
    # periodic Hann, the standard analysis window for an STFT
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def stft_power(clip: AudioClip, params: StftParams | None = None) -> np.ndarray:
    """Power spectrogram: squared magnitude of the windowed DFT per frame.

    No padding: frames are the maximal set of full windows, so
    n_frames = 1 + (len - frame_length) // hop.
    """
    params = params or StftParams()
    x = clip.samples
    if len(x) < params.frame_length:
        raise ValueError(
            f"clip of {len(x)} samples is shorter than one frame ({params.frame_length})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, params.frame_length)[:: params.hop]
    spectrum = np.fft.rfft(frames * _hann(params.frame_length), axis=1)
    return np.abs(spectrum) ** 2


def hertz_to_mel(freq_hz) -> np.ndarray:
    """HTK mel scale: mel(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hertz(mel) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, n_fft_bins: int, sample_rate: int, f_min: float, f_max: float
) -> np.ndarray:
    """Triangular mel filterbank, one row per filter over the FFT bins.

    Filter centers are uniform on the mel scale between f_min and f_max;
    each row is nonnegative, unimodal, and has contiguous support.
    """
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hertz(np.linspace(hertz_to_mel(f_min), hertz_to_mel(f_max), n_mels + 2))
    bin_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft_bins)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs - lower) / (center - lower)
    falling = (upper - bin_freqs) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(bank.sum(axis=1) == 0.0)
    if empty.size:
        raise ValueError(
            f"{empty.size} mel filters have no FFT bin support "
            f"(n_mels={n_mels} too large for this resolution)"
        )
    return bank


@lru_cache(maxsize=8)
def _cached_filterbank(n_mels, n_fft_bins, sample_rate, f_min, f_max):
    bank = mel_filterbank(n_mels, n_fft_bins, sample_rate, f_min, f_max)
    bank.setflags(write=False)
    return bank


def log_mel(
    clip: AudioClip,
    params: StftParams | None = None,
    *,
    n_mels: int = 128,
    f_min: float = 50.0,
    f_max: float = 8000.0,
    floor: float = LOG_FLOOR,
) -> LogMelSpectrogram:
    """Natural-log mel power spectrogram with an additive floor."""
    params = params or StftParams()
    power = stft_power(clip, params)
    bank = _cached_filterbank(
        n_mels, params.frame_length // 2 + 1, clip.sample_rate, f_min, f_max
    )
    return LogMelSpectrogram(np.log(power @ bank.T + floor))


def frame_windows(spec: LogMelSpectrogram, n_context: int = 64, shift: int = 8) -> FeatureWindows:
    """Cut flattened context images of n_context consecutive frames.

    Image b covers frames [b*shift, b*shift + n_context); the window count
    is (n_frames - n_context) // shift, which requires
    n_frames >= n_context + shift.
    """
    if n_context < 1 or shift < 1:
        raise ValueError("n_context and shift must be >= 1")
    t, f = spec.values.shape
    n_windows = (t - n_context) // shift
    if n_windows < 1:
        raise ValueError(
            f"spectrogram of {t} frames is too short for context {n_context} with shift {shift}"
        )
    stacked = np.lib.stride_tricks.sliding_window_view(spec.values, (n_context, f))
    images = stacked[:: shift, 0][:n_windows].reshape(n_windows, n_context * f)
    return FeatureWindows(
        images=np.ascontiguousarray(images),
        n_context=n_context,
        shift=shift,
        start_frames=[b * shift for b in range(n_windows)],
    )


def ae_frames(spec: LogMelSpectrogram, n_context: int = 5) -> np.ndarray:
    """Stride-1 concatenation of n_context consecutive frames per row."""
    if n_context < 1:
        raise ValueError("n_context must be >= 1")
    t, f = spec.values.shape
    if t < n_context:
        raise ValueError(f"spectrogram of {t} frames is too short for context {n_context}")
    stacked = np.lib.stride_tricks.sliding_window_view(spec.values, (n_context, f))
    return np.ascontiguousarray(stacked[:, 0].reshape(t - n_context + 1, n_context * f))


def write_feature_cache(path, values: np.ndarray) -> None:
    """Write a feature matrix as little-endian float32 with a 16-byte header."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("feature cache stores 2-D matrices")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, values.shape[0], values.shape[1]))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_CACHE_HEADER.size)
        if len(header) != _CACHE_HEADER.size:
            raise ValueError(f"{path}: truncated feature cache header")
        magic, n_frames, n_bands = _CACHE_HEADER.unpack(header)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: bad feature cache magic {magic!r}")
        data = fh.read(n_frames * n_bands * 4)
    if len(data) != n_frames * n_bands * 4:
        raise ValueError(f"{path}: truncated feature cache payload")
    return np.frombuffer(data, dtype="<f4").reshape(n_frames, n_bands).copy()
