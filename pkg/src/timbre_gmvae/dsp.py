"""Log-mel front end and spectral centroid.

All spectrograms are (frames, mel bands) arrays, 43 x 256 with the default
config.  Normalised spectrograms live in [-1, 1].
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_mels: int = 256
    window_samples: int = 2048
    hop_samples: int = 256
    fft_size: int = 2048
    n_frames: int = 43
    duration_samples: int = 11025  # 500 ms

    def __post_init__(self):
        if self.window_samples > self.fft_size:
            raise ValueError("window longer than FFT size")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class NormalizationStats:
    min_log_mag: float
    max_log_mag: float

    def __post_init__(self):
        if not self.min_log_mag < self.max_log_mag:
            raise ValueError("normalization stats need min < max")

    def normalize(self, log_mel: np.ndarray) -> np.ndarray:
        span = self.max_log_mag - self.min_log_mag
        out = 2.0 * (log_mel - self.min_log_mag) / span - 1.0
        return np.clip(out, -1.0, 1.0)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        span = self.max_log_mag - self.min_log_mag
        return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * span + self.min_log_mag

    @classmethod
    def from_data(cls, log_mels) -> "NormalizationStats":
        lo = min(float(np.min(m)) for m in log_mels)
        hi = max(float(np.max(m)) for m in log_mels)
        return cls(lo, hi)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    if n < 2:
        raise ValueError("window length must be at least 2")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def fit_length(samples: np.ndarray, n: int) -> np.ndarray:
    """Trim or zero-pad to exactly ``n`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size >= n:
        return samples[:n]
    return np.pad(samples, (0, n - samples.size))


def frame_signal(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(n_frames, window) frames, hop apart, tail zero-padded then truncated."""
    need = (cfg.n_frames - 1) * cfg.hop_samples + cfg.window_samples
    x = fit_length(samples, max(need, samples.size))
    idx = np.arange(cfg.n_frames)[:, None] * cfg.hop_samples + np.arange(cfg.window_samples)[None, :]
    return x[idx]


def stft_power(samples: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """|STFT|^2 with shape (n_frames, fft_size // 2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty signal")
    frames = frame_signal(samples, cfg) * hann_window(cfg.window_samples)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Centre frequency in Hz of every mel band."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_bins).

    With 256 bands over 1025 bins the lowest triangles fall between bins;
    such a band gets weight 1 on the bin nearest its centre.
    """
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    bins = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = ~np.any(fb > 0, axis=1)
    for m in np.flatnonzero(empty):
        fb[m, np.argmin(np.abs(bins - pts[m + 1]))] = 1.0
    return fb


_FB_CACHE: dict[MelConfig, np.ndarray] = {}


def _filterbank(cfg: MelConfig) -> np.ndarray:
    if cfg not in _FB_CACHE:
        _FB_CACHE[cfg] = mel_filterbank(cfg)
    return _FB_CACHE[cfg]


def log_mel(samples: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Un-normalised log-mel power of the first 500 ms, (n_frames, n_mels)."""
    power = stft_power(fit_length(samples, cfg.duration_samples), cfg)
    return np.log(power @ _filterbank(cfg).T + LOG_FLOOR)


def mel_spectrogram(samples: np.ndarray, cfg: MelConfig = MelConfig(),
                    stats: NormalizationStats | None = None) -> np.ndarray:
    lm = log_mel(samples, cfg)
    return lm if stats is None else stats.normalize(lm)


def centroid_from_power(power: np.ndarray, centers: np.ndarray) -> float:
    """Mean over frames with energy of the per-frame power-weighted centre frequency."""
    power = np.atleast_2d(np.asarray(power, dtype=np.float64))
    energy = power.sum(axis=1)
    live = energy > 0
    if not np.any(live):
        raise ValueError("spectral centroid of an all-zero spectrum")
    per_frame = (power[live] @ centers) / energy[live]
    return float(per_frame.mean())


def spectral_centroid(spec: np.ndarray, stats: NormalizationStats,
                      cfg: MelConfig = MelConfig()) -> float:
    """Spectral centroid (Hz) of a normalised log-mel spectrogram."""
    power = np.exp(stats.denormalize(spec)) - LOG_FLOOR
    power[power < LOG_FLOOR * 1e-6] = 0.0
    return centroid_from_power(power, mel_center_frequencies(cfg))


# ----------------------------------------------------------------- WAV I/O
def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if src_rate == dst_rate or samples.size == 0:
        return samples
    n_out = int(round(samples.size * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(samples.size), samples)


def read_wav(path: str | Path, target_rate: int = 22050) -> np.ndarray:
    """Read 16-bit PCM mono WAV, resampled to ``target_rate``, as floats in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return resample_linear(x, rate, target_rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 22050) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
