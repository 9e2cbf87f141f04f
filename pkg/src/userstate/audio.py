"""MFCC front end: 1/30 s chunking of 44.1 kHz audio and MFCC + delta features."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.fft import dct

SAMPLE_RATE = 44100
CHUNK_SAMPLES = SAMPLE_RATE // 30  # 1470


@dataclass(frozen=True)
class MfccConfig:
    """Sub-window tiling of a chunk into a (T, n_coeffs) cepstral map.

    Defaults: 40 Hann windows of 256 samples with hop 31, 26 HTK-mel filters
    over 0..22050 Hz, 18 kept coefficients (c0 included), pre-emphasis 0.97
    and a regression half-width of 2 for the delta channels.
    """

    n_windows: int = 40
    win_length: int = 256
    hop: int = 31
    n_mels: int = 26
    n_coeffs: int = 18
    preemphasis: float = 0.97
    delta_width: int = 2
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_coeffs > self.n_mels:
            raise ValueError("cannot keep more coefficients than mel filters")
        if self.delta_width < 1:
            raise ValueError("delta_width must be >= 1")


def chunk_stream(waveform, rate: int = SAMPLE_RATE) -> Iterator[np.ndarray]:
    """Yield consecutive non-overlapping 1470-sample chunks; the tail is dropped."""
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {rate} Hz; resample first")
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    for start in range(0, len(x) - CHUNK_SAMPLES + 1, CHUNK_SAMPLES):
        yield x[start:start + CHUNK_SAMPLES]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on a continuous frequency axis, shape (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    fb.setflags(write=False)
    return fb


def filter_edges(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Lower, centre and upper frequency (Hz) of every mel filter, shape (n_mels, 3)."""
    e = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    return np.stack([e[:-2], e[1:-1], e[2:]], axis=1)


def frame_chunk(chunk: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Cut a chunk into ``n_windows`` overlapping windows, shape (T, win_length).

    The window grid is centred on the chunk; when it is longer than the chunk
    the signal is reflection-padded symmetrically.
    """
    x = np.asarray(chunk, dtype=np.float64)
    span = (cfg.n_windows - 1) * cfg.hop + cfg.win_length
    if span > len(x):
        extra = span - len(x)
        x = np.pad(x, (extra // 2, extra - extra // 2), mode="reflect")
        offset = 0
    else:
        offset = (len(x) - span) // 2
    idx = offset + np.arange(cfg.n_windows)[:, None] * cfg.hop + np.arange(cfg.win_length)[None, :]
    return x[idx]


def mel_energies(chunk: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel filterbank power per sub-window, shape (T, n_mels)."""
    x = np.asarray(chunk, dtype=np.float64)
    if x.shape != (CHUNK_SAMPLES,):
        raise ValueError(f"chunk must have {CHUNK_SAMPLES} samples, got {x.shape}")
    x = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    frames = frame_chunk(x, cfg) * np.hanning(cfg.win_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.win_length)) ** 2 / cfg.win_length
    return power @ mel_filterbank(cfg.n_mels, cfg.win_length, cfg.sample_rate).T


def deltas(features: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with edge replication.

    d_t = sum_{n=1..N} n * (c_{t+n} - c_{t-n}) / (2 * sum_{n=1..N} n^2)
    """
    c = np.asarray(features, dtype=np.float64)
    padded = np.pad(c, [(width, width)] + [(0, 0)] * (c.ndim - 1), mode="edge")
    T = len(c)
    num = np.zeros_like(c)
    for n in range(1, width + 1):
        num += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def mfcc(chunk: np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Static, delta and delta-delta MFCCs of one chunk, shape (T, n_coeffs, 3)."""
    logmel = np.log(np.maximum(mel_energies(chunk, cfg), cfg.log_floor))
    static = dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.n_coeffs]
    d1 = deltas(static, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return np.stack([static, d1, d2], axis=-1)


def pad_features(features: np.ndarray, width: int = 80) -> np.ndarray:
    """Zero-pad the coefficient axis of a (T, C, 3) MFCC tensor to ``width``."""
    T, C, K = features.shape
    if C > width:
        raise ValueError(f"cannot pad {C} coefficients down to {width}")
    out = np.zeros((T, width, K), dtype=np.float32)
    out[:, :C] = features
    return out
