"""Waveform <-> model-space transforms and mel analysis.

Waveforms are plain float64 arrays whose last axis is time; any leading axes
are treated as a batch. Complex STFT grids are laid out ``(..., bins, frames)``
and model-space grids ``(..., 2, bins, frames)`` with real/imag channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA = 0.65
BETA = 0.34


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 256
    hop: int = 64
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ValueError("fft_size and hop must be positive")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return hann(self.fft_size)

    def is_cola(self) -> bool:
        """True when squared-window overlap-add is constant (WOLA pair)."""
        if self.fft_size % self.hop:
            return False
        w2 = self.window_array() ** 2
        total = w2.reshape(-1, self.hop).sum(axis=0)
        return bool(np.allclose(total, total[0], rtol=1e-10, atol=0.0))

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 40
    hop_ms: float = 10.0
    fft_size: int = 512
    floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.floor <= 0:
            raise ValueError("floor must be positive")
        if self.hop_ms <= 0 or self.fft_size <= 0:
            raise ValueError("hop_ms and fft_size must be positive")

    def hop(self, sample_rate: float) -> int:
        return max(1, int(round(self.hop_ms * sample_rate / 1000.0)))


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    # center framing with zero padding keeps the transform linear
    pad = fft_size // 2
    length = x.shape[-1]
    n_frames = length // hop + 1
    total = (n_frames - 1) * hop + fft_size
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, total - length - pad)]
    xp = np.pad(x, widths)
    view = np.lib.stride_tricks.sliding_window_view(xp, fft_size, axis=-1)
    return view[..., ::hop, :][..., :n_frames, :]


def stft(x: np.ndarray, p: StftParams = StftParams()) -> np.ndarray:
    """Complex STFT, shape ``(..., fft_size//2 + 1, length//hop + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    if length < p.fft_size:
        raise ValueError(f"signal length {length} shorter than fft_size {p.fft_size}")
    if length % p.hop:
        raise ValueError(f"signal length {length} is not a multiple of hop {p.hop}")
    frames = _frames(x, p.fft_size, p.hop) * p.window_array()
    spec = np.fft.rfft(frames, axis=-1)
    return np.swapaxes(spec, -1, -2)


def istft(G: np.ndarray, p: StftParams = StftParams()) -> np.ndarray:
    """Inverse of :func:`stft` by weighted overlap-add."""
    if not p.is_cola():
        raise ValueError(f"{p} does not satisfy the overlap-add condition")
    G = np.asarray(G)
    if G.shape[-2] != p.n_bins:
        raise ValueError(f"expected {p.n_bins} bins, got {G.shape[-2]}")
    n_frames = G.shape[-1]
    w = p.window_array()
    frames = np.fft.irfft(np.swapaxes(G, -1, -2), n=p.fft_size, axis=-1) * w
    ratio = p.fft_size // p.hop
    lead = frames.shape[:-2]
    out = np.zeros(lead + (n_frames + ratio - 1, p.hop))
    env = np.zeros((n_frames + ratio - 1, p.hop))
    w2 = (w * w).reshape(ratio, p.hop)
    for r in range(ratio):
        out[..., r:r + n_frames, :] += frames[..., r * p.hop:(r + 1) * p.hop]
        env[r:r + n_frames, :] += w2[r]
    out = out.reshape(lead + (-1,))
    env = env.reshape(-1)
    pad = p.fft_size // 2
    length = (n_frames - 1) * p.hop
    return out[..., pad:pad + length] / env[pad:pad + length]


def amp_compress(G: np.ndarray, alpha: float = ALPHA, beta: float = BETA) -> np.ndarray:
    """Map each cell ``c -> beta*|c|**alpha * exp(i*angle(c))``; returns real/imag channels."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    G = np.asarray(G, dtype=np.complex128)
    mag = np.abs(G)
    gain = np.zeros_like(mag)
    nz = mag > 0
    gain[nz] = beta * mag[nz] ** (alpha - 1.0)
    C = G * gain
    return np.stack([C.real, C.imag], axis=-3)


def amp_expand(M: np.ndarray, alpha: float = ALPHA, beta: float = BETA) -> np.ndarray:
    """Exact inverse of :func:`amp_compress`."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-3] != 2:
        raise ValueError("model grid must carry a real/imag channel pair on axis -3")
    C = M[..., 0, :, :] + 1j * M[..., 1, :, :]
    m = np.abs(C)
    gain = np.zeros_like(m)
    nz = m > 0
    gain[nz] = (m[nz] / beta) ** (1.0 / alpha) / m[nz]
    return C * gain


def to_model_space(x: np.ndarray, p: StftParams = StftParams(),
                   alpha: float = ALPHA, beta: float = BETA) -> np.ndarray:
    return amp_compress(stft(x, p), alpha, beta)


def from_model_space(X: np.ndarray, p: StftParams = StftParams(),
                     alpha: float = ALPHA, beta: float = BETA) -> np.ndarray:
    return istft(amp_expand(X, alpha, beta), p)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: float,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, fft_size//2 + 1)``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError(f"n_mels={n_mels} too large for fft_size={fft_size}: empty filters")
    return fb


def log_mel(x: np.ndarray, p: MelParams, sample_rate: float) -> np.ndarray:
    """``log(mel_fb @ |STFT|**2 + floor)``, shape ``(..., n_mels, frames)``."""
    fb = mel_filterbank(p.n_mels, p.fft_size, sample_rate)
    x = np.asarray(x, dtype=np.float64)
    frames = _frames(x, p.fft_size, p.hop(sample_rate)) * hann(p.fft_size)
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    return np.log(np.swapaxes(power @ fb.T, -1, -2) + p.floor)


def _crossfade(overlap: int) -> np.ndarray:
    return (np.arange(overlap) + 0.5) / overlap


def split_track(x: np.ndarray, window: int, overlap: int) -> np.ndarray:
    """Cut ``x`` into ``window``-long chunks sharing ``overlap`` samples.

    The tail is zero padded; returns shape ``(n_chunks, window)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= overlap < window:
        raise ValueError("overlap must be in [0, window)")
    step = window - overlap
    n = max(1, int(np.ceil(max(len(x) - overlap, 1) / step)))
    padded = np.zeros((n - 1) * step + window)
    padded[:len(x)] = x
    idx = np.arange(n)[:, None] * step + np.arange(window)
    return padded[idx]


def overlap_add_track(chunks, overlap: int, length: int | None = None) -> np.ndarray:
    """Reassemble chunks with a linear crossfade over each ``overlap`` region.

    ``overlap`` is in samples; use ``seconds_to_samples`` for durations.
    """
    chunks = [np.asarray(c, dtype=np.float64) for c in chunks]
    if not chunks:
        raise ValueError("no chunks")
    window = len(chunks[0])
    if any(len(c) != window for c in chunks):
        raise ValueError("inconsistent chunk lengths")
    if not 0 <= overlap < window:
        raise ValueError("overlap must be in [0, chunk length)")
    step = window - overlap
    out = np.zeros((len(chunks) - 1) * step + window)
    fade_in = _crossfade(overlap)
    for i, c in enumerate(chunks):
        w = np.ones(window)
        if i > 0 and overlap:
            w[:overlap] = fade_in
        if i < len(chunks) - 1 and overlap:
            w[window - overlap:] = 1.0 - fade_in
        out[i * step:i * step + window] += w * c
    if length is not None:
        out = out[:length]
    return out


def seconds_to_samples(seconds: float, sample_rate: float) -> int:
    return int(round(seconds * sample_rate))
