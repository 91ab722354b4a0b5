"""Waveform and time-frequency plumbing.

Spectrograms are stored frequency-major, shape (F, T). The analysis window
is a periodic Hann; inversion is weighted overlap-add normalized by the
summed squared window, which reconstructs interior samples even when the
hop does not tile the window exactly.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dgfnet.errors import ContractError, NumericError

DEFAULT_SAMPLE_RATE = 11025


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ContractError(f"waveform must be nonempty 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise NumericError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftParams:
    window_len: int = 1022
    hop: int = 256
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len):
            raise ContractError(
                f"need 0 < hop <= window_len, got hop={self.hop} window_len={self.window_len}"
            )
        if self.window_len % 2 != 0:
            raise ContractError(f"window_len must be even, got {self.window_len}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def freq_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.window_len

    def window(self) -> np.ndarray:
        n = np.arange(self.window_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)

    def ola_ripple(self) -> float:
        """Peak relative deviation of the overlapped squared window from its
        mean, over one interior hop period. Small values mean overlap-add
        inversion is well conditioned at this (window, hop)."""
        w2 = self.window() ** 2
        # deep-interior coverage: every residue class modulo hop sees the
        # same set of window taps, so fold w^2 onto one hop period
        acc = np.zeros(self.hop)
        idx = np.arange(self.window_len) % self.hop
        np.add.at(acc, idx, w2)
        return float((acc.max() - acc.min()) / acc.mean())


@dataclass(frozen=True)
class LogMap:
    """Linear-bin <-> log-bin interpolation weights.

    Forward: out[i] = (1-a[i])*mag[lo[i]] + a[i]*mag[lo[i]+1].
    Inverse maps a log-grid mask back to linear bins the same way; linear
    bins below the lowest log center clamp to log bin 0. Both directions
    reproduce an all-ones mask exactly in IEEE arithmetic.
    """

    source_bins: int
    target_bins: int
    centers_hz: np.ndarray
    fwd_lo: np.ndarray
    fwd_alpha: np.ndarray
    inv_lo: np.ndarray
    inv_alpha: np.ndarray

    @staticmethod
    def build(params: StftParams, target_bins: int) -> "LogMap":
        f = params.freq_bins
        if target_bins < 2:
            raise ContractError(f"target_bins must be >= 2, got {target_bins}")
        if target_bins > f:
            raise ContractError(f"target_bins {target_bins} exceeds source bins {f}")
        d = params.bin_hz
        lo_hz, ny_hz = d, params.sample_rate / 2.0
        i = np.arange(target_bins)
        centers = lo_hz * (ny_hz / lo_hz) ** (i / (target_bins - 1))
        pos = np.clip(centers / d, 0.0, f - 1.0)
        fwd_lo = np.minimum(pos.astype(np.int64), f - 2)
        fwd_alpha = pos - fwd_lo
        j = np.arange(f, dtype=np.float64)
        with np.errstate(divide="ignore"):
            q = (target_bins - 1) * np.log(j * d / lo_hz) / np.log(ny_hz / lo_hz)
        q = np.clip(np.nan_to_num(q, neginf=0.0), 0.0, target_bins - 1.0)
        inv_lo = np.minimum(q.astype(np.int64), target_bins - 2)
        inv_alpha = q - inv_lo
        return LogMap(f, target_bins, centers, fwd_lo, fwd_alpha, inv_lo, inv_alpha)

    def forward(self, mag: np.ndarray) -> np.ndarray:
        if mag.shape[0] != self.source_bins:
            raise ContractError(
                f"log map built for {self.source_bins} bins, got {mag.shape[0]}"
            )
        a = self.fwd_alpha[:, None]
        return (1.0 - a) * mag[self.fwd_lo] + a * mag[self.fwd_lo + 1]

    def inverse(self, grid: np.ndarray) -> np.ndarray:
        if grid.shape[0] != self.target_bins:
            raise ContractError(
                f"log map targets {self.target_bins} bins, got {grid.shape[0]}"
            )
        a = self.inv_alpha[:, None] if grid.ndim > 1 else self.inv_alpha
        lo = self.inv_lo
        return (1.0 - a) * grid[lo] + a * grid[lo + 1]


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray
    kind: str  # "complex" | "magnitude"
    freq_axis: str  # "linear" | "log"
    params: StftParams
    pad_left: int = 0
    orig_len: int = 0
    logmap: LogMap | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.bins.ndim != 2 or 0 in self.bins.shape:
            raise ContractError(f"spectrogram must be 2-D nonempty, got {self.bins.shape}")
        if self.kind not in ("complex", "magnitude"):
            raise ContractError(f"unknown spectrogram kind {self.kind!r}")
        if self.freq_axis not in ("linear", "log"):
            raise ContractError(f"unknown freq_axis {self.freq_axis!r}")
        if self.kind == "magnitude" and self.bins.min() < 0:
            raise ContractError("magnitude spectrogram has negative entries")
        if self.freq_axis == "log" and self.logmap is None:
            raise ContractError("log-axis spectrogram must carry its bin mapping")

    @property
    def n_freq(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins) if self.kind == "complex" else self.bins

    def phase(self) -> np.ndarray:
        if self.kind != "complex":
            raise ContractError("phase requires a complex spectrogram")
        return np.angle(self.bins)


def mix(sources: list[Waveform]) -> Waveform:
    if len(sources) < 2:
        raise ContractError(f"mix needs >= 2 sources, got {len(sources)}")
    n, sr = len(sources[0]), sources[0].sample_rate
    for k, s in enumerate(sources[1:], 1):
        if len(s) != n:
            raise ContractError(f"source {k} length {len(s)} != {n}")
        if s.sample_rate != sr:
            raise ContractError(f"source {k} rate {s.sample_rate} != {sr}")
    total = np.zeros(n)
    for s in sources:
        total += s.samples
    return Waveform(total, sr)


def _frame(x: np.ndarray, win: int, hop: int, n_frames: int) -> np.ndarray:
    sv = np.lib.stride_tricks.sliding_window_view(x, win)
    return sv[:: hop][:n_frames]


def stft(w: Waveform, p: StftParams, target_frames: int | None = None) -> Spectrogram:
    if w.sample_rate != p.sample_rate:
        raise ContractError(
            f"waveform rate {w.sample_rate} != stft params rate {p.sample_rate}"
        )
    n = len(w)
    if n < p.window_len:
        raise ContractError(f"waveform length {n} < window {p.window_len}")
    pad_left = 0
    x = w.samples
    if target_frames is not None:
        needed = p.window_len + (target_frames - 1) * p.hop
        if needed < n:
            raise ContractError(
                f"waveform length {n} already exceeds {target_frames} frames "
                f"(max {needed} samples)"
            )
        pad = needed - n
        pad_left = pad // 2
        x = np.pad(x, (pad_left, pad - pad_left))
    n_frames = (x.size - p.window_len) // p.hop + 1
    frames = _frame(x, p.window_len, p.hop, n_frames)
    spec = np.fft.rfft(frames * p.window(), axis=1)
    return Spectrogram(
        bins=spec.T.copy(), kind="complex", freq_axis="linear",
        params=p, pad_left=pad_left, orig_len=n,
    )


def istft(s: Spectrogram, p: StftParams, phase: np.ndarray | None = None) -> Waveform:
    if s.params != p:
        raise ContractError(f"spectrogram params {s.params} != requested {p}")
    if s.freq_axis != "linear":
        raise ContractError("istft needs a linear-axis spectrogram")
    if s.kind == "magnitude":
        if phase is None:
            raise ContractError("magnitude spectrogram needs an explicit phase grid")
        if phase.shape != s.bins.shape:
            raise ContractError(f"phase shape {phase.shape} != bins {s.bins.shape}")
        spec = s.bins * np.exp(1j * phase)
    else:
        spec = s.bins
    win = p.window()
    frames = np.fft.irfft(spec.T, n=p.window_len, axis=1)
    t = frames.shape[0]
    total = p.window_len + (t - 1) * p.hop
    num = np.zeros(total)
    den = np.zeros(total)
    w2 = win * win
    for m in range(t):
        off = m * p.hop
        num[off : off + p.window_len] += frames[m] * win
        den[off : off + p.window_len] += w2
    floor = 1e-8 * den.max()
    x = np.where(den > floor, num / np.maximum(den, floor), 0.0)
    orig = s.orig_len if s.orig_len else total
    x = x[s.pad_left : s.pad_left + orig]
    return Waveform(x, p.sample_rate)


def log_resample(s: Spectrogram, target_bins: int) -> Spectrogram:
    if s.freq_axis != "linear":
        raise ContractError("log_resample expects a linear-axis spectrogram")
    lm = LogMap.build(s.params, target_bins)
    mag = lm.forward(s.magnitude())
    return Spectrogram(
        bins=mag, kind="magnitude", freq_axis="log", params=s.params,
        pad_left=s.pad_left, orig_len=s.orig_len, logmap=lm,
    )


def resample(w: Waveform, rate: int) -> Waveform:
    """Linear-interpolation rate conversion."""
    if rate <= 0:
        raise ContractError(f"target rate must be positive, got {rate}")
    if rate == w.sample_rate:
        return w
    n_out = max(1, int(round(len(w) * rate / w.sample_rate)))
    t_out = np.arange(n_out) * (w.sample_rate / rate)
    x = np.interp(t_out, np.arange(len(w)), w.samples)
    return Waveform(x, rate)


def read_wav(path: str | Path, target_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    with _wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ContractError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getnchannels() != 1:
            raise ContractError(f"{path}: expected mono, got {f.getnchannels()} channels")
        raw = f.readframes(f.getnframes())
        sr = f.getframerate()
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return resample(Waveform(x, sr), target_rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    pcm = np.clip((x * 32768.0).round(), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def pad_to_length(w: Waveform, n: int) -> Waveform:
    """Zero-pad at the tail or truncate so the clip has exactly n samples."""
    if n <= 0:
        raise ContractError(f"target length must be positive, got {n}")
    x = w.samples
    if x.size >= n:
        return Waveform(x[:n], w.sample_rate)
    return Waveform(np.pad(x, (0, n - x.size)), w.sample_rate)
