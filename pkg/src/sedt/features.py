"""Waveform to log-mel spectrogram front end.

All transforms are deterministic numpy code: frame the signal, take rfft
magnitudes, pool through a triangular mel filterbank, then log-compress.
Frames are left-aligned at multiples of the hop; the tail is reflection
padded so the frame count is always ceil(n_samples / hop).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import ValidationError

EPS_FLOOR = 1e-10
STD_FLOOR = 1e-5


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValidationError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    win_len: int = 1024
    hop: int = 160
    n_mels: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None  # None = Nyquist
    window: str = "hann"
    eps_floor: float = EPS_FLOOR

    @property
    def hop_s(self) -> float:
        return self.hop / self.sample_rate

    def resolved_fmax(self) -> float:
        return self.sample_rate / 2.0 if self.fmax is None else self.fmax


@dataclass(frozen=True)
class LogMelSpectrogram:
    """T x n_mels log-mel matrix plus the timing needed to map frames to seconds."""

    values: np.ndarray
    hop_s: float
    clip_len_s: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValidationError("spectrogram must be 2-D (time, mels)")
        if not np.all(np.isfinite(values)):
            raise ValidationError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def _make_window(name: str, win_len: int) -> np.ndarray:
    if name == "hann":
        return np.hanning(win_len)
    if name == "rect":
        return np.ones(win_len)
    raise ValidationError(f"unknown window {name!r}")


def stft_magnitude(
    samples: np.ndarray, win_len: int, hop: int, window: str = "hann"
) -> np.ndarray:
    """Magnitude spectrogram, shape (ceil(n/hop), win_len//2 + 1).

    Frame t covers samples [t*hop, t*hop + win_len); the signal is
    reflection padded at the end so every frame is full length.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise ValidationError("stft input must be a non-empty 1-D array")
    if hop <= 0 or win_len < hop:
        raise ValidationError("need win_len >= hop > 0")
    n = samples.size
    n_frames = -(-n // hop)
    needed = (n_frames - 1) * hop + win_len
    if needed > n:
        samples = np.pad(samples, (0, needed - n), mode="reflect")
    w = _make_window(window, win_len)
    idx = np.arange(win_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * w[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, fmin: float, fmax: float, n_fft_bins: int, sample_rate: int
) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft_bins).

    Filter k peaks at mel point k+1, which is also the lower edge of
    filter k+1, so adjacent filters cross over at each other's peaks.
    """
    nyquist = sample_rate / 2.0
    if not 0 <= fmin < fmax <= nyquist:
        raise ValidationError(
            f"need 0 <= fmin < fmax <= Nyquist, got fmin={fmin} fmax={fmax}"
        )
    if n_mels < 1:
        raise ValidationError("need at least one mel filter")
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft_bins) * nyquist / (n_fft_bins - 1)
    fb = np.zeros((n_mels, n_fft_bins))
    for k in range(n_mels):
        lo, mid, hi = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def log_mel(waveform: Waveform, cfg: FeatureConfig = FeatureConfig()) -> LogMelSpectrogram:
    """Log-mel spectrogram of a waveform: log(mel_power + eps_floor)."""
    if waveform.sample_rate != cfg.sample_rate:
        raise ValidationError(
            f"waveform rate {waveform.sample_rate} != config rate {cfg.sample_rate}"
        )
    mag = stft_magnitude(waveform.samples, cfg.win_len, cfg.hop, cfg.window)
    fb = mel_filterbank(
        cfg.n_mels, cfg.fmin, cfg.resolved_fmax(), mag.shape[1], cfg.sample_rate
    )
    mel_power = (mag**2) @ fb.T
    values = np.log(mel_power + cfg.eps_floor)
    return LogMelSpectrogram(
        values=values, hop_s=cfg.hop_s, clip_len_s=waveform.duration_s
    )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-mel-bin mean and standard deviation from a training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValidationError("stats must be matching 1-D arrays")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def compute_normalization_stats(specs: Sequence[LogMelSpectrogram]) -> NormalizationStats:
    if not specs:
        raise ValidationError("cannot compute stats from an empty split")
    stacked = np.concatenate([s.values for s in specs], axis=0)
    return NormalizationStats(mean=stacked.mean(axis=0), std=stacked.std(axis=0))


def normalize(spec: LogMelSpectrogram, stats: NormalizationStats) -> LogMelSpectrogram:
    """Shift/scale each mel bin by the split statistics.

    Not idempotent: applying the same stats twice rescales again.
    """
    if stats.mean.size != spec.n_mels:
        raise ValidationError("stats dimensionality does not match spectrogram")
    std = np.maximum(stats.std, STD_FLOOR)
    values = (spec.values - stats.mean[None, :]) / std[None, :]
    return LogMelSpectrogram(values=values, hop_s=spec.hop_s, clip_len_s=spec.clip_len_s)


def save_features(spec: LogMelSpectrogram, clip_id: str, out_dir: str | Path) -> Path:
    """Write one clip's features: <clip_id>.npy plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    npy_path = out_dir / f"{clip_id}.npy"
    np.save(npy_path, spec.values)
    sidecar = {
        "clip_id": clip_id,
        "hop_s": spec.hop_s,
        "clip_len_s": spec.clip_len_s,
        "n_mels": spec.n_mels,
    }
    (out_dir / f"{clip_id}.json").write_text(json.dumps(sidecar))
    return npy_path


def load_features(npy_path: str | Path) -> LogMelSpectrogram:
    npy_path = Path(npy_path)
    sidecar = json.loads(npy_path.with_suffix(".json").read_text())
    values = np.load(npy_path)
    if values.shape[1] != sidecar["n_mels"]:
        raise ValidationError(f"feature file {npy_path} disagrees with its sidecar")
    return LogMelSpectrogram(
        values=values, hop_s=sidecar["hop_s"], clip_len_s=sidecar["clip_len_s"]
    )
