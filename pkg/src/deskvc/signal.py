"""Deterministic audio front-end: STFT/mel extraction, spectrogram resize
augmentation, pitch and energy tracking.

All operations are pure functions over immutable inputs. Framing follows a
single convention: reflect-padded centering so that every framed output of a
length-L waveform has ceil(L / hop) frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal

from .errors import InputError

SAMPLE_RATE = 16000
N_FFT = 1280
WIN_LENGTH = 1280
HOP_LENGTH = 320
N_FREQ = N_FFT // 2 + 1  # 641
N_MELS = 80
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-5

SR_RATIO_MIN = 0.85
SR_RATIO_MAX = 1.15

F0_MIN = 60.0
F0_MAX = 500.0
APERIODICITY_THRESHOLD = 0.2


@dataclass(frozen=True)
class StftConfig:
    """Analysis settings: 1280-sample Hann window, hop = window / 4."""

    n_fft: int = N_FFT
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft != self.win_length:
            raise InputError(f"n_fft ({self.n_fft}) must equal win_length ({self.win_length})")
        if self.hop_length * 4 != self.win_length:
            raise InputError(
                f"hop_length ({self.hop_length}) must be win_length/4 ({self.win_length // 4})"
            )
        if self.window != "hann":
            raise InputError(f"unsupported window: {self.window!r}")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1


@dataclass(frozen=True)
class Waveform:
    """Mono 16 kHz waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise InputError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if samples.size < WIN_LENGTH:
            raise InputError(
                f"waveform too short: {samples.size} samples < one window ({WIN_LENGTH})"
            )
        if not np.all(np.isfinite(samples)):
            raise InputError("waveform contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0 + 1e-9:
            raise InputError("waveform amplitudes must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def n_frames(self) -> int:
        return num_frames(self.samples.size)


@dataclass(frozen=True)
class LinearSpectrogram:
    """Magnitude spectrogram, frames x 641 nonnegative values."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != self.config.n_freq:
            raise InputError(
                f"linear spectrogram must be [frames x {self.config.n_freq}], got {values.shape}"
            )
        if values.size and float(values.min()) < 0:
            raise InputError("linear spectrogram has negative magnitudes")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-compressed 80-bin mel spectrogram, frames x 80."""

    values: np.ndarray
    fmin: float = MEL_FMIN
    fmax: float = MEL_FMAX

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != N_MELS:
            raise InputError(f"mel spectrogram must be [frames x {N_MELS}], got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("mel spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class F0Track:
    """Per-frame fundamental frequency in Hz; 0 on unvoiced frames."""

    f0: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=np.float64)
        voiced = np.asarray(self.voiced, dtype=bool)
        if f0.shape != voiced.shape or f0.ndim != 1:
            raise InputError("f0 and voiced must be 1-D arrays of equal length")
        if np.any(f0 < 0):
            raise InputError("f0 values must be nonnegative")
        if not np.array_equal(f0 > 0, voiced):
            raise InputError("voicing mask must match f0 > 0")
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "voiced", voiced)

    @property
    def n_frames(self) -> int:
        return self.f0.size


@dataclass(frozen=True)
class EnergyTrack:
    """Per-frame RMS amplitude."""

    rms: np.ndarray

    def __post_init__(self):
        rms = np.asarray(self.rms, dtype=np.float64)
        if rms.ndim != 1:
            raise InputError("rms must be a 1-D array")
        if np.any(rms < 0):
            raise InputError("rms values must be nonnegative")
        object.__setattr__(self, "rms", rms)

    @property
    def n_frames(self) -> int:
        return self.rms.size


def num_frames(n_samples: int, hop_length: int = HOP_LENGTH) -> int:
    """Frame count under centered framing: ceil(n_samples / hop)."""
    return -(-n_samples // hop_length)


def _pad_centered(samples: np.ndarray, cfg: StftConfig) -> tuple[np.ndarray, int]:
    """Reflect-pad so that sliding windows yield ceil(L/hop) frames."""
    frames = num_frames(samples.size, cfg.hop_length)
    total = frames * cfg.hop_length + (cfg.win_length - cfg.hop_length)
    left = (cfg.win_length - cfg.hop_length) // 2
    right = total - samples.size - left
    return np.pad(samples, (left, right), mode="reflect"), frames


def _frame(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    padded, frames = _pad_centered(samples, cfg)
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.win_length)
    return view[:: cfg.hop_length][:frames]


def _hann(cfg: StftConfig) -> np.ndarray:
    return scipy.signal.get_window("hann", cfg.win_length, fftbins=True)


def stft_complex(w: Waveform, cfg: StftConfig | None = None) -> np.ndarray:
    """Complex STFT [frames x n_freq] under the shared framing convention."""
    cfg = cfg or StftConfig()
    frames = _frame(w.samples, cfg)
    return np.fft.rfft(frames * _hann(cfg), n=cfg.n_fft, axis=1)


def stft_linear(w: Waveform, cfg: StftConfig | None = None) -> LinearSpectrogram:
    """Magnitude spectrogram of a 16 kHz waveform."""
    cfg = cfg or StftConfig()
    return LinearSpectrogram(np.abs(stft_complex(w, cfg)), config=cfg)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_freq: int = N_FREQ,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Triangular mel filterbank [n_mels x n_freq], peak-1 triangles."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(n_freq) * sample_rate / (2.0 * (n_freq - 1))
    lower = (freqs[None, :] - hz_pts[:-2, None]) / (hz_pts[1:-1, None] - hz_pts[:-2, None])
    upper = (hz_pts[2:, None] - freqs[None, :]) / (hz_pts[2:, None] - hz_pts[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


_MEL_BASIS: np.ndarray | None = None


def _mel_basis() -> np.ndarray:
    global _MEL_BASIS
    if _MEL_BASIS is None:
        _MEL_BASIS = mel_filterbank()
    return _MEL_BASIS


def mel_spectrogram(lin: LinearSpectrogram) -> MelSpectrogram:
    """80-bin log-mel spectrogram: log(clamp(mel_fb @ magnitudes, 1e-5))."""
    basis = _mel_basis()
    if lin.values.shape[1] != basis.shape[1]:
        raise InputError(
            f"linear spectrogram has {lin.values.shape[1]} bins, filterbank expects {basis.shape[1]}"
        )
    mel = lin.values @ basis.T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)))


def sr_augment(
    mel: MelSpectrogram, r: float | None = None, rng_seed: int | None = None
) -> MelSpectrogram:
    """Resize the mel-frequency axis by ratio r, keeping 80 bins.

    r < 1 compresses the content into round(80*r) low bins and pads the top
    with the frame's minimum value; r > 1 stretches and crops back to 80 bins.
    If r is None it is drawn uniformly from [0.85, 1.15] using rng_seed.
    """
    if r is None:
        rng = np.random.default_rng(rng_seed)
        r = float(rng.uniform(SR_RATIO_MIN, SR_RATIO_MAX))
    if not (SR_RATIO_MIN <= r <= SR_RATIO_MAX):
        raise InputError(f"resize ratio r={r} outside [{SR_RATIO_MIN}, {SR_RATIO_MAX}]")

    values = mel.values
    n_bins = values.shape[1]
    target = int(round(n_bins * r))
    pos = np.arange(target) * (n_bins - 1) / (target - 1)
    idx = np.floor(pos).astype(int)
    frac = pos - idx
    idx_hi = np.minimum(idx + 1, n_bins - 1)
    resized = values[:, idx] * (1.0 - frac) + values[:, idx_hi] * frac

    if target >= n_bins:
        out = resized[:, :n_bins]
    else:
        out = np.empty_like(values)
        out[:, :target] = resized
        out[:, target:] = values.min(axis=1, keepdims=True)
    return MelSpectrogram(out, fmin=mel.fmin, fmax=mel.fmax)


def estimate_f0(w: Waveform) -> F0Track:
    """YIN-style per-frame F0 in [60, 500] Hz; frame 1280, hop 320.

    Frames whose minimum cumulative-mean-normalized difference exceeds the
    aperiodicity threshold (0.2) are marked unvoiced with f0 = 0.
    """
    cfg = StftConfig()
    frames = _frame(w.samples, cfg).astype(np.float64)
    tau_min = int(np.floor(w.sample_rate / F0_MAX))
    tau_max = int(np.ceil(w.sample_rate / F0_MIN))
    eff = cfg.win_length - tau_max

    n = frames.shape[0]
    diff = np.empty((n, tau_max + 1))
    base = frames[:, :eff]
    for tau in range(tau_max + 1):
        d = base - frames[:, tau : tau + eff]
        diff[:, tau] = np.einsum("ij,ij->i", d, d)

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    taus = np.arange(1, tau_max + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmndf[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus / np.where(cum > 0, cum, 1.0), 1.0)

    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    for i in range(n):
        row = cmndf[i]
        below = np.flatnonzero(row[tau_min : tau_max + 1] < APERIODICITY_THRESHOLD)
        if below.size == 0:
            continue
        # Walk from the first dip to its local minimum to dodge octave errors.
        tau = tau_min + int(below[0])
        while tau + 1 <= tau_max and row[tau + 1] < row[tau]:
            tau += 1
        if 0 < tau < tau_max:
            a, b, c = row[tau - 1], row[tau], row[tau + 1]
            denom = a - 2.0 * b + c
            shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
            tau_hat = tau + float(np.clip(shift, -1.0, 1.0))
        else:
            tau_hat = float(tau)
        candidate = w.sample_rate / tau_hat
        if F0_MIN <= candidate <= F0_MAX:
            f0[i] = candidate
            voiced[i] = True
    return F0Track(f0, voiced)


def rms_energy(w: Waveform) -> EnergyTrack:
    """Per-frame RMS amplitude; frame 1280, hop 320."""
    frames = _frame(w.samples, StftConfig())
    return EnergyTrack(np.sqrt(np.mean(frames**2, axis=1)))


def load_wav(path) -> Waveform:
    """Read mono PCM-16 WAV at 16 kHz; anything else is rejected."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise InputError(f"no such audio file: {path}") from None
    except ValueError as exc:
        raise InputError(f"unreadable WAV file {path}: {exc}") from None
    if rate != SAMPLE_RATE:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (no resampling)")
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.ndim} channels axis")
    if data.dtype != np.int16:
        raise InputError(f"{path}: expected PCM-16 samples, got dtype {data.dtype}")
    return Waveform(data.astype(np.float64) / 32768.0)


def save_wav(path, w: Waveform) -> None:
    """Write a waveform as mono PCM-16 WAV at 16 kHz."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(path, w.sample_rate, pcm)
