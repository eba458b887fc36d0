"""Waveform to spliced log-mel feature matrix.

Telephone-band defaults: 8 kHz audio, 25 ms Hamming window, 10 ms hop,
256-point FFT, 23 mel filters spanning 0 Hz to Nyquist, 15-frame splicing
taken every 10 frames (F = 345, one feature vector per 0.1 s).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 8000
WIN_SEC = 0.025
HOP_SEC = 0.010
N_FFT = 256
N_MELS = 23
CONTEXT = 15
STRIDE = 10
LOG_FLOOR = 1e-10
FEAT_DIM = N_MELS * CONTEXT
FRAME_STEP_SEC = HOP_SEC * STRIDE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    frame_step_sec: float = FRAME_STEP_SEC

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x F with T >= 1, got {self.rows.shape}")

    @property
    def T(self) -> int:
        return self.rows.shape[0]


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(samples, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def frame_and_window(w: Waveform, win_sec=WIN_SEC, hop_sec=HOP_SEC) -> np.ndarray:
    win = int(round(win_sec * w.sample_rate))
    hop = int(round(hop_sec * w.sample_rate))
    n = len(w.samples)
    if n < win:
        raise ValueError(f"waveform has {n} samples, shorter than one {win}-sample window")
    count = (n - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(count)[:, None]
    return w.samples[idx] * np.hamming(win)


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE,
                   fmin=0.0, fmax=None) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), peak value 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def filter_centers(n_mels=N_MELS, sample_rate=SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def log_mel(frames: np.ndarray, sample_rate=SAMPLE_RATE, n_fft=N_FFT) -> np.ndarray:
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(N_MELS, n_fft, sample_rate).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def splice(mel: np.ndarray, context=CONTEXT, stride=STRIDE) -> FeatureMatrix:
    """Stack ``context`` neighbouring frames around every ``stride``-th frame.

    Frames past either end repeat the boundary frame.
    """
    t0 = mel.shape[0]
    if t0 < context:
        raise ValueError(f"need at least {context} mel frames to splice, got {t0}")
    half = context // 2
    centers = np.arange(0, t0, stride)
    idx = np.clip(centers[:, None] + np.arange(-half, half + 1)[None, :], 0, t0 - 1)
    rows = mel[idx].reshape(len(centers), -1)
    return FeatureMatrix(rows, frame_step_sec=HOP_SEC * stride)


def extract(w: Waveform) -> FeatureMatrix:
    return splice(log_mel(frame_and_window(w), sample_rate=w.sample_rate))


# ---------------------------------------------------------------- text formats


def write_matrix(path, m: np.ndarray, fmt="%.6g"):
    np.savetxt(path, np.atleast_2d(m), fmt=fmt, delimiter=" ")


def read_matrix(path, dtype=np.float32) -> np.ndarray:
    m = np.loadtxt(path, dtype=dtype, ndmin=2)
    return m


def write_labels(path, labels: np.ndarray):
    np.savetxt(path, labels.astype(np.int64), fmt="%d", delimiter=" ")


def read_labels(path) -> np.ndarray:
    lab = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if not np.isin(lab, (0, 1)).all():
        raise ValueError(f"{path}: labels must be 0/1")
    return lab.astype(np.uint8)
