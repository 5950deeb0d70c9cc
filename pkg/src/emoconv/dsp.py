"""Deterministic signal-processing front end.

Waveform I/O, log-mel analysis, mel-cepstra, DTW alignment, autocorrelation
pitch tracking and an iterative phase-reconstruction synthesizer. Everything
here is pure numpy/scipy: same input, bit-identical output.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.optimize import nnls
from scipy.signal import get_window

CORPUS_SAMPLE_RATE = 16000
MEL_CACHE_MAGIC = b"AINNMEL1"


class AudioFormatError(ValueError):
    """WAV payload outside the corpus contract (channels, width, rate)."""


class MelCacheError(ValueError):
    """Malformed mel cache file."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioFormatError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise AudioFormatError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelConfig:
    """STFT / mel-filterbank analysis settings (16 kHz vocoder convention)."""

    n_mels: int = 80
    fft_size: int = 1024
    hop_size: int = 256
    window: str = "hann"
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.n_mels != 80:
            raise ValueError("n_mels is fixed at 80 for this corpus")
        if not 0 < self.hop_size < self.fft_size:
            raise ValueError("hop_size must satisfy 0 < hop < fft_size")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValueError("need 0 <= fmin < fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass(frozen=True)
class MelSpectrogram:
    """T x n_mels matrix of natural-log mel energies."""

    frames: np.ndarray
    config: MelConfig

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("mel frames must be a (T, n_mels) matrix with T >= 1")
        if frames.shape[1] != self.config.n_mels:
            raise ValueError(
                f"expected {self.config.n_mels} mel bins, got {frames.shape[1]}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError("mel frames contain non-finite entries")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class McepSequence:
    """T x order mel-cepstral coefficients, zeroth coefficient excluded."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("cepstral frames must be a (T, order) matrix")
        if not np.all(np.isfinite(frames)):
            raise ValueError("cepstral frames contain non-finite entries")
        object.__setattr__(self, "frames", frames)

    @property
    def order(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, expected_rate: int | None = CORPUS_SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1].

    Off-contract payloads (stereo, non-16-bit, unexpected rate) raise
    AudioFormatError instead of being silently converted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise AudioFormatError(f"{path}: mono required, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise AudioFormatError(
                f"{path}: 16-bit PCM required, got {8 * fh.getsampwidth()}-bit"
            )
        rate = fh.getframerate()
        if expected_rate is not None and rate != expected_rate:
            raise AudioFormatError(
                f"{path}: sample rate {rate} Hz does not match corpus rate {expected_rate} Hz"
            )
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate_hz=rate)


def save_wav(path, w: Waveform) -> None:
    """Write a Waveform as 16-bit PCM mono WAV."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Mel analysis


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular mel filter."""
    pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, peak 1, shape (n_mels, fft_size//2 + 1)."""
    if cfg.fmax_hz > sample_rate / 2:
        raise ValueError("fmax exceeds Nyquist")
    n_bins = cfg.fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    pts = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    )
    lower = pts[:-2, None]
    center = pts[1:-1, None]
    upper = pts[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    """T = 1 + floor((N - fft_size) / hop_size); requires N >= fft_size."""
    if n_samples < cfg.fft_size:
        raise ValueError(
            f"audio of {n_samples} samples is shorter than one window ({cfg.fft_size})"
        )
    return 1 + (n_samples - cfg.fft_size) // cfg.hop_size


def _frame_signal(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    n_frames = frame_count(len(samples), cfg)
    idx = np.arange(n_frames)[:, None] * cfg.hop_size + np.arange(cfg.fft_size)[None, :]
    return samples[idx]


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Natural-log mel power spectrogram, no padding or centering.

    Frame t covers samples [t*hop, t*hop + fft_size); each frame is
    log(max(filterbank @ |rfft(window * frame)|^2, log_floor)).
    """
    frames = _frame_signal(w.samples, cfg)
    win = get_window(cfg.window, cfg.fft_size, fftbins=True)
    spec = np.fft.rfft(frames * win[None, :], axis=1)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(cfg, w.sample_rate_hz)
    mel = power @ fb.T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames=logmel, config=cfg)


def mel_cepstrum(m: MelSpectrogram, order: int) -> McepSequence:
    """Coefficients 1..order of the orthonormal DCT-II of each log-mel frame."""
    if not 1 <= order < m.config.n_mels:
        raise ValueError(f"cepstral order must be in [1, {m.config.n_mels}), got {order}")
    coeffs = dct(m.frames, type=2, norm="ortho", axis=1)
    return McepSequence(frames=coeffs[:, 1 : order + 1])


# ---------------------------------------------------------------------------
# DTW


def dtw_align(a: McepSequence, b: McepSequence) -> list[tuple[int, int]]:
    """Minimum-cost monotone alignment path between two cepstral sequences.

    Steps are (1,0), (0,1) and (1,1); the path runs from (0,0) to
    (T_a-1, T_b-1) and minimizes the summed Euclidean frame distance.
    """
    fa, fb = a.frames, b.frames
    na, nb = fa.shape[0], fb.shape[0]
    # local distance matrix, vectorized
    diff = fa[:, None, :] - fb[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    acc = np.full((na, nb), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(na):
        for j in range(nb):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = dist[i, j] + best

    path = [(na - 1, nb - 1)]
    i, j = na - 1, nb - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return path


def alignment_cost(a: McepSequence, b: McepSequence, path) -> float:
    """Summed Euclidean frame distance along an alignment path."""
    return float(
        sum(np.linalg.norm(a.frames[i] - b.frames[j]) for i, j in path)
    )


# ---------------------------------------------------------------------------
# Pitch


def pitch_contour(
    w: Waveform,
    fmin_hz: float = 50.0,
    fmax_hz: float = 600.0,
    frame_size: int = 1024,
    hop_size: int = 256,
    voicing_threshold: float = 0.5,
    energy_floor: float = 1e-5,
) -> list[tuple[int, float | None]]:
    """Autocorrelation pitch track: one (frame_index, f0 or None) per frame.

    A frame is unvoiced when its RMS is below energy_floor or the normalized
    autocorrelation peak in the lag search range falls below the voicing
    threshold. Peak lags are refined by parabolic interpolation.
    """
    sr = w.sample_rate_hz
    cfg = MelConfig(fft_size=frame_size, hop_size=hop_size)
    frames = _frame_signal(w.samples, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)

    lag_min = max(2, int(sr / fmax_hz))
    lag_max = min(frame_size - 2, int(np.ceil(sr / fmin_hz)))

    # full autocorrelation via FFT, one pass for all frames
    n_fft = int(2 ** np.ceil(np.log2(2 * frame_size)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=n_fft, axis=1)[:, :frame_size]

    out: list[tuple[int, float | None]] = []
    for t in range(frames.shape[0]):
        r = acf[t]
        rms = np.sqrt(np.mean(frames[t] ** 2))
        if rms < energy_floor or r[0] <= 0:
            out.append((t, None))
            continue
        seg = r[lag_min : lag_max + 1]
        peak = float(seg.max())
        confidence = peak / r[0]
        if confidence < voicing_threshold:
            out.append((t, None))
            continue
        # the ACF of a periodic signal also peaks at lag multiples; among
        # local maxima near the global one, the smallest lag is the period
        interior = seg[1:-1]
        is_peak = (interior >= seg[:-2]) & (interior >= seg[2:]) & (
            interior >= 0.85 * peak
        )
        peaks = np.nonzero(is_peak)[0] + 1
        if not len(peaks):
            # maximum sits on the search boundary: no trustworthy period
            out.append((t, None))
            continue
        k = int(peaks[0]) + lag_min
        # parabolic refinement around the peak
        if 1 <= k < frame_size - 1:
            denom = r[k - 1] - 2.0 * r[k] + r[k + 1]
            delta = 0.0 if denom == 0 else 0.5 * (r[k - 1] - r[k + 1]) / denom
            delta = float(np.clip(delta, -0.5, 0.5))
        else:
            delta = 0.0
        out.append((t, sr / (k + delta)))
    return out


# ---------------------------------------------------------------------------
# Mel inversion


def _stft(samples: np.ndarray, cfg: MelConfig, win: np.ndarray) -> np.ndarray:
    return np.fft.rfft(_frame_signal(samples, cfg) * win[None, :], axis=1)


def _istft(spec: np.ndarray, cfg: MelConfig, win: np.ndarray) -> np.ndarray:
    n_frames = spec.shape[0]
    length = (n_frames - 1) * cfg.hop_size + cfg.fft_size
    out = np.zeros(length)
    norm = np.zeros(length)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)
    for t in range(n_frames):
        start = t * cfg.hop_size
        out[start : start + cfg.fft_size] += frames[t] * win
        norm[start : start + cfg.fft_size] += win * win
    # flooring the normalization at a fraction of full coverage keeps the
    # weakly-covered run-in/out samples from blowing up; they fade instead
    floor = max(1e-8, 0.1 * float(norm.max()))
    return out / np.maximum(norm, floor)


def invert_mel(m: MelSpectrogram, iterations: int = 32, seed: int = 0) -> Waveform:
    """Waveform reconstruction from a log-mel spectrogram.

    The mel projection is undone by the filterbank pseudo-inverse; phase is
    recovered by Griffin-Lim style iterations. iterations == 0 keeps the
    zero-phase estimate; otherwise the initial phase is drawn from `seed`.
    Bins stuck at the log floor are treated as silent.
    """
    cfg = m.config
    fb = mel_filterbank(cfg, CORPUS_SAMPLE_RATE)
    power = np.exp(m.frames)
    power[power <= cfg.log_floor * (1.0 + 1e-9)] = 0.0
    # non-negative least squares keeps the linear power sparse instead of
    # smearing peaks across neighboring bins the way a pseudo-inverse does
    lin_power = np.zeros((power.shape[0], fb.shape[1]))
    for t in range(power.shape[0]):
        if power[t].any():
            lin_power[t] = nnls(fb, power[t])[0]
    magnitude = np.sqrt(lin_power)

    win = get_window(cfg.window, cfg.fft_size, fftbins=True)
    if iterations == 0:
        # zero phase about the frame center, where the window peaks
        phase = np.tile(-np.pi * np.arange(magnitude.shape[1]), (magnitude.shape[0], 1))
    else:
        rng = np.random.default_rng(seed)
        phase = rng.uniform(-np.pi, np.pi, size=magnitude.shape)
    spec = magnitude * np.exp(1j * phase)
    for _ in range(iterations):
        x = _istft(spec, cfg, win)
        rebuilt = _stft(x, cfg, win)
        spec = magnitude * np.exp(1j * np.angle(rebuilt))
    x = np.clip(_istft(spec, cfg, win), -1.0, 1.0)
    return Waveform(samples=x, sample_rate_hz=CORPUS_SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Mel cache files


def write_mel_cache(path, m: MelSpectrogram) -> None:
    """Binary mel dump: 16-byte header (magic, T, n_mels) + row-major f32."""
    frames = m.frames.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MEL_CACHE_MAGIC)
        fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes(order="C"))


def read_mel_cache(path, cfg: MelConfig | None = None) -> MelSpectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MEL_CACHE_MAGIC:
            raise MelCacheError(f"{path}: bad magic {magic!r}")
        n_frames, n_mels = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    expected = n_frames * n_mels * 4
    if len(payload) != expected:
        raise MelCacheError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_mels)
    return MelSpectrogram(frames=frames.astype(np.float64), config=cfg or MelConfig())
