"""Audio segmentation, STFT feature maps, and beat detection.

The analysis chain is locked to a 15360 Hz sample rate with a 512-sample hop
so that feature frames land at exactly 30 per second, one per motion frame.
193 spectral bins come from a 384-point FFT (1 + 384/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

ANALYSIS_RATE = 15360
N_FFT = 384
HOP = 512
N_BINS = N_FFT // 2 + 1
FRAME_RATE = 30

_RESAMPLE_HALF_TAPS = 32  # 64-tap windowed-sinc kernel
_KAISER_BETA = 8.6


class AudioError(Exception):
    pass


class TooShortError(AudioError):
    pass


class SampleRateError(AudioError):
    pass


class WavFormatError(AudioError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise WavFormatError(
                f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio contains NaN/Inf samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class StftFeatureMap:
    frames: np.ndarray  # (T, 193) log1p magnitudes
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_BINS:
            raise AudioError(
                f"feature map must be (T, {N_BINS}), got {self.frames.shape}")


@dataclass
class BeatTimes:
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise AudioError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


def read_wav(path) -> AudioClip:
    """Read a mono PCM-16 or IEEE float-32 WAV file."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: unsupported sample format {data.dtype}, "
            "expected int16 PCM or float32")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Windowed-sinc resampling (Kaiser window, 64 taps)."""
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    x = clip.samples
    n_in = len(x)
    ratio = clip.sample_rate / target_rate
    n_out = int(round(n_in / ratio))
    # anti-aliasing cutoff relative to the input Nyquist
    fc = min(1.0, 1.0 / ratio)
    half = _RESAMPLE_HALF_TAPS
    pad = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    out = np.empty(n_out)
    for lo in range(0, n_out, 65536):
        hi = min(lo + 65536, n_out)
        m = np.arange(lo, hi)
        tau = m * ratio
        base = np.floor(tau).astype(np.int64)
        k = np.arange(-half + 1, half + 1)
        j = base[:, None] + k[None, :]
        u = j - tau[:, None]
        w = np.i0(_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - (u / half) ** 2)))
        w /= np.i0(_KAISER_BETA)
        h = fc * np.sinc(fc * u) * w
        seg = pad[j + half]
        out[lo:hi] = (seg * h).sum(axis=1) / h.sum(axis=1)
    return AudioClip(out, target_rate)


def segment_audio(clip: AudioClip, seconds: float = 4.0) -> list[AudioClip]:
    """Split into floor(duration/seconds) contiguous segments from t=0."""
    if seconds <= 0:
        raise AudioError(f"segment length must be positive, got {seconds}")
    seg_len = int(round(seconds * clip.sample_rate))
    n_seg = len(clip.samples) // seg_len
    if n_seg < 1:
        raise TooShortError(
            f"clip of {clip.duration:.3f}s is shorter than one "
            f"{seconds:.3f}s segment")
    return [AudioClip(clip.samples[i * seg_len:(i + 1) * seg_len].copy(),
                      clip.sample_rate)
            for i in range(n_seg)]


def _frame_signal(x: np.ndarray, n_frames: int) -> np.ndarray:
    """Centered frames of length N_FFT at HOP spacing with reflect padding."""
    half = N_FFT // 2
    padded = np.pad(x, half, mode="reflect")
    idx = np.arange(n_frames)[:, None] * HOP + np.arange(N_FFT)[None, :]
    return padded[idx]


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_magnitudes(clip: AudioClip) -> np.ndarray:
    """Raw magnitude spectrogram, (T, 193), frame t centered at t*HOP."""
    n = len(clip.samples)
    if n < N_FFT:
        raise TooShortError(f"need at least {N_FFT} samples, got {n}")
    n_frames = int(round(n / clip.sample_rate * FRAME_RATE))
    frames = _frame_signal(clip.samples, n_frames) * _hann_periodic(N_FFT)
    return np.abs(np.fft.rfft(frames, axis=1))


def stft_features(clip: AudioClip, allow_resample: bool = False) -> StftFeatureMap:
    """Log1p magnitude feature map at exactly 30 frames per second."""
    if clip.sample_rate != ANALYSIS_RATE:
        if not allow_resample:
            raise SampleRateError(
                f"clip is at {clip.sample_rate} Hz; analysis requires "
                f"{ANALYSIS_RATE} Hz (pass allow_resample=True to convert)")
        clip = resample(clip, ANALYSIS_RATE)
    return StftFeatureMap(np.log1p(stft_magnitudes(clip)))


def moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average with edge replication (no zero-pad ramps)."""
    half = width // 2
    padded = np.concatenate([np.full(half, x[0]), x,
                             np.full(width - 1 - half, x[-1])])
    return np.convolve(padded, np.ones(width) / width, mode="valid")


def _peak_runs(env: np.ndarray, threshold: float,
               tol: float = 0.0) -> list[tuple[int, float]]:
    """Centers of plateau runs that exceed the threshold and both flanks.

    Values within ``tol`` count as equal, so float noise does not split a
    plateau.  Runs touching either boundary are rejected; a flat envelope
    therefore yields no peaks.
    """
    peaks = []
    n = len(env)
    i = 1
    while i < n - 1:
        j = i
        while j + 1 < n and abs(env[j + 1] - env[i]) <= tol:
            j += 1
        if (j < n - 1 and env[i] > env[i - 1] + tol and env[i] > env[j + 1] + tol
                and env[i] > threshold):
            peaks.append(((i + j) // 2, float(env[i])))
        i = j + 1
    return peaks


def _plateau_tol(env: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.abs(env).max()))


def _select_separated(peaks: list[tuple[int, float]], min_sep: int) -> list[int]:
    chosen: list[int] = []
    for idx, _height in sorted(peaks, key=lambda p: (-p[1], p[0])):
        if all(abs(idx - c) >= min_sep for c in chosen):
            chosen.append(idx)
    return sorted(chosen)


def onset_envelope(clip: AudioClip) -> np.ndarray:
    """Smoothed spectral flux at 30 frames per second."""
    feats = stft_features(clip, allow_resample=True).frames
    flux = np.zeros(len(feats))
    diff = feats[1:] - feats[:-1]
    flux[1:] = np.maximum(diff, 0.0).sum(axis=1)
    return moving_average(flux, 5)


def detect_beats(clip: AudioClip, min_separation: int = 10) -> BeatTimes:
    """Peaks of the onset envelope above mean + 1 sigma."""
    if clip.duration < 1.0:
        raise TooShortError(
            f"beat detection needs at least 1s of audio, got {clip.duration:.3f}s")
    env = onset_envelope(clip)
    threshold = env.mean() + env.std()
    peaks = _peak_runs(env, threshold, tol=_plateau_tol(env))
    frames = _select_separated(peaks, min_separation)
    return BeatTimes(np.asarray(frames, dtype=np.float64) / FRAME_RATE)
