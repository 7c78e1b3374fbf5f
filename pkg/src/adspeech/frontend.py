"""Audio loading, log-mel features, segmentation and random cropping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


class AudioIOError(Exception):
    pass


class FeatureError(Exception):
    pass


@dataclass
class AcousticSequence:
    kind: str  # "waveform" | "logmel"
    data: np.ndarray  # waveform: (T,), logmel: (frames, n_mels)
    sample_rate: int
    frame_shift: float | None = None  # seconds, logmel only
    padded: bool = False

    def __post_init__(self):
        if self.kind not in ("waveform", "logmel"):
            raise FeatureError(f"unknown kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("acoustic data contains NaN/Inf")
        if self.kind == "waveform":
            if self.data.ndim != 1:
                raise FeatureError("waveform must be 1-D")
            if self.data.size and (self.data.min() < -1.0 or self.data.max() > 1.0):
                raise FeatureError("waveform values must lie in [-1,1]")
        else:
            if self.data.ndim != 2:
                raise FeatureError("logmel must be 2-D (frames, n_mels)")
            if self.frame_shift is None or self.frame_shift <= 0:
                raise FeatureError("logmel requires a positive frame_shift")

    @property
    def duration(self) -> float:
        if self.kind == "waveform":
            return self.data.shape[0] / self.sample_rate
        return self.data.shape[0] * self.frame_shift

    def n_steps(self) -> int:
        return self.data.shape[0]

    def step_rate(self) -> float:
        """Time steps per second along axis 0."""
        if self.kind == "waveform":
            return float(self.sample_rate)
        return 1.0 / self.frame_shift


@dataclass(frozen=True)
class SegmentationPolicy:
    segment_len: float  # seconds
    hop: float  # seconds
    pad_last: bool = True
    min_keep: float = 1.0  # seconds

    def __post_init__(self):
        if not (0 < self.hop <= self.segment_len):
            raise FeatureError(f"need 0 < hop <= segment_len, got {self}")
        if not (0 <= self.min_keep <= self.segment_len):
            raise FeatureError(f"need 0 <= min_keep <= segment_len, got {self}")


def load_audio(path, target_rate: int = SAMPLE_RATE) -> AcousticSequence:
    """Read a PCM WAV, downmix to mono, resample and scale to [-1,1]."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioIOError(f"cannot read {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        scale = float(max(abs(np.iinfo(data.dtype).min), np.iinfo(data.dtype).max))
        data = data.astype(np.float64) / scale
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        data = resample_poly(data, target_rate // g, rate // g)
    data = np.clip(data, -1.0, 1.0)
    return AcousticSequence(kind="waveform", data=data, sample_rate=target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1)."""
    if fmax is None:
        fmax = sample_rate / 2
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bins - left) / max(center - left, 1e-12)
        down = (right - bins) / max(right - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_filter_centers(n_mels: int, sample_rate: int,
                       fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    if fmax is None:
        fmax = sample_rate / 2
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def frame_signal(x: np.ndarray, win: int, shift: int) -> np.ndarray:
    n_frames = (x.shape[0] - win) // shift + 1
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    return x[idx]


def logmel(seq: AcousticSequence, n_mels: int = 80,
           win: float = 0.025, shift: float = 0.010) -> AcousticSequence:
    """Log mel-filterbank energies with a Hann window and energy floor."""
    if seq.kind != "waveform":
        raise FeatureError("logmel expects a waveform input")
    sr = seq.sample_rate
    win_s = int(round(win * sr))
    shift_s = int(round(shift * sr))
    if seq.data.shape[0] < win_s:
        raise FeatureError(
            f"input of {seq.data.shape[0]} samples is shorter than one {win_s}-sample window")
    frames = frame_signal(seq.data, win_s, shift_s)
    window = np.hanning(win_s)
    spec = np.abs(np.fft.rfft(frames * window, n=win_s, axis=1)) ** 2
    fb = mel_filterbank(n_mels, win_s, sr)
    energies = spec @ fb.T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    return AcousticSequence(kind="logmel", data=feats, sample_rate=sr, frame_shift=shift)


def expected_segment_count(n_steps: int, seg: int, hop: int,
                           min_keep: int, pad_last: bool) -> int:
    """Reference count: full windows plus an optional kept remainder."""
    if n_steps >= seg:
        full = (n_steps - seg) // hop + 1
        rem = n_steps - full * hop
        keep_rem = pad_last and 0 < rem and rem >= min_keep
        return full + (1 if keep_rem else 0)
    if n_steps >= min_keep and pad_last:
        return 1
    return 0


def segment(seq: AcousticSequence, policy: SegmentationPolicy) -> list[AcousticSequence]:
    """Slice into fixed windows starting at 0, hop, 2*hop, ...

    A trailing remainder of at least ``min_keep`` seconds is zero-padded to
    the full window when ``pad_last`` is set; anything shorter is dropped.
    """
    rate = seq.step_rate()
    seg_n = int(round(policy.segment_len * rate))
    hop_n = int(round(policy.hop * rate))
    keep_n = int(round(policy.min_keep * rate))
    T = seq.n_steps()

    def make(chunk: np.ndarray, padded: bool) -> AcousticSequence:
        if chunk.shape[0] < seg_n:
            pad_width = [(0, seg_n - chunk.shape[0])] + [(0, 0)] * (chunk.ndim - 1)
            chunk = np.pad(chunk, pad_width)
            padded = True
        return AcousticSequence(seq.kind, chunk, seq.sample_rate, seq.frame_shift, padded)

    if T < keep_n or T == 0:
        return []
    if T < seg_n:
        return [make(seq.data.copy(), True)] if policy.pad_last else []
    out = []
    n_full = (T - seg_n) // hop_n + 1
    for i in range(n_full):
        out.append(make(seq.data[i * hop_n: i * hop_n + seg_n].copy(), False))
    rem_start = n_full * hop_n
    rem = T - rem_start
    if policy.pad_last and 0 < rem and rem >= keep_n:
        out.append(make(seq.data[rem_start:].copy(), True))
    return out


def random_crop(seq: AcousticSequence, crop_len: float, rng: np.random.Generator) -> AcousticSequence:
    """Uniform contiguous crop of crop_len seconds; short inputs are zero-padded."""
    if crop_len <= 0:
        raise FeatureError("crop_len must be positive")
    rate = seq.step_rate()
    crop_n = int(round(crop_len * rate))
    T = seq.n_steps()
    if T <= crop_n:
        pad_width = [(0, crop_n - T)] + [(0, 0)] * (seq.data.ndim - 1)
        data = np.pad(seq.data, pad_width)
        return AcousticSequence(seq.kind, data, seq.sample_rate, seq.frame_shift,
                                padded=T < crop_n)
    start = int(rng.integers(0, T - crop_n + 1))
    return AcousticSequence(seq.kind, seq.data[start:start + crop_n].copy(),
                            seq.sample_rate, seq.frame_shift)
