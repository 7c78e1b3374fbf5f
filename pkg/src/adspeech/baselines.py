"""Hand-rolled acoustic baseline: frame LLDs + functionals + linear SVM.

The in-repo feature set "minlld-v1" has 28 low-level descriptor tracks
(log-energy, zero-crossing rate, spectral centroid, spectral roll-off and
10 MFCCs, each with its delta) summarized by 6 functionals per track, a
168-dimensional utterance vector. The one-vs-rest SVM is solved in the
primal by deterministic subgradient descent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import GROUPS
from .frontend import AcousticSequence, LOG_FLOOR, frame_signal, mel_filterbank

N_MFCC = 10
FUNCTIONAL_NAMES = ("mean", "std", "min", "max", "range", "slope")
FEATURE_SET_TAG = "minlld-v1"


class BaselineError(Exception):
    pass


@dataclass
class FeatureVector:
    values: np.ndarray
    feature_set_tag: str
    names: tuple[str, ...]

    def __post_init__(self):
        if self.values.shape != (len(self.names),):
            raise BaselineError("feature vector length disagrees with its names")
        if not np.all(np.isfinite(self.values)):
            raise BaselineError("feature vector contains NaN/Inf")


def _lld_names() -> list[str]:
    base = ["log_energy", "zcr", "spectral_centroid", "spectral_rolloff"]
    base += [f"mfcc{i + 1}" for i in range(N_MFCC)]
    return base + [f"delta_{n}" for n in base]


def compute_llds(seq: AcousticSequence, win: float = 0.025,
                 shift: float = 0.010) -> np.ndarray:
    """Per-frame LLD matrix (frames, 28)."""
    if seq.kind != "waveform":
        raise BaselineError("LLD extraction expects a waveform")
    sr = seq.sample_rate
    win_s = int(round(win * sr))
    shift_s = int(round(shift * sr))
    if seq.data.shape[0] < win_s:
        raise BaselineError("input shorter than one analysis window")
    frames = frame_signal(seq.data, win_s, shift_s)

    log_energy = np.log(np.maximum((frames ** 2).mean(axis=1), LOG_FLOOR))
    signs = np.sign(frames)
    signs[signs == 0] = 1
    zcr = (np.abs(np.diff(signs, axis=1)) > 0).mean(axis=1)

    window = np.hanning(win_s)
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    freqs = np.fft.rfftfreq(win_s, d=1.0 / sr)
    power = spec.sum(axis=1)
    safe_power = np.maximum(power, LOG_FLOOR)
    centroid = (spec @ freqs) / safe_power
    cum = np.cumsum(spec, axis=1)
    rolloff_idx = (cum >= 0.85 * safe_power[:, None]).argmax(axis=1)
    rolloff = freqs[rolloff_idx]

    fb = mel_filterbank(26, win_s, sr)
    logmels = np.log(np.maximum(spec @ fb.T, LOG_FLOOR))
    mfcc = dct(logmels, type=2, axis=1, norm="ortho")[:, 1:N_MFCC + 1]

    base = np.column_stack([log_energy, zcr, centroid, rolloff, mfcc])
    delta = np.zeros_like(base)
    delta[1:-1] = (base[2:] - base[:-2]) / 2.0
    if base.shape[0] >= 2:
        delta[0] = base[1] - base[0]
        delta[-1] = base[-1] - base[-2]
    return np.column_stack([base, delta])


def _slope(track: np.ndarray) -> float:
    n = track.shape[0]
    x = np.arange(n, dtype=np.float64)
    denom = ((x - x.mean()) ** 2).sum()
    if denom == 0:
        return 0.0
    return float(((x - x.mean()) * (track - track.mean())).sum() / denom)


def extract_lld_functionals(seq: AcousticSequence,
                            feature_set: str = FEATURE_SET_TAG) -> FeatureVector:
    """Apply the 6 functionals to each LLD track."""
    if feature_set != FEATURE_SET_TAG:
        raise BaselineError(f"unknown feature set {feature_set!r}")
    llds = compute_llds(seq)
    if llds.shape[0] < 3:
        raise BaselineError("need at least 3 frames of LLDs")
    names = []
    values = []
    for j, lld_name in enumerate(_lld_names()):
        track = llds[:, j]
        stats = {
            "mean": float(track.mean()),
            "std": float(track.std()),
            "min": float(track.min()),
            "max": float(track.max()),
            "range": float(track.max() - track.min()),
            "slope": _slope(track),
        }
        for fn in FUNCTIONAL_NAMES:
            names.append(f"{lld_name}_{fn}")
            values.append(stats[fn])
    return FeatureVector(np.asarray(values), feature_set, tuple(names))


def export_features_csv(vectors: list[FeatureVector], labels: list[str],
                        path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["label", *vectors[0].names])
        for vec, label in zip(vectors, labels):
            w.writerow([label, *vec.values.tolist()])


@dataclass
class LinearSvmModel:
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    C: float
    mean: np.ndarray
    std: np.ndarray
    feature_set_tag: str = FEATURE_SET_TAG

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def _svm_objective(w, b, x, y_signed, C):
    margins = 1.0 - y_signed * (x @ w + b)
    hinge = np.maximum(0.0, margins).mean()
    return hinge + (w @ w) / (2.0 * C)


def _train_binary_svm(x: np.ndarray, y_signed: np.ndarray, C: float,
                      tol: float = 1e-5, max_iter: int = 5000) -> tuple[np.ndarray, float]:
    """Primal subgradient descent on mean hinge + ||w||^2 / (2C)."""
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    prev_obj = _svm_objective(w, b, x, y_signed, C)
    # step size must stay below 2C or the w/C term oscillates and diverges
    lr0 = 0.5 * min(1.0, C)
    for it in range(1, max_iter + 1):
        margins = 1.0 - y_signed * (x @ w + b)
        viol = margins > 0
        grad_w = w / C - (y_signed[viol, None] * x[viol]).sum(axis=0) / n
        grad_b = -y_signed[viol].sum() / n
        lr = lr0 / (1.0 + it / 200.0)
        w -= lr * grad_w
        b -= lr * grad_b
        if it % 50 == 0:
            obj = _svm_objective(w, b, x, y_signed, C)
            if abs(prev_obj - obj) < tol:
                break
            prev_obj = obj
    return w, b


def train_svm(vectors: list[FeatureVector], labels: list[str],
              C: float = 1.0) -> LinearSvmModel:
    """One-vs-rest linear SVM; normalization fitted on the training data only."""
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise BaselineError("training data contains a single class")
    x = np.stack([v.values for v in vectors])
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xn = (x - mean) / std
    weights = np.zeros((len(GROUPS), x.shape[1]))
    biases = np.zeros(len(GROUPS))
    for i, g in enumerate(GROUPS):
        y_signed = np.where(np.asarray(labels) == g, 1.0, -1.0)
        if np.all(y_signed == -1.0):
            biases[i] = -1.0  # class absent: never wins
            continue
        w, b = _train_binary_svm(xn, y_signed, C)
        weights[i] = w
        biases[i] = b
    return LinearSvmModel(weights, biases, C, mean, std,
                          vectors[0].feature_set_tag)


def svm_scores(model: LinearSvmModel, vector: FeatureVector) -> np.ndarray:
    if vector.values.shape[0] != model.weights.shape[1]:
        raise BaselineError(
            f"feature length {vector.values.shape[0]} does not match model "
            f"dimension {model.weights.shape[1]}")
    xn = model.normalize(vector.values)
    return model.weights @ xn + model.biases


def predict_svm(model: LinearSvmModel, vector: FeatureVector) -> tuple[str, np.ndarray]:
    """One-vs-rest argmax; ties resolve to the lowest class index."""
    scores = svm_scores(model, vector)
    return GROUPS[int(scores.argmax())], scores
