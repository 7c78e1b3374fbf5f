"""Deterministic synthetic corpora.

Two kinds of material are generated, both as 16 kHz mono WAV:

* a toy "ASR" corpus: utterances are sequences of tokens, each token
  rendered as a harmonic tone burst in a language-specific frequency band,
  so transcripts are recoverable in principle;
* a three-class clinical-style corpus whose classes differ in token
  repetition statistics and pause structure, with a per-speaker pitch
  offset, emitting a manifest in the GROUP_SEX_SPEAKER_SEQ convention.

Everything is a pure function of (seed, utterance index).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .corpus import GROUPS
from .frontend import SAMPLE_RATE


@dataclass(frozen=True)
class TokenRenderer:
    base_freq: float  # Hz
    duration: float  # seconds
    amplitude: float = 0.3
    n_harmonics: int = 2


@dataclass(frozen=True)
class SynthLanguage:
    language_tag: str
    vocab: tuple[str, ...]
    renderers: tuple[TokenRenderer, ...]

    def __post_init__(self):
        if len(self.vocab) < 4:
            raise ValueError("vocab size must be >= 4")
        if len(self.renderers) != len(self.vocab):
            raise ValueError("one renderer per token required")
        if len({r.base_freq for r in self.renderers}) != len(self.renderers):
            raise ValueError("renderer base frequencies must be distinct")


def make_language(tag: str, band: tuple[float, float], vocab_size: int = 8,
                  token_duration: float = 0.12) -> SynthLanguage:
    """Evenly spaced token tones inside a frequency band."""
    lo, hi = band
    freqs = np.linspace(lo, hi, vocab_size)
    vocab = tuple(f"{tag}{i}" for i in range(vocab_size))
    renderers = tuple(TokenRenderer(base_freq=float(f), duration=token_duration) for f in freqs)
    return SynthLanguage(tag, vocab, renderers)


# Disjoint bands stand in for two unrelated pre-training languages.
LANGUAGE_A_BAND = (500.0, 3000.0)
LANGUAGE_B_BAND = (4000.0, 7500.0)


def language_a(vocab_size: int = 8, token_duration: float = 0.12) -> SynthLanguage:
    return make_language("a", LANGUAGE_A_BAND, vocab_size, token_duration)


def language_b(vocab_size: int = 8, token_duration: float = 0.12) -> SynthLanguage:
    return make_language("b", LANGUAGE_B_BAND, vocab_size, token_duration)


def _render_token(renderer: TokenRenderer, sr: int, rng: np.random.Generator,
                  pitch_scale: float = 1.0, rate_scale: float = 1.0) -> np.ndarray:
    n = int(round(renderer.duration * rate_scale * sr))
    t = np.arange(n) / sr
    x = np.zeros(n)
    for h in range(1, renderer.n_harmonics + 1):
        f = renderer.base_freq * pitch_scale * h
        if f >= sr / 2:
            continue
        x += (renderer.amplitude / h) * np.sin(2 * math.pi * f * t)
    # short raised-cosine fade at both ends avoids clicks
    fade = max(4, n // 16)
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, math.pi, fade))
    env[:fade] = ramp
    env[-fade:] = ramp[::-1]
    x *= env
    x += 0.01 * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def render_tokens(language: SynthLanguage, tokens: list[str], rng: np.random.Generator,
                  sr: int = SAMPLE_RATE, pitch_scale: float = 1.0,
                  rate_scale: float = 1.0, gaps: list[np.ndarray] | None = None) -> np.ndarray:
    index = {tok: r for tok, r in zip(language.vocab, language.renderers)}
    pieces = []
    for i, tok in enumerate(tokens):
        pieces.append(_render_token(index[tok], sr, rng, pitch_scale, rate_scale))
        if gaps is not None and i < len(gaps):
            pieces.append(gaps[i])
    if not pieces:
        return np.zeros(0)
    return np.concatenate(pieces)


def gen_asr_corpus(language: SynthLanguage, n_utts: int,
                   len_range: tuple[int, int], seed: int,
                   token_probs: np.ndarray | None = None,
                   sr: int = SAMPLE_RATE) -> list[tuple[np.ndarray, list[str]]]:
    """Utterances of token sequences rendered back to back."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    lo, hi = len_range
    vocab = list(language.vocab)
    if token_probs is None:
        token_probs = np.full(len(vocab), 1.0 / len(vocab))
    out = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        length = int(rng.integers(lo, hi + 1))
        tokens = [vocab[int(j)] for j in rng.choice(len(vocab), size=length, p=token_probs)]
        wave = render_tokens(language, tokens, rng, sr=sr)
        out.append((wave, tokens))
    return out


@dataclass(frozen=True)
class SynthAdProfile:
    class_label: str
    pause_rate: float  # probability of a pause at each token boundary
    pause_duration: tuple[float, float]  # seconds
    token_distribution: tuple[float, ...]  # categorical over the language vocab
    speaking_rate_scale: float = 1.0
    repeat_prob: float = 0.0  # chance the next token repeats the previous one

    def __post_init__(self):
        if self.class_label not in GROUPS:
            raise ValueError(f"class_label must be one of {GROUPS}")
        for p in (self.pause_rate, self.repeat_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0,1]")
        if abs(sum(self.token_distribution) - 1.0) > 1e-9:
            raise ValueError("token_distribution must sum to 1")


def _uniform(n: int) -> tuple[float, ...]:
    return tuple([1.0 / n] * n)


def distinct_profiles(vocab_size: int = 8) -> dict[str, SynthAdProfile]:
    """Maximally separated classes: speaking rate alone tells them apart."""
    return {
        "AD": SynthAdProfile("AD", 0.5, (0.3, 0.8), _uniform(vocab_size),
                             speaking_rate_scale=2.0, repeat_prob=0.6),
        "MCI": SynthAdProfile("MCI", 0.25, (0.15, 0.4), _uniform(vocab_size),
                              speaking_rate_scale=1.3, repeat_prob=0.3),
        "HC": SynthAdProfile("HC", 0.05, (0.05, 0.15), _uniform(vocab_size),
                             speaking_rate_scale=1.0, repeat_prob=0.0),
    }


def engineered_profiles(vocab_size: int = 8) -> dict[str, SynthAdProfile]:
    """Classes separated mostly by temporal structure, not frame statistics.

    The silence budget per utterance is matched across classes (few long
    pauses vs many short ones), and the token unigram distribution is shared,
    so utterance-level summary statistics carry little signal while sequence
    models still see repetition and pause-length structure.
    """
    return {
        "AD": SynthAdProfile("AD", 0.12, (0.55, 0.85), _uniform(vocab_size),
                             speaking_rate_scale=1.0, repeat_prob=0.75),
        "MCI": SynthAdProfile("MCI", 0.28, (0.22, 0.38), _uniform(vocab_size),
                              speaking_rate_scale=1.0, repeat_prob=0.4),
        "HC": SynthAdProfile("HC", 0.55, (0.10, 0.20), _uniform(vocab_size),
                             speaking_rate_scale=1.0, repeat_prob=0.0),
    }


PROFILE_PRESETS = {"distinct": distinct_profiles, "engineered": engineered_profiles}


@dataclass
class AdUtterance:
    sample_id: str
    speaker_id: str
    class_label: str
    sex: str
    wave: np.ndarray
    tokens: list[str]
    duration: float


def _gen_ad_utterance(language: SynthLanguage, profile: SynthAdProfile,
                      rng: np.random.Generator, duration_range: tuple[float, float],
                      pitch_scale: float, sr: int) -> tuple[np.ndarray, list[str]]:
    target = float(rng.uniform(*duration_range))
    tokens: list[str] = []
    pieces: list[np.ndarray] = []
    total = 0.0
    vocab = list(language.vocab)
    renderers = dict(zip(language.vocab, language.renderers))
    probs = np.asarray(profile.token_distribution)
    prev = None
    while total < target:
        if prev is not None and rng.random() < profile.repeat_prob:
            tok = prev
        else:
            tok = vocab[int(rng.choice(len(vocab), p=probs))]
        piece = _render_token(renderers[tok], sr, rng, pitch_scale=pitch_scale,
                              rate_scale=profile.speaking_rate_scale)
        tokens.append(tok)
        pieces.append(piece)
        total += piece.shape[0] / sr
        prev = tok
        if total >= target:
            break
        if rng.random() < profile.pause_rate:
            gap = float(rng.uniform(*profile.pause_duration))
            gap = min(gap, max(0.0, target - total))
            if gap > 0:
                pieces.append(np.zeros(int(round(gap * sr))))
                total += gap
    wave = np.concatenate(pieces) if pieces else np.zeros(0)
    # trim or pad to the drawn target so durations stay inside the range
    want = int(round(target * sr))
    if wave.shape[0] > want:
        wave = wave[:want]
    elif wave.shape[0] < want:
        wave = np.pad(wave, (0, want - wave.shape[0]))
    return np.clip(wave, -1.0, 1.0), tokens


def gen_ad_corpus(profiles: dict[str, SynthAdProfile], language: SynthLanguage,
                  n_speakers_per_class: int, samples_per_speaker: int,
                  duration_range: tuple[float, float], seed: int,
                  out_dir: str | Path | None = None,
                  sr: int = SAMPLE_RATE) -> list[AdUtterance]:
    """Per-speaker consistent voices; class determined only by its profile."""
    if n_speakers_per_class < 3:
        raise ValueError("need at least 3 speakers per class for feasible splits")
    utterances: list[AdUtterance] = []
    speaker_no = 0
    for ci, label in enumerate(GROUPS):
        profile = profiles[label]
        for s in range(n_speakers_per_class):
            speaker_no += 1
            speaker_id = f"{seed % 100:02d}{speaker_no:04d}"
            sex = "F" if speaker_no % 2 == 0 else "M"
            spk_rng = np.random.default_rng([seed, ci, s, 0xAD])
            pitch_scale = float(spk_rng.uniform(0.9, 1.1))
            for k in range(1, samples_per_speaker + 1):
                rng = np.random.default_rng([seed, ci, s, k])
                wave, tokens = _gen_ad_utterance(
                    language, profile, rng, duration_range, pitch_scale, sr)
                sample_id = f"{label}_{sex}_{speaker_id}_{k:03d}"
                utterances.append(AdUtterance(
                    sample_id=sample_id, speaker_id=speaker_id, class_label=label,
                    sex=sex, wave=wave, tokens=tokens,
                    duration=wave.shape[0] / sr))
    if out_dir is not None:
        write_ad_corpus(utterances, out_dir, sr=sr)
    return utterances


def write_wav(path: str | Path, wave: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(wave * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sr, pcm)


def write_ad_corpus(utterances: list[AdUtterance], out_dir: str | Path,
                    sr: int = SAMPLE_RATE) -> Path:
    """WAV files plus a JSONL manifest consumable by corpus.parse_manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = out_dir / "corpus.jsonl"
    with open(meta_path, "w", encoding="utf-8") as f:
        for u in utterances:
            wav_path = out_dir / f"{u.sample_id}.wav"
            write_wav(wav_path, u.wave, sr)
            f.write(json.dumps({
                "audio_path": str(wav_path),
                "label": u.class_label,
                "speaker_id": u.speaker_id,
                "tokens": u.tokens,
            }) + "\n")
    return meta_path


def write_asr_corpus(corpus: list[tuple[np.ndarray, list[str]]], out_dir: str | Path,
                     tag: str, sr: int = SAMPLE_RATE) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = out_dir / "corpus.jsonl"
    with open(meta_path, "w", encoding="utf-8") as f:
        for i, (wave, tokens) in enumerate(corpus):
            wav_path = out_dir / f"{tag}_{i:05d}.wav"
            write_wav(wav_path, wave, sr)
            f.write(json.dumps({
                "audio_path": str(wav_path),
                "tokens": tokens,
                "speaker_id": f"{tag}_{i:05d}",
            }) + "\n")
    return meta_path


def corpus_digest(utterances: list[AdUtterance]) -> str:
    h = hashlib.sha256()
    for u in utterances:
        h.update(u.sample_id.encode())
        h.update(np.ascontiguousarray(u.wave).tobytes())
    return h.hexdigest()


def silence_fraction(wave: np.ndarray, sr: int = SAMPLE_RATE,
                     frame: float = 0.025, threshold: float = 1e-3) -> float:
    """Share of frames whose mean energy falls below the threshold."""
    n = int(round(frame * sr))
    if wave.shape[0] < n:
        return 1.0
    usable = wave[: (wave.shape[0] // n) * n].reshape(-1, n)
    energy = (usable ** 2).mean(axis=1)
    return float((energy < threshold).mean())


def token_rate(u: AdUtterance) -> float:
    return len(u.tokens) / u.duration if u.duration > 0 else 0.0
