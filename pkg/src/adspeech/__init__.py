"""Transfer of pre-trained speech encoders to 3-class synthetic-speech
recognition: data tooling, two pre-training routes (joint CTC-attention and
masked contrastive), a pooled classification head, a hand-rolled LLD+SVM
baseline, and a segment-vote evaluation harness.
"""

__version__ = "0.1.0"

__all__ = [
    "asr",
    "baselines",
    "checkpoints",
    "classifier",
    "cli",
    "config",
    "corpus",
    "ctc",
    "evalkit",
    "frontend",
    "synthgen",
    "wav2vec",
]
