"""Joint CTC-attention ASR: shared encoder, attention decoder, CTC head.

The shared encoder subsamples log-mel frames by 4 with strided
convolutions and applies a stack of self-attention blocks, exposing every
layer's hidden sequence. Pre-training optimizes
lambda * CTC + (1 - lambda) * label-smoothed attention cross-entropy.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import ctc as ctc_mod
from .checkpoints import Checkpoint, save_checkpoint
from .frontend import AcousticSequence, logmel

logger = logging.getLogger(__name__)


class AsrError(Exception):
    pass


@dataclass(frozen=True)
class JointLossConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise AsrError("ctc_weight must lie in [0,1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise AsrError("label_smoothing must lie in [0,1)")


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1


class PositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int = 8192):
        super().__init__()
        pos = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[: x.shape[1]].unsqueeze(0)


def subsampled_length(frames: int) -> int:
    # two k=3,s=2,p=1 convolutions: each maps T -> ceil(T/2)
    return math.ceil(math.ceil(frames / 2) / 2)


class EncoderStack(nn.Module):
    """Strided-conv front (x4 subsampling) plus self-attention blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.subsample = nn.Sequential(
            nn.Conv1d(cfg.n_mels, d, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv1d(d, d, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.posenc = PositionalEncoding(d)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(
                d_model=d, nhead=cfg.n_heads, dim_feedforward=cfg.ff_dim,
                dropout=cfg.dropout, batch_first=True)
            for _ in range(cfg.n_layers)
        ])

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor
                ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """feats: (B, T, n_mels) -> per-layer list of (B, T', d) and T' lengths."""
        if feats.shape[1] < 4:
            raise AsrError("encoder needs at least 4 input frames")
        x = self.subsample(feats.transpose(1, 2)).transpose(1, 2)
        out_lengths = torch.tensor([subsampled_length(int(n)) for n in lengths],
                                   device=feats.device)
        x = self.posenc(x)
        maxlen = x.shape[1]
        pad_mask = torch.arange(maxlen, device=x.device)[None, :] >= out_lengths[:, None]
        hiddens = []
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad_mask)
            hiddens.append(x)
        return hiddens, out_lengths


class AttentionDecoder(nn.Module):
    """Single-layer GRU decoder with dot-product attention, teacher forcing."""

    def __init__(self, vocab_size: int, d_model: int):
        super().__init__()
        # decoder symbol space appends <sos>/<eos> after the token ids
        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.eos = vocab_size + 1
        self.embed = nn.Embedding(vocab_size + 2, d_model)
        self.rnn = nn.GRUCell(2 * d_model, d_model)
        self.out = nn.Linear(2 * d_model, vocab_size + 2)
        self.d_model = d_model

    def forward(self, enc: torch.Tensor, enc_lengths: torch.Tensor,
                targets_in: torch.Tensor) -> torch.Tensor:
        """targets_in: (B, L) with <sos> prepended. Returns (B, L, V+2) logits."""
        B, L = targets_in.shape
        device = enc.device
        mask = torch.arange(enc.shape[1], device=device)[None, :] >= enc_lengths[:, None]
        h = enc.new_zeros(B, self.d_model)
        ctx = enc.new_zeros(B, self.d_model)
        logits = []
        scale = 1.0 / math.sqrt(self.d_model)
        for t in range(L):
            emb = self.embed(targets_in[:, t])
            h = self.rnn(torch.cat([emb, ctx], dim=1), h)
            scores = (enc @ h.unsqueeze(2)).squeeze(2) * scale
            scores = scores.masked_fill(mask, float("-inf"))
            attn = torch.softmax(scores, dim=1)
            ctx = (attn.unsqueeze(1) @ enc).squeeze(1)
            logits.append(self.out(torch.cat([h, ctx], dim=1)))
        return torch.stack(logits, dim=1)


def label_smoothed_ce(logits: torch.Tensor, targets: torch.Tensor,
                      smoothing: float, ignore_index: int = -100) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    keep = targets != ignore_index
    targets = targets.clamp(min=0)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    loss = (1.0 - smoothing) * nll + smoothing * uniform
    return loss[keep].mean()


class AsrCtcAttn(nn.Module):
    """Shared encoder + CTC projection + attention decoder."""

    def __init__(self, vocab: list[str], enc_cfg: EncoderConfig | None = None):
        super().__init__()
        self.vocab = list(vocab)  # blank is implicit at index 0
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.encoder = EncoderStack(self.enc_cfg)
        self.ctc_head = nn.Linear(self.enc_cfg.d_model, len(vocab) + 1)
        self.decoder = AttentionDecoder(len(vocab) + 1, self.enc_cfg.d_model)

    def token_ids(self, tokens: list[str]) -> list[int]:
        index = {t: i + 1 for i, t in enumerate(self.vocab)}
        return [index[t] for t in tokens]

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor):
        return self.encoder(feats, lengths)

    def ctc_log_probs(self, enc_last: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.ctc_head(enc_last), dim=-1)


def joint_loss(model: AsrCtcAttn, enc_out: torch.Tensor, enc_lengths: torch.Tensor,
               references: list[list[int]], cfg: JointLossConfig) -> torch.Tensor:
    """lambda * CTC + (1 - lambda) * teacher-forced attention CE."""
    lam = cfg.ctc_weight
    zero = enc_out.new_zeros(())
    if lam > 0:
        log_probs = model.ctc_log_probs(enc_out)
        ctc = ctc_mod.ctc_loss_batched(log_probs, references,
                                       [int(n) for n in enc_lengths]).mean()
    else:
        ctc = zero
    if lam < 1:
        dec = model.decoder
        B = len(references)
        L = max(len(r) for r in references) + 1
        tin = torch.full((B, L), dec.eos, dtype=torch.long, device=enc_out.device)
        tout = torch.full((B, L), -100, dtype=torch.long, device=enc_out.device)
        for b, ref in enumerate(references):
            tin[b, 0] = dec.sos
            tin[b, 1:len(ref) + 1] = torch.tensor(ref)
            tout[b, :len(ref)] = torch.tensor(ref)
            tout[b, len(ref)] = dec.eos
        logits = dec(enc_out, enc_lengths, tin)
        att = label_smoothed_ce(logits, tout, cfg.label_smoothing)
    else:
        att = zero
    return lam * ctc + (1 - lam) * att


@dataclass
class AsrTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    valid_fraction: float = 0.1
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    n_mels: int = 80


@dataclass
class TrainCurves:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def features_for_corpus(corpus, n_mels: int, sr: int = 16000):
    feats = []
    for wave, tokens in corpus:
        seq = AcousticSequence("waveform", np.asarray(wave, dtype=np.float64), sr)
        feats.append((logmel(seq, n_mels=n_mels).data.astype(np.float32), tokens))
    return feats


def _make_batches(n: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def collate_features(items: list[tuple[np.ndarray, list[int]]]):
    lengths = torch.tensor([f.shape[0] for f, _ in items])
    maxlen = int(lengths.max())
    n_mels = items[0][0].shape[1]
    feats = torch.zeros(len(items), maxlen, n_mels)
    for i, (f, _) in enumerate(items):
        feats[i, :f.shape[0]] = torch.from_numpy(f)
    refs = [r for _, r in items]
    return feats, lengths, refs


def evaluate_cer(model: AsrCtcAttn, feats, refs) -> float:
    model.eval()
    total, errors = 0, 0.0
    with torch.no_grad():
        for f, ref in zip(feats, refs):
            x = torch.from_numpy(f).unsqueeze(0)
            hiddens, lengths = model.encode(x, torch.tensor([f.shape[0]]))
            lp = model.ctc_log_probs(hiddens[-1])[0, :int(lengths[0])]
            hyp = ctc_mod.greedy_ctc_decode(lp)
            errors += ctc_mod.levenshtein(ref, hyp)
            total += len(ref)
    model.train()
    return errors / max(total, 1)


def pretrain_asr(corpus, vocab: list[str], cfg: AsrTrainConfig,
                 out_dir: str | Path, enc_cfg: EncoderConfig | None = None,
                 config_digest: str = "") -> dict:
    """Joint training on (waveform, tokens) pairs; returns a run summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    enc_cfg = enc_cfg or EncoderConfig(n_mels=cfg.n_mels)
    model = AsrCtcAttn(vocab, enc_cfg)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    feats = features_for_corpus(corpus, enc_cfg.n_mels)
    data = [(f, model.token_ids(toks)) for f, toks in feats]
    n_valid = max(1, int(len(data) * cfg.valid_fraction))
    holdout_rng = random.Random(cfg.seed)
    order = list(range(len(data)))
    holdout_rng.shuffle(order)
    valid_idx = set(order[:n_valid])
    train = [data[i] for i in range(len(data)) if i not in valid_idx]
    valid = [data[i] for i in sorted(valid_idx)]

    curves = TrainCurves()
    best = {"epoch": 0, "valid_cer": float("inf")}
    meta = {"vocab": vocab, "encoder": dataclasses.asdict(enc_cfg),
            "input": "logmel", "family": "ctc_attn"}

    def save(tag, epoch):
        save_checkpoint(out_dir / f"{tag}.pt", {
            "encoder": model.encoder.state_dict(),
            "ctc_head": model.ctc_head.state_dict(),
            "decoder": model.decoder.state_dict(),
        }, config_digest, meta | {"epoch": epoch})

    save("epoch000", 0)
    for epoch in range(1, cfg.epochs + 1):
        rng = random.Random(cfg.seed * 9176 + epoch)
        total = 0.0
        n_batches = 0
        for batch_idx in _make_batches(len(train), cfg.batch_size, rng):
            fb, lb, refs = collate_features([train[i] for i in batch_idx])
            hiddens, out_lengths = model.encode(fb, lb)
            loss = joint_loss(model, hiddens[-1], out_lengths, refs, cfg.loss)
            if not torch.isfinite(loss):
                logger.error("training diverged at epoch %d; stopping", epoch)
                return {"diverged": True, "best": best, "out_dir": str(out_dir),
                        "curves": curves.rows}
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += float(loss.detach())
            n_batches += 1
        with torch.no_grad():
            fb, lb, refs = collate_features(valid)
            hiddens, out_lengths = model.encode(fb, lb)
            vloss = float(joint_loss(model, hiddens[-1], out_lengths, refs, cfg.loss))
        vcer = evaluate_cer(model, [f for f, _ in valid], [r for _, r in valid])
        curves.append(epoch=epoch, train_loss=total / max(n_batches, 1),
                      valid_loss=vloss, valid_cer=vcer)
        save(f"epoch{epoch:03d}", epoch)
        if vcer < best["valid_cer"]:
            best = {"epoch": epoch, "valid_cer": vcer}
            save("best", epoch)
    curves.write_csv(out_dir / "curves.csv")
    return {"diverged": False, "best": best, "out_dir": str(out_dir),
            "curves": curves.rows}


def load_encoder(ckpt: Checkpoint) -> tuple[EncoderStack, dict]:
    """Rebuild only the shared encoder from a checkpoint."""
    meta = ckpt.meta
    enc_cfg = EncoderConfig(**meta["encoder"])
    encoder = EncoderStack(enc_cfg)
    encoder.load_state_dict(ckpt.state("encoder"))
    return encoder, meta
