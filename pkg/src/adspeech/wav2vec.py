"""Self-supervised waveform encoder: conv features, context transformer,
Gumbel-softmax quantizer, masked contrastive pre-training, CTC fine-tuning.

The training objective is the masked contrastive loss plus a small
codebook-diversity penalty that keeps the quantizer from collapsing.
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

logger = logging.getLogger(__name__)


class SslError(Exception):
    pass


# (kernel, stride) per conv layer; stride product 320 -> ~50 frames/s at 16 kHz
CONV_SPEC = ((10, 5), (8, 4), (8, 4), (8, 4))


@dataclass(frozen=True)
class SslConfig:
    dim: int = 64  # d_z and d_c
    n_context_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    groups: int = 2  # quantizer groups
    entries: int = 32  # codebook entries per group
    mask_prob: float = 0.065
    mask_span: int = 10
    n_distractors: int = 20
    temperature: float = 0.1
    diversity_weight: float = 0.1
    max_positions: int = 4096


def conv_out_length(n_samples: int, spec=CONV_SPEC) -> int:
    n = n_samples
    for k, s in spec:
        n = (n - k) // s + 1
        if n <= 0:
            return 0
    return n


def receptive_field(spec=CONV_SPEC) -> int:
    rf, jump = 1, 1
    for k, s in spec:
        rf += (k - 1) * jump
        jump *= s
    return rf


class FeatureEncoder(nn.Module):
    """Strided conv stack mapping raw waveform to latent frames Z."""

    def __init__(self, dim: int = 64, spec=CONV_SPEC):
        super().__init__()
        self.spec = spec
        layers = []
        in_ch = 1
        for k, s in spec:
            layers += [nn.Conv1d(in_ch, dim, kernel_size=k, stride=s),
                       nn.GroupNorm(1, dim), nn.GELU()]
            in_ch = dim
        self.conv = nn.Sequential(*layers)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """wave: (B, T_samples) -> (B, frames, dim)."""
        if wave.shape[-1] < receptive_field(self.spec):
            raise SslError(
                f"waveform of {wave.shape[-1]} samples is shorter than the conv "
                f"receptive field of {receptive_field(self.spec)}")
        return self.conv(wave.unsqueeze(1)).transpose(1, 2)


class ContextEncoder(nn.Module):
    """Transformer over latent frames with a learned mask embedding."""

    def __init__(self, cfg: SslConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.in_proj = nn.Linear(d, d)
        self.pos = nn.Embedding(cfg.max_positions, d)
        self.mask_embedding = nn.Parameter(torch.randn(d) * 0.1)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(d_model=d, nhead=cfg.n_heads,
                                       dim_feedforward=cfg.ff_dim,
                                       dropout=cfg.dropout, batch_first=True)
            for _ in range(cfg.n_context_layers)
        ])

    def forward(self, z: torch.Tensor, lengths: torch.Tensor | None = None,
                mask: torch.Tensor | None = None,
                return_layers: bool = False):
        """z: (B, T, d); mask: (B, T) bool, True = replace with mask embedding."""
        B, T, _ = z.shape
        x = self.in_proj(z)
        if mask is not None:
            x = torch.where(mask.unsqueeze(-1), self.mask_embedding.expand_as(x), x)
        x = x + self.pos(torch.arange(T, device=z.device)).unsqueeze(0)
        if lengths is None:
            pad_mask = None
        else:
            pad_mask = torch.arange(T, device=z.device)[None, :] >= lengths[:, None]
        hiddens = []
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=pad_mask)
            hiddens.append(x)
        return hiddens if return_layers else x


class GumbelQuantizer(nn.Module):
    """Product quantizer with straight-through Gumbel-softmax selection."""

    def __init__(self, dim: int, groups: int, entries: int):
        super().__init__()
        if dim % groups:
            raise SslError("dim must be divisible by the number of groups")
        self.groups = groups
        self.entries = entries
        self.sub_dim = dim // groups
        self.logits_proj = nn.Linear(dim, groups * entries)
        self.codebook = nn.Parameter(torch.randn(groups, entries, self.sub_dim) * 0.1)
        self.temperature = 2.0

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """z: (..., dim) -> quantized q (..., dim) and soft probs (..., G, V)."""
        shape = z.shape[:-1]
        logits = self.logits_proj(z).view(*shape, self.groups, self.entries)
        if self.training:
            onehot = nn.functional.gumbel_softmax(logits, tau=self.temperature, hard=True)
        else:
            hard = logits.argmax(dim=-1)
            onehot = nn.functional.one_hot(hard, self.entries).to(z.dtype)
        q = torch.einsum("...gv,gvd->...gd", onehot, self.codebook)
        probs = torch.softmax(logits, dim=-1)
        return q.reshape(*shape, -1), probs

    def perplexity(self, probs: torch.Tensor) -> torch.Tensor:
        """Mean per-group exp-entropy of the batch-averaged code distribution."""
        avg = probs.reshape(-1, self.groups, self.entries).mean(dim=0)
        ent = -(avg * torch.log(avg.clamp_min(1e-10))).sum(dim=-1)
        return ent.exp().mean()

    def diversity_loss(self, probs: torch.Tensor) -> torch.Tensor:
        return (self.entries - self.perplexity(probs)) / self.entries


@dataclass
class MaskPlan:
    mask: np.ndarray  # (n_frames,) bool
    starts: list[int]
    mask_start_prob: float
    mask_span: int

    def __post_init__(self):
        if not self.mask.any():
            raise SslError("a mask plan must cover at least one frame")


def sample_masks(n_frames: int, p: float, M: int, rng: np.random.Generator) -> MaskPlan:
    """Bernoulli(p) span starts of length M, clipped at the sequence end.

    If no start fires, one span at a uniform position is forced so training
    never sees an empty objective.
    """
    if n_frames <= M:
        if p >= 1.0:
            mask = np.ones(n_frames, dtype=bool)
            return MaskPlan(mask, [0], p, M)
        raise SslError(f"n_frames={n_frames} must exceed mask span M={M}")
    starts = np.flatnonzero(rng.random(n_frames) < p).tolist()
    mask = np.zeros(n_frames, dtype=bool)
    for s in starts:
        mask[s:s + M] = True
    if mask.sum() < 2:
        # no start fired, or the only span was clipped to a sliver at the
        # end: force one full span so the contrastive objective always has
        # a positive and at least one distractor
        forced = int(rng.integers(0, n_frames - M + 1))
        starts.append(forced)
        mask[forced:forced + M] = True
    return MaskPlan(mask, starts, p, M)


def contrastive_loss(context: torch.Tensor, quantized: torch.Tensor,
                     plan: MaskPlan, n_distractors: int, temperature: float,
                     rng: np.random.Generator) -> torch.Tensor:
    """Mean over masked t of -log softmax(cos(c_t, q_t)/kappa) against
    distractor codes drawn uniformly from the other masked frames."""
    masked = np.flatnonzero(plan.mask)
    if masked.size < 2:
        raise SslError("contrastive loss needs at least 2 masked frames")
    K = n_distractors
    if masked.size - 1 < K:
        K = masked.size - 1
        logger.warning("reducing distractors to %d (only %d masked frames)",
                       K, masked.size)
    c = nn.functional.normalize(context[masked], dim=-1)
    losses = []
    for row, t in enumerate(masked):
        others = masked[masked != t]
        dist_idx = rng.choice(others, size=K, replace=False)
        cand = torch.cat([quantized[t].unsqueeze(0), quantized[dist_idx]], dim=0)
        cand = nn.functional.normalize(cand, dim=-1)
        sims = cand @ c[row] / temperature
        losses.append(-torch.log_softmax(sims, dim=0)[0])
    return torch.stack(losses).mean()


@dataclass
class SslTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    temp_start: float = 2.0
    temp_end: float = 0.5


class SslModel(nn.Module):
    def __init__(self, cfg: SslConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_encoder = FeatureEncoder(cfg.dim)
        self.context_encoder = ContextEncoder(cfg)
        self.quantizer = GumbelQuantizer(cfg.dim, cfg.groups, cfg.entries)


def collate_waves(waves: list[np.ndarray]):
    lengths = torch.tensor([w.shape[0] for w in waves])
    out = torch.zeros(len(waves), int(lengths.max()))
    for i, w in enumerate(waves):
        out[i, :w.shape[0]] = torch.from_numpy(np.asarray(w, dtype=np.float32))
    return out, lengths


def ssl_step(model: SslModel, waves: list[np.ndarray], rng: np.random.Generator,
             force_unmasked: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """One contrastive step over a batch; returns (loss, perplexity)."""
    cfg = model.cfg
    batch, lengths = collate_waves(waves)
    z = model.feature_encoder(batch)
    frame_lengths = torch.tensor([conv_out_length(int(n)) for n in lengths])
    plans = []
    mask = torch.zeros(z.shape[0], z.shape[1], dtype=torch.bool)
    for b, n in enumerate(frame_lengths):
        if force_unmasked:
            continue
        plan = sample_masks(int(n), cfg.mask_prob, cfg.mask_span, rng)
        plans.append(plan)
        mask[b, :int(n)] = torch.from_numpy(plan.mask)
    q, probs = model.quantizer(z)
    c = model.context_encoder(z, frame_lengths, mask=mask)
    if force_unmasked:
        loss = c.sum() * 0.0
        return loss, model.quantizer.perplexity(probs)
    terms = [
        contrastive_loss(c[b], q[b], plan, cfg.n_distractors, cfg.temperature, rng)
        for b, plan in enumerate(plans)
    ]
    contrast = torch.stack(terms).mean()
    diversity = model.quantizer.diversity_loss(probs)
    return contrast + cfg.diversity_weight * diversity, model.quantizer.perplexity(probs)


def ssl_pretrain(waves: list[np.ndarray], cfg: SslConfig, train_cfg: SslTrainConfig,
                 out_dir: str | Path, config_digest: str = "") -> dict:
    """Masked contrastive pre-training on raw waveforms (no transcripts)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    model = SslModel(cfg)
    optim = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    meta = {"ssl": dataclasses.asdict(cfg), "input": "waveform", "family": "wav2vec"}

    def save(tag, epoch):
        save_checkpoint(out_dir / f"{tag}.pt", {
            "feature_encoder": model.feature_encoder.state_dict(),
            "context_encoder": model.context_encoder.state_dict(),
            "quantizer": model.quantizer.state_dict(),
        }, config_digest, meta | {"epoch": epoch})

    curves = []
    save("epoch000", 0)
    n_steps_total = max(1, train_cfg.epochs * math.ceil(len(waves) / train_cfg.batch_size))
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order_rng = random.Random(train_cfg.seed * 7919 + epoch)
        order = list(range(len(waves)))
        order_rng.shuffle(order)
        total, ppl_sum, n_batches = 0.0, 0.0, 0
        for i in range(0, len(order), train_cfg.batch_size):
            step += 1
            frac = step / n_steps_total
            model.quantizer.temperature = (
                train_cfg.temp_start + (train_cfg.temp_end - train_cfg.temp_start) * frac)
            idx = order[i:i + train_cfg.batch_size]
            rng = np.random.default_rng([train_cfg.seed, epoch, i])
            loss, ppl = ssl_step(model, [waves[j] for j in idx], rng)
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += float(loss.detach())
            ppl_sum += float(ppl.detach())
            n_batches += 1
        mean_ppl = ppl_sum / n_batches
        if mean_ppl < 1.5:
            logger.warning("codebook perplexity %.3f < 1.5: near collapse; consider "
                           "raising diversity_weight (now %.3f)", mean_ppl, cfg.diversity_weight)
        curves.append({"epoch": epoch, "train_loss": total / n_batches,
                       "codebook_perplexity": mean_ppl})
        save(f"epoch{epoch:03d}", epoch)
    save("best", train_cfg.epochs)
    if curves:
        with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(curves[0]))
            w.writeheader()
            w.writerows(curves)
    return {"curves": curves, "out_dir": str(out_dir),
            "final_loss": curves[-1]["train_loss"] if curves else None}


class SslAsrModel(nn.Module):
    """SSL encoders plus a fresh projection to vocab logits for CTC."""

    def __init__(self, cfg: SslConfig, vocab: list[str]):
        super().__init__()
        self.cfg = cfg
        self.vocab = list(vocab)
        self.feature_encoder = FeatureEncoder(cfg.dim)
        self.context_encoder = ContextEncoder(cfg)
        self.projection = nn.Linear(cfg.dim, len(vocab) + 1)

    def token_ids(self, tokens: list[str]) -> list[int]:
        index = {t: i + 1 for i, t in enumerate(self.vocab)}
        return [index[t] for t in tokens]

    def log_probs(self, waves: list[np.ndarray]):
        batch, lengths = collate_waves(waves)
        z = self.feature_encoder(batch)
        frame_lengths = torch.tensor([conv_out_length(int(n)) for n in lengths])
        c = self.context_encoder(z, frame_lengths)
        return torch.log_softmax(self.projection(c), dim=-1), frame_lengths


def load_ssl_encoders(ckpt: Checkpoint, model: nn.Module) -> None:
    """Copy feature/context encoder weights; never touches other sub-modules."""
    meta_cfg = SslConfig(**ckpt.meta["ssl"])
    if meta_cfg.dim != model.cfg.dim:
        raise SslError(f"checkpoint dim {meta_cfg.dim} != model dim {model.cfg.dim}")
    model.feature_encoder.load_state_dict(ckpt.state("feature_encoder"))
    model.context_encoder.load_state_dict(ckpt.state("context_encoder"))


@dataclass
class AsrFinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    valid_fraction: float = 0.1


def asr_finetune(corpus, vocab: list[str], cfg: SslConfig, tcfg: AsrFinetuneConfig,
                 out_dir: str | Path, init_checkpoint: Checkpoint | None = None,
                 config_digest: str = "") -> dict:
    """Supervised CTC training of the SSL stack plus a random projection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(tcfg.seed)
    model = SslAsrModel(cfg, vocab)
    if init_checkpoint is not None:
        ckpt_vocab = init_checkpoint.meta.get("vocab")
        if ckpt_vocab is not None and list(ckpt_vocab) != list(vocab):
            raise SslError("checkpoint vocabulary differs from the training corpus")
        load_ssl_encoders(init_checkpoint, model)
    optim = torch.optim.Adam(model.parameters(), lr=tcfg.lr)

    data = [(np.asarray(w, dtype=np.float32), model.token_ids(toks))
            for w, toks in corpus]
    order = list(range(len(data)))
    random.Random(tcfg.seed).shuffle(order)
    n_valid = max(1, int(len(data) * tcfg.valid_fraction))
    valid_idx = set(order[:n_valid])
    train = [data[i] for i in range(len(data)) if i not in valid_idx]
    valid = [data[i] for i in sorted(valid_idx)]

    meta = {"ssl": dataclasses.asdict(cfg), "vocab": vocab, "input": "waveform",
            "family": "wav2vec"}

    def save(tag, epoch):
        save_checkpoint(out_dir / f"{tag}.pt", {
            "feature_encoder": model.feature_encoder.state_dict(),
            "context_encoder": model.context_encoder.state_dict(),
            "projection": model.projection.state_dict(),
        }, config_digest, meta | {"epoch": epoch})

    def valid_cer() -> float:
        model.eval()
        errors, total = 0.0, 0
        with torch.no_grad():
            for w, ref in valid:
                lp, fl = model.log_probs([w])
                hyp = ctc_mod.greedy_ctc_decode(lp[0, :int(fl[0])])
                errors += ctc_mod.levenshtein(ref, hyp)
                total += len(ref)
        model.train()
        return errors / max(total, 1)

    curves = []
    best = {"epoch": 0, "valid_cer": float("inf")}
    save("epoch000", 0)
    for epoch in range(1, tcfg.epochs + 1):
        rng = random.Random(tcfg.seed * 6271 + epoch)
        order = list(range(len(train)))
        rng.shuffle(order)
        total, n_batches = 0.0, 0
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            lp, fl = model.log_probs([train[j][0] for j in idx])
            refs = [train[j][1] for j in idx]
            loss = ctc_mod.ctc_loss_batched(lp, refs, [int(n) for n in fl]).mean()
            if not torch.isfinite(loss):
                logger.error("CTC fine-tuning diverged at epoch %d", epoch)
                return {"diverged": True, "best": best, "curves": curves,
                        "out_dir": str(out_dir)}
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += float(loss.detach())
            n_batches += 1
        vcer = valid_cer()
        curves.append({"epoch": epoch, "train_loss": total / n_batches,
                       "valid_cer": vcer})
        save(f"epoch{epoch:03d}", epoch)
        if vcer < best["valid_cer"]:
            best = {"epoch": epoch, "valid_cer": vcer}
            save("best", epoch)
    if curves:
        with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(curves[0]))
            w.writeheader()
            w.writerows(curves)
    return {"diverged": False, "best": best, "curves": curves, "out_dir": str(out_dir)}
