"""Three-class recognition head on top of a truncated ASR encoder.

Temporal mean pooling over the selected encoder layer(s) feeds a two-layer
feed-forward network with 3 logits. Fine-tuning trains on fixed segments
or random crops whose labels inherit the sample label; evaluation votes
segment predictions back to sample level.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .asr import EncoderConfig, EncoderStack
from .checkpoints import Checkpoint, save_checkpoint
from .corpus import GROUPS, SplitResult
from .evalkit import PredictionSet, EvalReport, evaluate_predictions
from .frontend import (AcousticSequence, SegmentationPolicy, load_audio, logmel,
                       random_crop, segment)
from .wav2vec import SslConfig, FeatureEncoder, ContextEncoder, conv_out_length

logger = logging.getLogger(__name__)


def _policy(segment_len: float, hop: float) -> SegmentationPolicy:
    # keep the default 1 s tail threshold unless segments are shorter than that
    return SegmentationPolicy(segment_len, hop, min_keep=min(1.0, segment_len))

N_CLASSES = len(GROUPS)
LAYER_SELECT_MODES = ("last", "concat_last3")


class ClassifierError(Exception):
    pass


class ClassifierHead(nn.Module):
    """Mean pooling + two-layer feed-forward map to 3 class logits."""

    def __init__(self, encoder_dim: int, layer_select: str = "last",
                 hidden_dim: int = 64, dropout: float = 0.1):
        super().__init__()
        if layer_select not in LAYER_SELECT_MODES:
            raise ClassifierError(f"layer_select must be one of {LAYER_SELECT_MODES}")
        self.layer_select = layer_select
        in_dim = encoder_dim * (3 if layer_select == "concat_last3" else 1)
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.LayerNorm(in_dim),
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, N_CLASSES),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled)


def pool_and_classify(hiddens: list[torch.Tensor], head: ClassifierHead,
                      lengths: torch.Tensor | None = None) -> torch.Tensor:
    """hiddens: per-layer (B, T, d) sequences -> (B, 3) logits."""
    if head.layer_select == "concat_last3":
        if len(hiddens) < 3:
            raise ClassifierError("concat_last3 requires an encoder with >= 3 layers")
        stacked = torch.cat(hiddens[-3:], dim=-1)
    else:
        stacked = hiddens[-1]
    if stacked.shape[-1] != head.in_dim:
        raise ClassifierError(
            f"pooled dim {stacked.shape[-1]} does not match head input {head.in_dim}")
    if lengths is None:
        pooled = stacked.mean(dim=1)
    else:
        T = stacked.shape[1]
        keep = (torch.arange(T, device=stacked.device)[None, :]
                < lengths[:, None]).unsqueeze(-1).to(stacked.dtype)
        pooled = (stacked * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)
    return head(pooled)


class AdModel(nn.Module):
    """Truncated encoder (either family) plus the classifier head."""

    def __init__(self, family: str, head: ClassifierHead,
                 enc_cfg: EncoderConfig | None = None,
                 ssl_cfg: SslConfig | None = None):
        super().__init__()
        if family not in ("ctc_attn", "wav2vec"):
            raise ClassifierError(f"unknown encoder family {family!r}")
        self.family = family
        self.head = head
        if family == "ctc_attn":
            self.enc_cfg = enc_cfg or EncoderConfig()
            self.encoder = EncoderStack(self.enc_cfg)
        else:
            self.ssl_cfg = ssl_cfg or SslConfig()
            self.feature_encoder = FeatureEncoder(self.ssl_cfg.dim)
            self.context_encoder = ContextEncoder(self.ssl_cfg)

    def encoder_parameters(self):
        if self.family == "ctc_attn":
            return self.encoder.parameters()
        return list(self.feature_encoder.parameters()) + list(
            self.context_encoder.parameters())

    def forward(self, batch: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if self.family == "ctc_attn":
            hiddens, out_lengths = self.encoder(batch, lengths)
        else:
            z = self.feature_encoder(batch)
            out_lengths = torch.tensor([conv_out_length(int(n)) for n in lengths])
            hiddens = self.context_encoder(z, out_lengths, return_layers=True)
        return pool_and_classify(hiddens, self.head, out_lengths)


def build_ad_model(checkpoint: Checkpoint | None, family: str,
                   layer_select: str = "last", hidden_dim: int = 64,
                   dropout: float = 0.1, enc_cfg: EncoderConfig | None = None,
                   ssl_cfg: SslConfig | None = None) -> AdModel:
    """Assemble the classifier; only encoder sub-modules are ever read."""
    if checkpoint is not None:
        family = checkpoint.meta.get("family", family)
        if family == "ctc_attn":
            enc_cfg = EncoderConfig(**checkpoint.meta["encoder"])
        else:
            ssl_cfg = SslConfig(**checkpoint.meta["ssl"])
    if family == "ctc_attn":
        enc_cfg = enc_cfg or EncoderConfig()
        head = ClassifierHead(enc_cfg.d_model, layer_select, hidden_dim, dropout)
        model = AdModel(family, head, enc_cfg=enc_cfg)
        if checkpoint is not None:
            model.encoder.load_state_dict(checkpoint.state("encoder"))
    else:
        ssl_cfg = ssl_cfg or SslConfig()
        head = ClassifierHead(ssl_cfg.dim, layer_select, hidden_dim, dropout)
        model = AdModel(family, head, ssl_cfg=ssl_cfg)
        if checkpoint is not None:
            model.feature_encoder.load_state_dict(checkpoint.state("feature_encoder"))
            model.context_encoder.load_state_dict(checkpoint.state("context_encoder"))
    return model


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | adamw
    schedule: str = "const"  # const | linear
    max_epochs: int = 20
    early_stop_patience: int = 5
    seed: int = 0
    augment_kind: str = "crop"  # crop | segment
    crop_len: float = 10.0
    segment_len: float = 3.0
    segment_hop: float = 1.0
    freeze_encoder: bool = False
    layer_select: str = "last"
    hidden_dim: int = 64
    dropout: float = 0.1
    eval_segment_len: float | None = 3.0  # None = full-length samples
    eval_segment_hop: float = 2.0
    aggregation: str = "vote"  # vote | mean_prob
    n_mels: int = 80

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ClassifierError("batch_size and max_epochs must be positive")
        if self.early_stop_patience > self.max_epochs:
            raise ClassifierError("early_stop_patience must not exceed max_epochs")


@dataclass
class LabeledSample:
    sample_id: str
    wave: np.ndarray
    label: str


def samples_from_records(records) -> list[LabeledSample]:
    out = []
    for r in records:
        seq = load_audio(r.audio_path)
        out.append(LabeledSample(r.sample_id, seq.data, r.group))
    return out


def _to_model_input(model: AdModel, seqs: list[AcousticSequence], n_mels: int):
    """Stack equal-length sequences into a batch for either family."""
    if model.family == "wav2vec":
        data = [s.data.astype(np.float32) for s in seqs]
        lengths = torch.tensor([d.shape[0] for d in data])
        return torch.from_numpy(np.stack(data)), lengths
    feats = [logmel(s, n_mels=n_mels).data.astype(np.float32) for s in seqs]
    lengths = torch.tensor([f.shape[0] for f in feats])
    return torch.from_numpy(np.stack(feats)), lengths


def predict_samples(model: AdModel, samples: list[LabeledSample],
                    cfg: FinetuneConfig) -> PredictionSet:
    """Per-segment class probabilities for a sample collection."""
    segments: list[tuple[str, np.ndarray]] = []
    truth = {s.sample_id: s.label for s in samples}
    model.eval()
    with torch.no_grad():
        for s in samples:
            seq = AcousticSequence("waveform", s.wave, 16000)
            if cfg.eval_segment_len is None:
                parts = [seq]
            else:
                policy = _policy(cfg.eval_segment_len, cfg.eval_segment_hop)
                parts = segment(seq, policy) or [seq]
            for chunk in parts:
                batch, lengths = _to_model_input(model, [chunk], cfg.n_mels)
                probs = torch.softmax(model(batch, lengths), dim=-1)[0].numpy()
                segments.append((s.sample_id, probs))
    model.train()
    return PredictionSet(segments, truth)


def write_predictions(predictions: PredictionSet, labels: dict[str, str],
                      path: str | Path) -> None:
    from collections import defaultdict
    by_sample = defaultdict(list)
    for sid, p in predictions.segments:
        by_sample[sid].append(p)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", *[f"p_{g}" for g in GROUPS], "predicted", "true"])
        for sid in sorted(by_sample):
            mean = np.stack(by_sample[sid]).mean(axis=0)
            w.writerow([sid, *[f"{v:.6f}" for v in mean], labels[sid],
                        predictions.truth[sid]])


def _training_segments(samples: list[LabeledSample], cfg: FinetuneConfig,
                       epoch: int) -> list[tuple[np.ndarray, int]]:
    """Segment labels inherit the sample label."""
    label_idx = {g: i for i, g in enumerate(GROUPS)}
    out = []
    if cfg.augment_kind == "crop":
        for i, s in enumerate(samples):
            rng = np.random.default_rng([cfg.seed, epoch, i])
            seq = AcousticSequence("waveform", s.wave, 16000)
            chunk = random_crop(seq, cfg.crop_len, rng)
            out.append((chunk.data, label_idx[s.label]))
    elif cfg.augment_kind == "segment":
        policy = _policy(cfg.segment_len, cfg.segment_hop)
        for s in samples:
            seq = AcousticSequence("waveform", s.wave, 16000)
            for chunk in segment(seq, policy):
                out.append((chunk.data, label_idx[s.label]))
    else:
        raise ClassifierError(f"unknown augment_kind {cfg.augment_kind!r}")
    return out


def finetune(checkpoint: Checkpoint | None, split, cfg: FinetuneConfig,
             out_dir: str | Path, family: str = "wav2vec",
             enc_cfg: EncoderConfig | None = None, ssl_cfg: SslConfig | None = None,
             config_digest: str = "", dev_metric_fn=None) -> dict:
    """Cross-entropy fine-tuning with early stopping on dev sample accuracy.

    `split` carries train/dev (and optionally test) LabeledSample lists.
    `dev_metric_fn(model, epoch) -> float` can replace the dev evaluation
    (test hook for the early-stopping schedule).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples: list[LabeledSample] = split["train"]
    dev_samples: list[LabeledSample] = split["dev"]
    if not dev_samples:
        raise ClassifierError("fine-tuning requires a non-empty dev set")
    torch.manual_seed(cfg.seed)
    model = build_ad_model(checkpoint, family, cfg.layer_select, cfg.hidden_dim,
                           cfg.dropout, enc_cfg=enc_cfg, ssl_cfg=ssl_cfg)
    if cfg.freeze_encoder:
        for p in model.encoder_parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adamw":
        optim = torch.optim.AdamW(params, lr=cfg.lr)
    elif cfg.optimizer == "adam":
        optim = torch.optim.Adam(params, lr=cfg.lr)
    else:
        raise ClassifierError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.schedule == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(
            optim, lambda e: max(0.0, 1.0 - e / cfg.max_epochs))
    elif cfg.schedule == "const":
        sched = None
    else:
        raise ClassifierError(f"unknown schedule {cfg.schedule!r}")

    ce = nn.CrossEntropyLoss()
    meta = {"family": model.family, "layer_select": cfg.layer_select}
    if model.family == "ctc_attn":
        meta["encoder"] = asdict(model.enc_cfg)
    else:
        meta["ssl"] = asdict(model.ssl_cfg)

    def save(tag, epoch):
        modules = {"head": model.head.state_dict()}
        if model.family == "ctc_attn":
            modules["encoder"] = model.encoder.state_dict()
        else:
            modules["feature_encoder"] = model.feature_encoder.state_dict()
            modules["context_encoder"] = model.context_encoder.state_dict()
        save_checkpoint(out_dir / f"{tag}.pt", modules, config_digest,
                        meta | {"epoch": epoch})

    curves = []
    best = {"epoch": 0, "dev_accuracy": -1.0}
    for epoch in range(1, cfg.max_epochs + 1):
        segs = _training_segments(train_samples, cfg, epoch)
        order = list(range(len(segs)))
        random.Random(cfg.seed * 4241 + epoch).shuffle(order)
        total, n_batches = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            waves = [segs[j][0] for j in idx]
            labels = torch.tensor([segs[j][1] for j in idx])
            seqs = [AcousticSequence("waveform", w, 16000) for w in waves]
            batch, lengths = _to_model_input(model, seqs, cfg.n_mels)
            logits = model(batch, lengths)
            loss = ce(logits, labels)
            if not torch.isfinite(loss):
                logger.error("fine-tuning diverged at epoch %d", epoch)
                return {"diverged": True, "best": best, "curves": curves,
                        "out_dir": str(out_dir)}
            optim.zero_grad()
            loss.backward()
            optim.step()
            total += float(loss.detach())
            n_batches += 1
        if sched is not None:
            sched.step()
        if dev_metric_fn is not None:
            dev_acc = float(dev_metric_fn(model, epoch))
            dev_loss = float("nan")
        else:
            preds = predict_samples(model, dev_samples, cfg)
            report = evaluate_predictions(preds, cfg.aggregation, "dev")
            dev_acc = report.accuracy
            with torch.no_grad():
                dev_loss = _dev_loss(model, dev_samples, cfg, ce)
        curves.append({"epoch": epoch, "train_loss": total / max(n_batches, 1),
                       "dev_loss": dev_loss, "dev_accuracy": dev_acc})
        if dev_acc > best["dev_accuracy"]:
            best = {"epoch": epoch, "dev_accuracy": dev_acc}
            save("best", epoch)
        if epoch - best["epoch"] >= cfg.early_stop_patience:
            break
    save("last", curves[-1]["epoch"] if curves else 0)
    with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "dev_loss",
                                          "dev_accuracy"])
        w.writeheader()
        w.writerows(curves)
    return {"diverged": False, "best": best, "curves": curves,
            "out_dir": str(out_dir), "stopped_epoch": curves[-1]["epoch"] if curves else 0}


def _dev_loss(model: AdModel, samples: list[LabeledSample], cfg: FinetuneConfig,
              ce) -> float:
    label_idx = {g: i for i, g in enumerate(GROUPS)}
    losses = []
    model.eval()
    for s in samples:
        rng = np.random.default_rng([cfg.seed, 0, hash(s.sample_id) & 0xFFFF])
        seq = AcousticSequence("waveform", s.wave, 16000)
        chunk = random_crop(seq, cfg.crop_len, rng) if cfg.augment_kind == "crop" \
            else (segment(seq, _policy(cfg.segment_len, cfg.segment_hop)) or [seq])[0]
        batch, lengths = _to_model_input(model, [chunk], cfg.n_mels)
        logits = model(batch, lengths)
        losses.append(float(ce(logits, torch.tensor([label_idx[s.label]]))))
    model.train()
    return float(np.mean(losses))


def evaluate_model(model: AdModel, samples: list[LabeledSample],
                   cfg: FinetuneConfig, split_tag: str = "",
                   predictions_path: str | Path | None = None) -> EvalReport:
    preds = predict_samples(model, samples, cfg)
    from .evalkit import aggregate
    labels = aggregate(preds, cfg.aggregation)
    report = evaluate_predictions(preds, cfg.aggregation, split_tag)
    if predictions_path is not None:
        write_predictions(preds, labels, predictions_path)
    return report


def load_finetuned(path: str | Path) -> tuple[AdModel, Checkpoint]:
    ckpt = Checkpoint.load(path)
    model = build_ad_model(None, ckpt.meta["family"], ckpt.meta["layer_select"],
                           enc_cfg=EncoderConfig(**ckpt.meta["encoder"])
                           if "encoder" in ckpt.meta else None,
                           ssl_cfg=SslConfig(**ckpt.meta["ssl"])
                           if "ssl" in ckpt.meta else None)
    if model.family == "ctc_attn":
        model.encoder.load_state_dict(ckpt.state("encoder"))
    else:
        model.feature_encoder.load_state_dict(ckpt.state("feature_encoder"))
        model.context_encoder.load_state_dict(ckpt.state("context_encoder"))
    model.head.load_state_dict(ckpt.state("head"))
    return model, ckpt


ABLATION_CONDITIONS = ("scratch", "matched_pretrain", "mismatched_pretrain")


def ablation_run(split: dict, checkpoints: dict[str, Checkpoint | None],
                 seeds: list[int], cfg: FinetuneConfig, out_dir: str | Path,
                 family: str = "wav2vec", ssl_cfg: SslConfig | None = None) -> dict:
    """Fine-tune every condition for every seed and collect a comparison."""
    unknown = set(checkpoints) - set(ABLATION_CONDITIONS)
    if unknown:
        raise ClassifierError(f"unknown ablation conditions: {sorted(unknown)}")
    out_dir = Path(out_dir)
    report: dict = {"conditions": {}, "seeds": list(seeds)}
    for condition in ABLATION_CONDITIONS:
        if condition not in checkpoints:
            continue
        ckpt = checkpoints[condition]
        cond_entry = {"runs": []}
        for seed in seeds:
            run_cfg = dataclass_replace(cfg, seed=seed)
            run_dir = out_dir / condition / str(seed)
            result = finetune(ckpt, split, run_cfg, run_dir, family=family,
                              ssl_cfg=ssl_cfg)
            model, _ = load_finetuned(run_dir / "best.pt")
            dev_report = evaluate_model(model, split["dev"], run_cfg, "dev")
            entry = {
                "seed": seed,
                "curves": result["curves"],
                "best_epoch": result["best"]["epoch"],
                "dev_accuracy": dev_report.accuracy,
            }
            if split.get("test"):
                test_report = evaluate_model(
                    model, split["test"], run_cfg, "test",
                    predictions_path=run_dir / "predictions_test.csv")
                entry["test_accuracy"] = test_report.accuracy
                entry["test_confusion"] = test_report.confusion.astype(int).tolist()
            cond_entry["runs"].append(entry)
        losses_at_5 = [
            next((row["train_loss"] for row in run["curves"] if row["epoch"] == 5), None)
            for run in cond_entry["runs"]
        ]
        if all(v is not None for v in losses_at_5):
            cond_entry["mean_train_loss_epoch5"] = float(np.mean(losses_at_5))
        cond_entry["mean_dev_accuracy"] = float(
            np.mean([r["dev_accuracy"] for r in cond_entry["runs"]]))
        report["conditions"][condition] = cond_entry
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def dataclass_replace(cfg, **kw):
    import dataclasses
    return dataclasses.replace(cfg, **kw)
