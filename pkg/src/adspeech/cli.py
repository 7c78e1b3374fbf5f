"""Command-line entry point wiring data generation, splitting, pre-training,
fine-tuning, baselines, evaluation, ablation and reporting.

Run directories are self-contained: each holds a config snapshot, the
config digest, logs and outputs, and can be re-executed bit-identically.
Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 runtime
failure (including the overwrite guard and lock conflicts).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import asr, classifier, config as config_mod, corpus, synthgen, wav2vec
from .baselines import extract_lld_functionals, train_svm, predict_svm
from .checkpoints import Checkpoint, CheckpointError
from .config import ConfigError, config_digest, load_config, write_snapshot
from .evalkit import (EvalReport, PredictionSet, cross_split_report,
                      evaluate_predictions, render_confusion, render_table)
from .frontend import AcousticSequence

logger = logging.getLogger("adspeech")

DATA_ROOT_ENV = "ADSPEECH_DATA_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_RUNTIME = 4


class ArtifactError(Exception):
    """A required upstream output is missing; message names the producer."""


class GuardError(Exception):
    """Refusing to overwrite an existing completed run."""


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _language(tag: str):
    if tag == "a":
        return synthgen.language_a()
    if tag == "b":
        return synthgen.language_b()
    raise ConfigError(f"data.language must be 'a' or 'b', got {tag!r}")


@contextlib.contextmanager
def run_dir_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise GuardError(f"{run_dir} is locked by another writer ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def guard_and_snapshot(run_dir: Path, cfg: dict, force: bool) -> str:
    """Refuse to overwrite a completed run with the same digest unless --force."""
    digest = config_digest(cfg)
    marker = run_dir / "config_digest.txt"
    if marker.is_file():
        previous = marker.read_text().strip()
        if previous == digest and not force:
            raise GuardError(
                f"{run_dir} already holds a completed run with the same config "
                f"digest {digest[:12]}…; pass --force to overwrite")
        if previous != digest and not force:
            raise GuardError(
                f"{run_dir} holds a run with a different config digest; pass "
                f"--force to overwrite or choose another --out-dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, run_dir / "config.json")
    return digest


def finish_run(run_dir: Path, cfg: dict) -> None:
    (run_dir / "config_digest.txt").write_text(config_digest(cfg) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, cfg: dict) -> int:
    """Render the unlabeled pre-training corpus and the labeled 3-class corpus."""
    seed = cfg["experiment"]["seed"]
    d = cfg["data"]
    language = _language(d["language"])
    root = data_root() / cfg["experiment"]["name"]

    asr_dir = root / f"asr-{d['language']}"
    asr_corpus = synthgen.gen_asr_corpus(
        language, d["asr_utterances"], (d["asr_len_min"], d["asr_len_max"]), seed)
    synthgen.write_asr_corpus(asr_corpus, asr_dir, tag=d["language"])

    profiles = synthgen.PROFILE_PRESETS[d["profiles"]]()
    ad_dir = root / f"ad-{d['profiles']}-{d['language']}"
    utts = synthgen.gen_ad_corpus(
        profiles, language, d["n_speakers_per_class"], d["samples_per_speaker"],
        (d["duration_min"], d["duration_max"]), seed, out_dir=ad_dir)
    records = [corpus.SampleRecord(u.sample_id, u.speaker_id, u.class_label,
                                   u.sex, str(ad_dir / f"{u.sample_id}.wav"),
                                   u.duration) for u in utts]
    corpus.write_manifest(records, ad_dir / "manifest.jsonl")
    (root / "digest.txt").write_text(synthgen.corpus_digest(utts) + "\n")
    logger.info("wrote %d pre-training utterances to %s", len(asr_corpus), asr_dir)
    logger.info("wrote %d labeled samples to %s", len(records), ad_dir)
    return EXIT_OK


def _manifest_path(cfg: dict) -> Path:
    d = cfg["data"]
    return (data_root() / cfg["experiment"]["name"]
            / f"ad-{d['profiles']}-{d['language']}" / "manifest.jsonl")


def _load_records(cfg: dict) -> list:
    path = _manifest_path(cfg)
    if not path.is_file():
        raise ArtifactError(f"no labeled manifest at {path}; run `synth-data` first")
    return corpus.read_manifest(path)


def cmd_split(args, cfg: dict) -> int:
    records = _load_records(cfg)
    s = cfg["split"]
    spec = corpus.SplitSpec(
        ratios=(s["train_ratio"], s["dev_ratio"], s["test_ratio"]),
        seed=s["seed"], allow_dev_overlap=s["allow_dev_overlap"],
        n_versions=s["n_versions"])
    results = corpus.make_split(records, spec)
    problems = []
    for r in results:
        problems += corpus.validate_split(r, s["allow_dev_overlap"])
        problems += corpus.check_union(r, records)
    out = Path(args.out_dir) / cfg["experiment"]["name"] / "splits"
    corpus.write_split(results, out)
    report = out / "validation.txt"
    report.write_text("\n".join(problems) + "\n" if problems else "ok\n")
    if problems:
        logger.error("split validation found %d problem(s); see %s",
                     len(problems), report)
        return EXIT_RUNTIME
    logger.info("wrote %d split version(s) to %s", len(results), out)
    return EXIT_OK


def _splits_dir(args, cfg) -> Path:
    return Path(args.out_dir) / cfg["experiment"]["name"] / "splits"


def _read_splits(args, cfg) -> list:
    sdir = _splits_dir(args, cfg)
    versions = sorted(p.name for p in sdir.glob("v*") if p.is_dir()) \
        if sdir.is_dir() else []
    if args.split:
        versions = [v for v in versions if v in args.split]
        missing = set(args.split) - set(versions)
        if missing:
            raise ArtifactError(
                f"split version(s) {sorted(missing)} not found under {sdir}; "
                f"run `split` first")
    if not versions:
        raise ArtifactError(f"no split manifests under {sdir}; run `split` first")
    return [corpus.read_split(sdir, v) for v in versions]


def _read_asr_corpus(cfg: dict) -> list[tuple[np.ndarray, list[str]]]:
    d = cfg["data"]
    cdir = data_root() / cfg["experiment"]["name"] / f"asr-{d['language']}"
    meta = cdir / "corpus.jsonl"
    if not meta.is_file():
        raise ArtifactError(f"no pre-training corpus at {meta}; run `synth-data` first")
    from .frontend import load_audio
    out = []
    with open(meta, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            out.append((load_audio(rec["audio_path"]).data, rec["tokens"]))
    return out


def cmd_pretrain_asr(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    run_dir = Path(args.out_dir) / cfg["experiment"]["name"] / "pretrain-asr" / str(seed)
    a = cfg["asr"]
    with run_dir_lock(run_dir):
        digest = guard_and_snapshot(run_dir, cfg, args.force)
        corpus_data = _read_asr_corpus(cfg)
        vocab = list(_language(cfg["data"]["language"]).vocab)
        tcfg = asr.AsrTrainConfig(
            epochs=a["epochs"], batch_size=a["batch_size"], lr=a["lr"], seed=seed,
            loss=asr.JointLossConfig(a["ctc_weight"], a["label_smoothing"]),
            n_mels=a["n_mels"])
        enc_cfg = asr.EncoderConfig(n_mels=a["n_mels"], d_model=a["d_model"],
                                    n_layers=a["n_layers"], n_heads=a["n_heads"],
                                    ff_dim=a["ff_dim"], dropout=a["dropout"])
        summary = asr.pretrain_asr(corpus_data, vocab, tcfg, run_dir,
                                   enc_cfg=enc_cfg, config_digest=digest)
        if summary.get("diverged"):
            logger.error("training diverged; see %s", run_dir)
            return EXIT_RUNTIME
        finish_run(run_dir, cfg)
    logger.info("best checkpoint at %s", Path(run_dir) / "best.pt")
    return EXIT_OK


def _ssl_config(cfg: dict) -> wav2vec.SslConfig:
    s = cfg["ssl"]
    return wav2vec.SslConfig(
        dim=s["dim"], n_context_layers=s["n_context_layers"], n_heads=s["n_heads"],
        ff_dim=s["ff_dim"], dropout=s["dropout"], groups=s["groups"],
        entries=s["entries"], mask_prob=s["mask_prob"], mask_span=s["mask_span"],
        n_distractors=s["n_distractors"], temperature=s["temperature"],
        diversity_weight=s["diversity_weight"])


def cmd_pretrain_ssl(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    lang = cfg["data"]["language"]
    run_dir = (Path(args.out_dir) / cfg["experiment"]["name"]
               / f"pretrain-ssl-{lang}" / str(seed))
    s = cfg["ssl"]
    with run_dir_lock(run_dir):
        digest = guard_and_snapshot(run_dir, cfg, args.force)
        waves = [w for w, _ in _read_asr_corpus(cfg)]
        tcfg = wav2vec.SslTrainConfig(epochs=s["epochs"], batch_size=s["batch_size"],
                                      lr=s["lr"], seed=seed,
                                      temp_start=s["temp_start"],
                                      temp_end=s["temp_end"])
        summary = wav2vec.ssl_pretrain(waves, _ssl_config(cfg), tcfg, run_dir,
                                       config_digest=digest)
        if summary.get("diverged"):
            logger.error("training diverged; see %s", run_dir)
            return EXIT_RUNTIME
        finish_run(run_dir, cfg)
    logger.info("best checkpoint at %s", Path(run_dir) / "best.pt")
    return EXIT_OK


def _load_checkpoint(path: str | None, needed_by: str) -> Checkpoint | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ArtifactError(
            f"checkpoint {p} not found; produce it with `pretrain-ssl` or "
            f"`pretrain-asr` before running `{needed_by}`")
    try:
        return Checkpoint.load(p)
    except CheckpointError as exc:
        raise ArtifactError(str(exc)) from exc


def _finetune_cfg(cfg: dict, seed: int) -> classifier.FinetuneConfig:
    f, e = cfg["finetune"], cfg["evaluate"]
    return classifier.FinetuneConfig(
        batch_size=f["batch_size"], lr=f["lr"], optimizer=f["optimizer"],
        schedule=f["schedule"], max_epochs=f["max_epochs"],
        early_stop_patience=f["early_stop_patience"], seed=seed,
        augment_kind=f["augment_kind"], crop_len=f["crop_len"],
        segment_len=f["segment_len"], segment_hop=f["segment_hop"],
        freeze_encoder=f["freeze_encoder"], layer_select=f["layer_select"],
        hidden_dim=f["hidden_dim"], dropout=f["dropout"],
        eval_segment_len=e["segment_len"], eval_segment_hop=e["segment_hop"],
        aggregation=e["aggregation"], n_mels=cfg["asr"]["n_mels"])


def _split_to_samples(split: corpus.SplitResult) -> dict:
    return {name: classifier.samples_from_records(recs)
            for name, recs in split.sets().items()}


def _write_version_metrics(vdir: Path, dev: EvalReport, test: EvalReport) -> None:
    vdir.mkdir(parents=True, exist_ok=True)
    (vdir / "metrics.json").write_text(json.dumps({
        "dev": json.loads(dev.to_json()),
        "test": json.loads(test.to_json()),
    }, indent=2, sort_keys=True) + "\n")


def _write_summary_metrics(run_dir: Path, tests: dict[str, EvalReport]) -> None:
    payload = {"versions": {v: json.loads(r.to_json()) for v, r in tests.items()}}
    if len(tests) >= 2:
        payload["cross_split"] = cross_split_report(list(tests.values()))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_finetune(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    encoder = cfg["finetune"]["encoder"]
    if encoder not in ("wav2vec", "ctc_attn", "none"):
        raise ConfigError(f"finetune.encoder must be wav2vec|ctc_attn|none")
    if encoder != "none" and not args.checkpoint:
        producer = "pretrain-ssl" if encoder == "wav2vec" else "pretrain-asr"
        raise ArtifactError(
            f"finetune.encoder={encoder!r} needs a checkpoint; run `{producer}` "
            f"and pass its best.pt as the positional CHECKPOINT argument")
    ckpt = _load_checkpoint(args.checkpoint, "finetune") if encoder != "none" else None
    condition = args.condition or (f"{encoder}" if encoder != "none" else "scratch")
    run_dir = Path(args.out_dir) / cfg["experiment"]["name"] / condition / str(seed)
    family = encoder if encoder != "none" else cfg["finetune"].get("family", "wav2vec")
    if ckpt is not None:
        family = ckpt.meta.get("family", family)
    with run_dir_lock(run_dir):
        digest = guard_and_snapshot(run_dir, cfg, args.force)
        splits = _read_splits(args, cfg)
        fcfg = _finetune_cfg(cfg, seed)
        tests: dict[str, EvalReport] = {}
        for split in splits:
            vdir = run_dir / split.version_tag
            samples = _split_to_samples(split)
            result = classifier.finetune(
                ckpt, samples, fcfg, vdir, family=family,
                ssl_cfg=_ssl_config(cfg), config_digest=digest)
            if result.get("diverged"):
                logger.error("fine-tuning diverged on %s", split.version_tag)
                return EXIT_RUNTIME
            model, _ = classifier.load_finetuned(vdir / "best.pt")
            dev_rep = classifier.evaluate_model(model, samples["dev"], fcfg, "dev")
            test_rep = classifier.evaluate_model(
                model, samples["test"], fcfg, "test",
                predictions_path=vdir / "predictions_test.csv")
            _write_version_metrics(vdir, dev_rep, test_rep)
            render_confusion(test_rep, vdir / "confusion_test.png",
                             vdir / "confusion_test.csv",
                             title=f"{condition} {split.version_tag}")
            tests[split.version_tag] = test_rep
            logger.info("%s %s: test accuracy %.3f", condition,
                        split.version_tag, test_rep.accuracy)
        _write_summary_metrics(run_dir, tests)
        finish_run(run_dir, cfg)
    return EXIT_OK


def cmd_baseline(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    run_dir = Path(args.out_dir) / cfg["experiment"]["name"] / "svm-minlld" / str(seed)
    with run_dir_lock(run_dir):
        guard_and_snapshot(run_dir, cfg, args.force)
        splits = _read_splits(args, cfg)
        tests: dict[str, EvalReport] = {}
        for split in splits:
            vdir = run_dir / split.version_tag
            vdir.mkdir(parents=True, exist_ok=True)
            reports = {}
            samples = _split_to_samples(split)
            feats = {name: [extract_lld_functionals(
                AcousticSequence("waveform", s.wave, 16000),
                cfg["baseline"]["feature_set"]) for s in part]
                for name, part in samples.items()}
            model = train_svm(feats["train"],
                              [s.label for s in samples["train"]],
                              C=cfg["baseline"]["C"])
            for name in ("dev", "test"):
                preds, truth = [], {}
                for vec, s in zip(feats[name], samples[name]):
                    label, scores = predict_svm(model, vec)
                    e = np.exp(scores - scores.max())
                    preds.append((s.sample_id, e / e.sum()))
                    truth[s.sample_id] = s.label
                reports[name] = evaluate_predictions(
                    PredictionSet(preds, truth), "vote", name)
            _write_version_metrics(vdir, reports["dev"], reports["test"])
            render_confusion(reports["test"], vdir / "confusion_test.png",
                             vdir / "confusion_test.csv",
                             title=f"svm-minlld {split.version_tag}")
            tests[split.version_tag] = reports["test"]
            logger.info("svm-minlld %s: test accuracy %.3f",
                        split.version_tag, reports["test"].accuracy)
        _write_summary_metrics(run_dir, tests)
        finish_run(run_dir, cfg)
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    if not args.checkpoint:
        raise ArtifactError(
            "`evaluate` needs a fine-tuned checkpoint (best.pt from `finetune`)")
    p = Path(args.checkpoint)
    if not p.is_file():
        raise ArtifactError(f"checkpoint {p} not found; run `finetune` first")
    model, ckpt = classifier.load_finetuned(p)
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    fcfg = _finetune_cfg(cfg, seed)
    run_dir = (Path(args.out_dir) / cfg["experiment"]["name"] / "evaluate"
               / p.parent.name)
    with run_dir_lock(run_dir):
        guard_and_snapshot(run_dir, cfg, args.force)
        splits = _read_splits(args, cfg)
        tests = {}
        for split in splits:
            samples = _split_to_samples(split)
            vdir = run_dir / split.version_tag
            vdir.mkdir(parents=True, exist_ok=True)
            dev_rep = classifier.evaluate_model(model, samples["dev"], fcfg, "dev")
            test_rep = classifier.evaluate_model(
                model, samples["test"], fcfg, "test",
                predictions_path=vdir / "predictions_test.csv")
            _write_version_metrics(vdir, dev_rep, test_rep)
            tests[split.version_tag] = test_rep
        _write_summary_metrics(run_dir, tests)
        finish_run(run_dir, cfg)
    return EXIT_OK


def cmd_ablate(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg["experiment"]["seed"]
    seeds = [seed + k for k in range(args.n_seeds)]
    checkpoints: dict = {"scratch": None}
    if args.matched:
        checkpoints["matched_pretrain"] = _load_checkpoint(args.matched, "ablate")
    if args.mismatched:
        checkpoints["mismatched_pretrain"] = _load_checkpoint(args.mismatched, "ablate")
    run_dir = Path(args.out_dir) / cfg["experiment"]["name"] / "ablate"
    with run_dir_lock(run_dir):
        guard_and_snapshot(run_dir, cfg, args.force)
        split = _read_splits(args, cfg)[0]
        samples = _split_to_samples(split)
        fcfg = _finetune_cfg(cfg, seed)
        report = classifier.ablation_run(samples, checkpoints, seeds, fcfg,
                                         run_dir, ssl_cfg=_ssl_config(cfg))
        finish_run(run_dir, cfg)
    for cond, entry in report["conditions"].items():
        logger.info("%s: mean dev accuracy %.3f", cond, entry["mean_dev_accuracy"])
    return EXIT_OK


def cmd_report(args, cfg: dict) -> int:
    root = Path(args.run_root) if args.run_root else \
        Path(args.out_dir) / cfg["experiment"]["name"]
    if not root.is_dir():
        raise ArtifactError(f"no run directory at {root}; run `finetune` first")
    rows: dict[str, dict] = {}
    confusions: dict[str, EvalReport] = {}
    for metrics_path in sorted(root.glob("*/*/metrics.json")):
        payload = json.loads(metrics_path.read_text())
        if "versions" not in payload:
            continue
        condition, seed = metrics_path.parent.parent.name, metrics_path.parent.name
        name = f"{condition}/{seed}"
        versions = {v: EvalReport.from_json(json.dumps(d))
                    for v, d in payload["versions"].items()}
        if "cross_split" in payload:
            rows[name] = payload["cross_split"]
        elif len(versions) >= 2:
            rows[name] = cross_split_report(list(versions.values()))
        else:
            continue
        total = sum(r.confusion for r in versions.values())
        confusions[name] = EvalReport(
            accuracy=rows[name]["accuracy"]["mean"],
            macro_precision=rows[name]["macro_precision"]["mean"],
            macro_recall=rows[name]["macro_recall"]["mean"],
            macro_f1=rows[name]["macro_f1"]["mean"],
            confusion=total, split_tag="all")
    if not rows:
        raise ArtifactError(
            f"no multi-split metrics.json files under {root}; run `finetune` "
            f"(or `baseline`) over at least two split versions first")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    render_table(rows, out / "table.md", out / "table.csv")
    for name, rep in confusions.items():
        safe = name.replace("/", "_")
        render_confusion(rep, out / f"confusion_{safe}.png",
                         out / f"confusion_{safe}.csv", title=name)
    logger.info("report written to %s", out)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adspeech",
        description="Synthetic-speech 3-class recognition experiments: "
                    "pre-training, transfer fine-tuning, baselines, reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file or preset name")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing completed run")
        p.add_argument("--out-dir", default="runs",
                       help="root directory for run outputs")

    p = sub.add_parser("synth-data", help="generate the synthetic corpora")
    common(p)

    p = sub.add_parser("split", help="speaker-disjoint split manifests")
    common(p)

    p = sub.add_parser("pretrain-asr", help="joint CTC-attention pre-training")
    common(p)

    p = sub.add_parser("pretrain-ssl", help="masked contrastive pre-training")
    common(p)

    p = sub.add_parser("finetune", help="train the 3-class head")
    common(p)
    p.add_argument("checkpoint", nargs="?", default=None,
                   help="pre-trained encoder checkpoint (best.pt)")
    p.add_argument("--split", action="append", default=[],
                   help="split version tag(s), e.g. v1 (default: all)")
    p.add_argument("--condition", default=None,
                   help="run-directory condition name")

    p = sub.add_parser("baseline", help="LLD + linear SVM baseline")
    common(p)
    p.add_argument("--split", action="append", default=[])

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint")
    common(p)
    p.add_argument("checkpoint", help="fine-tuned checkpoint (best.pt)")
    p.add_argument("--split", action="append", default=[])

    p = sub.add_parser("ablate", help="scratch vs matched vs mismatched transfer")
    common(p)
    p.add_argument("--matched", default=None, help="matched-language checkpoint")
    p.add_argument("--mismatched", default=None,
                   help="mismatched-language checkpoint")
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--split", action="append", default=[])

    p = sub.add_parser("report", help="mean±std tables and confusion figures")
    common(p)
    p.add_argument("run_root", nargs="?", default=None,
                   help="experiment run directory (default: <out-dir>/<name>)")
    return parser


COMMANDS = {
    "synth-data": cmd_synth_data,
    "split": cmd_split,
    "pretrain-asr": cmd_pretrain_asr,
    "pretrain-ssl": cmd_pretrain_ssl,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _resolve_config(args) -> dict:
    if args.config and not Path(args.config).exists() \
            and args.config in config_mod.preset_names():
        return config_mod.load_preset(args.config, args.overrides)
    return load_config(args.config, args.overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.seed is not None:
            cfg = config_mod.apply_overrides(cfg, [f"experiment.seed={args.seed}"])
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except ArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_ARTIFACT
    except GuardError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort guard
        logger.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
