"""Manifest handling and speaker-disjoint train/dev/test splitting.

Sample files follow the GROUP_SEX_SPEAKER_SEQ naming convention
(e.g. ``AD_F_040108_045.wav``). The splitter produces several split
versions that share a single frozen test set whose speakers never occur
in train or dev.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import random
import wave
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

GROUPS = ("AD", "MCI", "HC")
SEXES = ("M", "F")
AUDIO_EXTENSIONS = (".wav",)

_ID_PARTS = 4


class ManifestError(Exception):
    """Raised for unrecoverable manifest-level problems."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    speaker_id: str
    group: str
    sex: str
    audio_path: str
    duration: float

    def __post_init__(self):
        parsed = parse_sample_id(self.sample_id)
        if parsed is None:
            raise ManifestError(f"malformed sample_id: {self.sample_id!r}")
        group, sex, speaker, _ = parsed
        if group != self.group or sex != self.sex or speaker != self.speaker_id:
            raise ManifestError(
                f"sample_id {self.sample_id!r} disagrees with stored fields "
                f"({self.group}, {self.sex}, {self.speaker_id})"
            )
        if not self.duration > 0:
            raise ManifestError(f"{self.sample_id}: duration must be > 0")


@dataclass
class ParseIssue:
    path: str
    reason: str


@dataclass(frozen=True)
class ExclusionList:
    excluded_ids: frozenset[str]

    def __post_init__(self):
        bad = [s for s in self.excluded_ids if parse_sample_id(s) is None]
        if bad:
            raise ManifestError(f"malformed exclusion ids: {sorted(bad)}")

    @classmethod
    def from_ids(cls, ids) -> "ExclusionList":
        return cls(frozenset(ids))


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    allow_dev_overlap: bool = True
    n_versions: int = 1
    frozen_test: frozenset[str] | None = None

    def __post_init__(self):
        if len(self.ratios) != 3 or not all(0 < r < 1 for r in self.ratios):
            raise ManifestError(f"each split ratio must be in (0,1): {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ManifestError(f"split ratios must sum to 1.0: {self.ratios}")
        if self.n_versions < 1:
            raise ManifestError("n_versions must be >= 1")


@dataclass
class SplitResult:
    version_tag: str
    train: list[SampleRecord]
    dev: list[SampleRecord]
    test: list[SampleRecord]
    diagnostics: list[str] = field(default_factory=list)

    def sets(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def counts(self) -> dict:
        out = {}
        for name, records in self.sets().items():
            per_group = {
                g: {
                    "samples": sum(1 for r in records if r.group == g),
                    "speakers": len({r.speaker_id for r in records if r.group == g}),
                }
                for g in GROUPS
            }
            out[name] = {
                "samples": len(records),
                "speakers": len({r.speaker_id for r in records}),
                "per_group": per_group,
            }
        return out


def parse_sample_id(sample_id: str):
    """Split GROUP_SEX_SPEAKER_SEQ into its parts, or None if malformed."""
    parts = sample_id.split("_")
    if len(parts) != _ID_PARTS:
        return None
    group, sex, speaker, seq = parts
    if group not in GROUPS or sex not in SEXES:
        return None
    if not speaker.isdigit() or not seq.isdigit():
        return None
    return group, sex, speaker, seq


def probe_wav_duration(path: str | Path) -> float:
    with contextlib.closing(wave.open(str(path), "rb")) as wf:
        rate = wf.getframerate()
        n = wf.getnframes()
    if rate <= 0 or n <= 0:
        raise ManifestError(f"{path}: empty or invalid WAV header")
    return n / rate


def parse_manifest(root_listing) -> tuple[list[SampleRecord], list[ParseIssue]]:
    """Build records from audio file paths; malformed names become issues."""
    records: list[SampleRecord] = []
    issues: list[ParseIssue] = []
    for raw in root_listing:
        path = Path(raw)
        if path.suffix.lower() not in AUDIO_EXTENSIONS:
            issues.append(ParseIssue(str(raw), f"unsupported extension {path.suffix!r}"))
            continue
        parsed = parse_sample_id(path.stem)
        if parsed is None:
            issues.append(ParseIssue(str(raw), f"basename {path.stem!r} does not match GROUP_SEX_SPEAKER_SEQ"))
            continue
        group, sex, speaker, _ = parsed
        try:
            duration = probe_wav_duration(path)
        except (OSError, wave.Error, ManifestError, EOFError) as exc:
            issues.append(ParseIssue(str(raw), f"duration probe failed: {exc}"))
            continue
        records.append(
            SampleRecord(
                sample_id=path.stem,
                speaker_id=speaker,
                group=group,
                sex=sex,
                audio_path=str(raw),
                duration=duration,
            )
        )
    return records, issues


def apply_exclusions(
    records: list[SampleRecord], exclusions: ExclusionList
) -> tuple[list[SampleRecord], list[str]]:
    """Drop excluded sample ids, preserving order; absent ids only warn."""
    present = {r.sample_id for r in records}
    warnings = [
        f"excluded id not in manifest: {sid}"
        for sid in sorted(exclusions.excluded_ids - present)
    ]
    for w in warnings:
        logger.warning(w)
    kept = [r for r in records if r.sample_id not in exclusions.excluded_ids]
    return kept, warnings


@dataclass
class _Speaker:
    speaker_id: str
    group: str
    sex: str
    records: list[SampleRecord]

    @property
    def n(self) -> int:
        return len(self.records)


def _collect_speakers(records: list[SampleRecord]) -> dict[str, _Speaker]:
    speakers: dict[str, _Speaker] = {}
    for r in records:
        sp = speakers.get(r.speaker_id)
        if sp is None:
            speakers[r.speaker_id] = _Speaker(r.speaker_id, r.group, r.sex, [r])
        else:
            if sp.group != r.group:
                raise ManifestError(f"speaker {r.speaker_id} appears in two groups")
            sp.records.append(r)
    return speakers


def _pick_test_speakers(
    group_speakers: list[_Speaker],
    target_samples: int,
    rng: random.Random,
    pinned: set[str],
) -> set[str]:
    """Fill the test sample budget speaker by speaker.

    Picks in seeded random order, alternating towards the sex that is most
    underrepresented relative to the group, and never takes a speaker whose
    sample count would overshoot the remaining budget.
    """
    eligible = [s for s in group_speakers if s.speaker_id not in pinned]
    order = sorted(eligible, key=lambda s: s.speaker_id)
    rng.shuffle(order)
    total_by_sex = {sex: sum(s.n for s in eligible if s.sex == sex) for sex in SEXES}
    total = sum(total_by_sex.values()) or 1

    chosen: set[str] = set()
    chosen_samples = 0
    chosen_by_sex = {sex: 0 for sex in SEXES}
    while chosen_samples < target_samples:
        remaining = target_samples - chosen_samples
        fitting = [s for s in order if s.speaker_id not in chosen and s.n <= remaining]
        if not fitting:
            break
        # prefer the sex lagging its in-group share, if any candidate has it
        def deficit(sex):
            want = total_by_sex[sex] / total * target_samples
            return want - chosen_by_sex[sex]

        want_sex = max(SEXES, key=deficit)
        preferred = [s for s in fitting if s.sex == want_sex]
        pick = (preferred or fitting)[0]
        chosen.add(pick.speaker_id)
        chosen_samples += pick.n
        chosen_by_sex[pick.sex] += pick.n
    return chosen


def _split_remainder(
    speakers: list[_Speaker],
    dev_target: int,
    allow_dev_overlap: bool,
    pinned: set[str],
    rng: random.Random,
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Assign non-test samples to train/dev for one split version."""
    train: list[SampleRecord] = []
    dev: list[SampleRecord] = []
    if allow_dev_overlap:
        # sample-level assignment: speakers may contribute to both sets,
        # but pinned (pathologically heavy) speakers stay fully in train
        pool: list[SampleRecord] = []
        for s in speakers:
            if s.speaker_id in pinned:
                train.extend(s.records)
            else:
                pool.extend(s.records)
        pool.sort(key=lambda r: r.sample_id)
        rng.shuffle(pool)
        dev = pool[:dev_target]
        train.extend(pool[dev_target:])
    else:
        order = sorted(
            (s for s in speakers if s.speaker_id not in pinned),
            key=lambda s: s.speaker_id,
        )
        rng.shuffle(order)
        got = 0
        for s in order:
            if got < dev_target and got + s.n <= dev_target + max(1, s.n // 2):
                dev.extend(s.records)
                got += s.n
            else:
                train.extend(s.records)
        for s in speakers:
            if s.speaker_id in pinned:
                train.extend(s.records)
    return train, dev


def make_split(records: list[SampleRecord], spec: SplitSpec) -> list[SplitResult]:
    """Produce n_versions splits sharing one frozen speaker-disjoint test set."""
    if not records:
        raise ManifestError("cannot split an empty manifest")
    speakers = _collect_speakers(records)
    by_group: dict[str, list[_Speaker]] = defaultdict(list)
    for s in speakers.values():
        by_group[s.group].append(s)
    diagnostics: list[str] = []
    for g, members in by_group.items():
        if len(members) < 3:
            raise ManifestError(f"group {g} has fewer than 3 speakers")

    r_train, r_dev, r_test = spec.ratios
    # speakers owning more than the non-train share of their group cannot be
    # placed anywhere but train without wrecking the ratios
    pinned: set[str] = set()
    for g, members in by_group.items():
        g_total = sum(s.n for s in members)
        for s in members:
            if s.n / g_total > (1.0 - r_train):
                pinned.add(s.speaker_id)
                diagnostics.append(
                    f"imbalance: speaker {s.speaker_id} holds {s.n}/{g_total} of "
                    f"group {g} samples; pinned to train"
                )

    if spec.frozen_test is not None:
        test_speakers = set(spec.frozen_test)
        unknown = test_speakers - set(speakers)
        if unknown:
            raise ManifestError(f"frozen_test names unknown speakers: {sorted(unknown)}")
        if test_speakers & pinned:
            diagnostics.append("imbalance: frozen_test contains a pathologically heavy speaker")
            pinned -= test_speakers
    else:
        rng = random.Random(spec.seed)
        test_speakers = set()
        for g in GROUPS:
            members = by_group.get(g, [])
            if not members:
                continue
            g_total = sum(s.n for s in members)
            target = math.ceil(r_test * g_total - 1e-9)
            target = max(1, min(target, sum(s.n for s in members if s.speaker_id not in pinned)))
            test_speakers |= _pick_test_speakers(members, target, rng, pinned)

    test_records = sorted(
        (r for s in test_speakers for r in speakers[s].records),
        key=lambda r: r.sample_id,
    )
    n_total = len(records)
    got_frac = len(test_records) / n_total
    if abs(got_frac - r_test) > 0.05:
        diagnostics.append(
            f"imbalance: test sample fraction {got_frac:.3f} deviates from target {r_test:.3f}"
        )

    rest = [s for s in speakers.values() if s.speaker_id not in test_speakers]
    dev_target = round(r_dev * n_total)
    results = []
    for k in range(1, spec.n_versions + 1):
        v_rng = random.Random(spec.seed * 100003 + k)
        train, dev = _split_remainder(rest, dev_target, spec.allow_dev_overlap, pinned, v_rng)
        result = SplitResult(
            version_tag=f"v{k}",
            train=sorted(train, key=lambda r: r.sample_id),
            dev=sorted(dev, key=lambda r: r.sample_id),
            test=list(test_records),
            diagnostics=list(diagnostics),
        )
        results.append(result)
    return results


def validate_split(result: SplitResult, allow_dev_overlap: bool = True) -> list[str]:
    """Return all invariant violations; empty means the split is sound."""
    violations: list[str] = []
    spk = {name: {r.speaker_id for r in recs} for name, recs in result.sets().items()}
    for name in ("train", "dev"):
        for s in sorted(spk["test"] & spk[name]):
            violations.append(f"test-{name} speaker leak: {s}")
    if not allow_dev_overlap:
        for s in sorted(spk["train"] & spk["dev"]):
            violations.append(f"train-dev speaker leak: {s}")
    seen: dict[str, str] = {}
    for name, recs in result.sets().items():
        ids = set()
        for r in recs:
            if r.sample_id in ids or (r.sample_id in seen and seen[r.sample_id] != name):
                violations.append(f"duplicate sample: {r.sample_id}")
            ids.add(r.sample_id)
            seen[r.sample_id] = name
    return violations


def check_union(result: SplitResult, records: list[SampleRecord]) -> list[str]:
    """Verify train+dev+test is exactly the input manifest."""
    want = sorted(r.sample_id for r in records)
    got = sorted(r.sample_id for recs in result.sets().values() for r in recs)
    if want != got:
        missing = set(want) - set(got)
        extra = set(got) - set(want)
        return [f"union mismatch: missing={sorted(missing)} extra={sorted(extra)}"]
    return []


# --- persistence -----------------------------------------------------------

def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "sample_id": r.sample_id,
                "speaker_id": r.speaker_id,
                "group": r.group,
                "sex": r.sex,
                "audio_path": r.audio_path,
                "duration": r.duration,
            }) + "\n")


def read_manifest(path: str | Path) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(SampleRecord(**d))
    return records


def read_exclusions(path: str | Path) -> ExclusionList:
    with open(path, encoding="utf-8") as f:
        ids = [line.strip() for line in f if line.strip()]
    return ExclusionList.from_ids(ids)


def write_split(results: list[SplitResult], out_dir: str | Path) -> None:
    """Persist one manifest file per set per version under out_dir/<vK>/."""
    out_dir = Path(out_dir)
    for result in results:
        vdir = out_dir / result.version_tag
        for name, recs in result.sets().items():
            write_manifest(recs, vdir / f"{name}.jsonl")
        (vdir / "counts.json").write_text(json.dumps(result.counts(), indent=2))
        if result.diagnostics:
            (vdir / "diagnostics.txt").write_text("\n".join(result.diagnostics) + "\n")


def read_split(split_dir: str | Path, version_tag: str) -> SplitResult:
    vdir = Path(split_dir) / version_tag
    if not vdir.is_dir():
        raise ManifestError(f"no split version at {vdir}")
    return SplitResult(
        version_tag=version_tag,
        train=read_manifest(vdir / "train.jsonl"),
        dev=read_manifest(vdir / "dev.jsonl"),
        test=read_manifest(vdir / "test.jsonl"),
    )
