import itertools
import json
from collections import Counter

import numpy as np
import pytest

from adspeech.corpus import GROUPS
from adspeech.evalkit import (EvalError, EvalReport, PredictionSet, aggregate,
                              compute_metrics, cross_split_report,
                              evaluate_predictions, format_mean_std,
                              read_confusion_csv, render_confusion,
                              render_table)


def onehotish(cls: int, strength: float = 0.8) -> np.ndarray:
    p = np.full(3, (1 - strength) / 2)
    p[cls] = strength
    return p


class TestPredictionSet:
    def test_probabilities_must_be_simplex(self):
        with pytest.raises(EvalError):
            PredictionSet([("AD_F_000001_001", np.array([0.5, 0.2, 0.1]))],
                          {"AD_F_000001_001": "AD"})

    def test_truth_must_cover_segments(self):
        with pytest.raises(EvalError):
            PredictionSet([("AD_F_000001_001", onehotish(0))], {})


class TestAggregate:
    def test_strict_majority(self):
        ps = PredictionSet([("s", onehotish(0)), ("s", onehotish(0)),
                            ("s", onehotish(2))], {"s": "AD"})
        assert aggregate(ps, "vote")["s"] == "AD"

    def test_single_segment_modes_agree(self):
        ps = PredictionSet([("s", onehotish(1))], {"s": "MCI"})
        assert aggregate(ps, "vote")["s"] == aggregate(ps, "mean_prob")["s"] == "MCI"

    def test_tie_broken_by_summed_probability(self):
        # one segment each for AD and MCI; AD's summed probability is higher
        a = np.array([0.7, 0.2, 0.1])
        b = np.array([0.2, 0.6, 0.2])
        ps = PredictionSet([("s", a), ("s", b)], {"s": "AD"})
        assert aggregate(ps, "vote")["s"] == "AD"

    def test_full_tie_lowest_class_index(self):
        a = np.array([0.6, 0.2, 0.2])
        b = np.array([0.2, 0.2, 0.6])
        ps = PredictionSet([("s", a), ("s", b)], {"s": "HC"})
        assert aggregate(ps, "vote")["s"] == "AD"

    def test_mean_prob_mode(self):
        a = np.array([0.55, 0.05, 0.40])
        b = np.array([0.05, 0.40, 0.55])
        ps = PredictionSet([("s", a), ("s", b)], {"s": "HC"})
        assert aggregate(ps, "mean_prob")["s"] == "HC"

    def test_unknown_mode(self):
        ps = PredictionSet([("s", onehotish(0))], {"s": "AD"})
        with pytest.raises(EvalError):
            aggregate(ps, "median")

    def test_vote_equals_exhaustive_counting_up_to_5(self):
        """Vote matches brute-force counting for every argmax multiset <= 5."""
        probs = [onehotish(i) for i in range(3)]
        for size in range(1, 6):
            for combo in itertools.product(range(3), repeat=size):
                ps = PredictionSet([("s", probs[c]) for c in combo], {"s": "AD"})
                got = aggregate(ps, "vote")["s"]
                counts = Counter(combo)
                top = max(counts.values())
                leaders = [c for c in range(3) if counts[c] == top]
                if len(leaders) == 1:
                    want = GROUPS[leaders[0]]
                else:
                    sums = {c: sum(probs[x][c] for x in combo) for c in leaders}
                    best = max(sums.values())
                    want = GROUPS[min(c for c in leaders
                                      if abs(sums[c] - best) < 1e-12)]
                assert got == want, (combo, got, want)


def brute_force_metrics(y_true, y_pred):
    per_class = {}
    for g in GROUPS:
        tp = sum(t == g and p == g for t, p in zip(y_true, y_pred))
        fp = sum(t != g and p == g for t, p in zip(y_true, y_pred))
        fn = sum(t == g and p != g for t, p in zip(y_true, y_pred))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[g] = (prec, rec, f1)
    acc = sum(t == p for t, p in zip(y_true, y_pred)) / len(y_true)
    macro = tuple(np.mean([per_class[g][i] for g in GROUPS]) for i in range(3))
    return acc, macro


class TestComputeMetrics:
    def test_perfect_predictions(self):
        y = ["AD", "MCI", "HC", "AD"]
        rep = compute_metrics(y, y)
        assert rep.accuracy == rep.macro_precision == rep.macro_recall == \
               rep.macro_f1 == 1.0
        assert np.array_equal(np.diag(rep.confusion), [2, 1, 1])

    def test_worked_confusion_macro_f1(self):
        # confusion rows (truth AD, MCI, HC): [[1,1,0],[0,2,0],[0,0,2]]
        y_true = ["AD", "AD", "MCI", "MCI", "HC", "HC"]
        y_pred = ["AD", "MCI", "MCI", "MCI", "HC", "HC"]
        rep = compute_metrics(y_true, y_pred)
        assert np.array_equal(rep.confusion,
                              [[1, 1, 0], [0, 2, 0], [0, 0, 2]])
        assert rep.macro_f1 == pytest.approx((2 / 3 + 0.8 + 1.0) / 3, abs=1e-4)

    def test_absent_class_zero_convention(self):
        rep = compute_metrics(["AD", "MCI"], ["AD", "MCI"])
        assert rep.per_class["HC"]["precision"] == 0.0
        assert rep.per_class["HC"]["recall"] == 0.0
        assert rep.macro_f1 == pytest.approx(2 / 3)

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            y_true = [GROUPS[i] for i in rng.integers(0, 3, n)]
            y_pred = [GROUPS[i] for i in rng.integers(0, 3, n)]
            rep = compute_metrics(y_true, y_pred)
            acc, (mp, mr, mf) = brute_force_metrics(y_true, y_pred)
            assert rep.accuracy == acc
            assert rep.macro_precision == pytest.approx(mp, abs=0)
            assert rep.macro_recall == pytest.approx(mr, abs=0)
            assert rep.macro_f1 == pytest.approx(mf, abs=0)
            assert rep.confusion.sum() == n

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        y_true = [GROUPS[i] for i in rng.integers(0, 3, 40)]
        y_pred = [GROUPS[i] for i in rng.integers(0, 3, 40)]
        order = rng.permutation(40)
        a = compute_metrics(y_true, y_pred)
        b = compute_metrics([y_true[i] for i in order],
                            [y_pred[i] for i in order])
        assert a.metrics() == b.metrics()


class TestCrossSplit:
    def _rep(self, acc):
        y = ["AD"] * 100
        p = ["AD"] * int(round(acc * 100)) + ["HC"] * (100 - int(round(acc * 100)))
        return compute_metrics(y, p)

    def test_identical_reports_zero_std(self):
        out = cross_split_report([self._rep(0.9)] * 3)
        assert out["accuracy"]["std"] == 0.0

    def test_hand_computed_display(self):
        out = cross_split_report([self._rep(a) for a in (0.87, 0.88, 0.89)])
        assert out["accuracy"]["display"] == "88.0±0.8"

    def test_single_report_rejected(self):
        with pytest.raises(EvalError):
            cross_split_report([self._rep(0.9)])

    def test_format(self):
        assert format_mean_std(0.88, 0.008165) == "88.0±0.8"


class TestRendering:
    def test_confusion_round_trip(self, tmp_path):
        y_true = ["AD"] * 12 + ["MCI"] * 5 + ["HC"] * 5
        y_pred = ["AD"] * 7 + ["HC"] * 5 + ["MCI"] * 5 + ["HC"] * 5
        rep = compute_metrics(y_true, y_pred)
        assert rep.confusion[0, 2] == 5  # 5 of 12 AD predicted healthy
        png, csv_path = tmp_path / "c.png", tmp_path / "c.csv"
        render_confusion(rep, png, csv_path, title="test")
        assert png.is_file() and png.stat().st_size > 0
        assert np.array_equal(read_confusion_csv(csv_path), rep.confusion)

    def test_diagonal_confusion_csv(self, tmp_path):
        rep = compute_metrics(["AD", "MCI", "HC"], ["AD", "MCI", "HC"])
        render_confusion(rep, tmp_path / "d.png", tmp_path / "d.csv")
        m = read_confusion_csv(tmp_path / "d.csv")
        assert np.array_equal(m, np.eye(3, dtype=int))

    def test_render_table(self, tmp_path):
        reps = [compute_metrics(["AD"] * 10, ["AD"] * k + ["HC"] * (10 - k))
                for k in (8, 9, 10)]
        rows = {"modelA": cross_split_report(reps)}
        render_table(rows, tmp_path / "t.md", tmp_path / "t.csv")
        md = (tmp_path / "t.md").read_text()
        assert "modelA" in md and "±" in md
        csv_text = (tmp_path / "t.csv").read_text()
        assert csv_text.splitlines()[0].startswith("model,accuracy")

    def test_report_json_round_trip(self):
        rep = compute_metrics(["AD", "MCI", "HC"], ["AD", "HC", "HC"], "v1")
        back = EvalReport.from_json(rep.to_json())
        assert back.metrics() == rep.metrics()
        assert np.array_equal(back.confusion, rep.confusion)
        assert json.loads(rep.to_json())["classes"] == list(GROUPS)


class TestEvaluatePredictions:
    def test_end_to_end(self):
        segs = [("AD_F_000001_001", onehotish(0)),
                ("AD_F_000001_001", onehotish(0)),
                ("HC_M_000002_001", onehotish(2))]
        truth = {"AD_F_000001_001": "AD", "HC_M_000002_001": "HC"}
        rep = evaluate_predictions(PredictionSet(segs, truth), "vote", "v1")
        assert rep.accuracy == 1.0 and rep.split_tag == "v1"
