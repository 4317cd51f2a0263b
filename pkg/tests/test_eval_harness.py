"""Tests for splitting, metrics and experiment reports."""

import itertools

import numpy as np
import pytest

from config import EngineConfig
from data_models import Ablation, RandomizationPolicy, SplitSpec
from errors import ConfigError, MetricsValidationError
from eval_harness import (
    ERROR_LABEL, evaluate_known, evaluate_openset, experiment_to_dict, format_experiment_report,
    mean_metrics, run_experiment, run_on_flows, stratified_split
)
from flow_ingest import write_dataset
from synthetic_data import SyntheticSpec, generate_synthetic_openset, parse_synthetic_spec
from tests.conftest import make_flow


def repeat(true, predicted, n):
    return [(true, predicted)] * n


def known_fixture():
    """A: 3 right, 1 as B; B: 2 right; C: 1 right, 1 as novel."""
    return repeat("A", "A", 3) + repeat("A", "B", 1) + repeat("B", "B", 2) + \
        repeat("C", "C", 1) + repeat("C", "novel", 1)


def openset_fixture():
    """20 samples: 6 of A, 6 of B and 8 novel."""
    return (
        repeat("A", "A", 5) + repeat("A", "novel", 1)
        + repeat("B", "B", 4) + repeat("B", "A", 1) + repeat("B", "novel", 1)
        + repeat("novel", "novel", 6) + repeat("novel", "A", 1) + repeat("novel", "B", 1)
    )


def brute_force_macro(pairs, labels):
    """Counting one-vs-rest precision/recall/F1 by hand."""
    pres, rcls, f1s = [], [], []
    for label in labels:
        tp = sum(t == label and p == label for t, p in pairs)
        fp = sum(t != label and p == label for t, p in pairs)
        fn = sum(t == label and p != label for t, p in pairs)
        pre = tp / (tp + fp) if tp + fp else 0.0
        rcl = tp / (tp + fn) if tp + fn else 0.0
        pres.append(pre)
        rcls.append(rcl)
        f1s.append(2 * pre * rcl / (pre + rcl) if pre + rcl else 0.0)
    return np.mean(pres), np.mean(rcls), np.mean(f1s)


class TestStratifiedSplit:
    """Test cases for the seeded per-group split."""

    def test_single_group(self):
        """Ten flows of one group split 8/2."""
        flows = [make_flow(f"f{i}") for i in range(10)]
        db_part, test_part = stratified_split(flows, SplitSpec(), seed=0)
        assert (len(db_part), len(test_part)) == (8, 2)

    def test_every_group_is_split(self):
        """Two classes over two coarse protocols, five flows each: 4/1 per group."""
        flows = [
            make_flow(f"{label}-{proto}-{i}", label=label, proto=proto)
            for label, proto in itertools.product("AB", ("TCP|HTTP", "UDP|DNS"))
            for i in range(5)
        ]
        db_part, test_part = stratified_split(flows, SplitSpec(), seed=3)
        assert len(db_part) == 16
        assert len(test_part) == 4
        assert {(f.label, f.proto_coarse) for f in test_part} == {
            ("A", "TCP"), ("A", "UDP"), ("B", "TCP"), ("B", "UDP")
        }

    def test_deterministic_and_order_preserving(self):
        """The same seed reproduces the split; partitions keep input order."""
        flows = [make_flow(f"f{i:02d}", label="AB"[i % 2]) for i in range(20)]
        first = stratified_split(flows, SplitSpec(db_fraction=0.5), seed=11)
        second = stratified_split(flows, SplitSpec(db_fraction=0.5), seed=11)
        assert first == second
        for part in first:
            ids = [f.flow_id for f in part]
            assert ids == sorted(ids)

    def test_partitions_are_disjoint_and_complete(self):
        """Every flow lands in exactly one partition."""
        flows = [make_flow(f"f{i}", label="ABC"[i % 3]) for i in range(17)]
        db_part, test_part = stratified_split(flows, SplitSpec(db_fraction=0.7), seed=2)
        db_ids = {f.flow_id for f in db_part}
        test_ids = {f.flow_id for f in test_part}
        assert not db_ids & test_ids
        assert db_ids | test_ids == {f.flow_id for f in flows}

    def test_singleton_group_goes_to_database(self):
        """A group with one flow cannot be tested."""
        flows = [make_flow("lonely", label="Z")] + [make_flow(f"f{i}") for i in range(4)]
        db_part, test_part = stratified_split(flows, SplitSpec(), seed=0)
        assert "lonely" in {f.flow_id for f in db_part}

    def test_two_flow_group(self):
        """Clamping leaves at least one flow on each side."""
        db_part, test_part = stratified_split([make_flow("a"), make_flow("b")], SplitSpec(db_fraction=0.99), 0)
        assert len(db_part) == len(test_part) == 1

    def test_unlabeled_flow(self):
        """Splitting requires labels."""
        with pytest.raises(MetricsValidationError):
            stratified_split([make_flow("a", label=None)], SplitSpec(), 0)

    def test_invalid_fraction(self):
        """The database fraction must lie strictly between 0 and 1."""
        with pytest.raises(ConfigError):
            SplitSpec(db_fraction=1.0)


class TestEvaluateKnown:
    """Test cases for closed-set metrics."""

    def test_perfect(self):
        """All-correct predictions score 1.0."""
        pairs = repeat("A", "A", 4) + repeat("B", "B", 3)
        report = evaluate_known(pairs)
        assert (report.macro_pre, report.macro_rcl, report.macro_f1) == (1.0, 1.0, 1.0)

    def test_everything_one_class(self):
        """Predicting one class for everything recalls a third on three balanced classes."""
        pairs = repeat("A", "A", 5) + repeat("B", "A", 5) + repeat("C", "A", 5)
        report = evaluate_known(pairs)
        assert report.macro_rcl == pytest.approx(1 / 3)
        assert report.per_class["A"].precision == pytest.approx(1 / 3)
        assert report.macro_f1 == pytest.approx(1 / 6)

    def test_hand_computed(self):
        """Per-class and macro values of the small fixture."""
        report = evaluate_known(known_fixture())
        assert report.per_class["A"].f1 == pytest.approx(6 / 7)
        assert report.per_class["B"].precision == pytest.approx(2 / 3)
        assert report.per_class["C"].recall == pytest.approx(0.5)
        assert report.macro_f1 == pytest.approx(244 / 315)
        assert report.confusion_labels == ["A", "B", "C", "novel"]
        assert report.confusion[2] == [0, 0, 1, 1]

    def test_matches_brute_force(self):
        """Random predictions agree with the counting definition."""
        rng = np.random.default_rng(4)
        labels = ["A", "B", "C", "D"]
        pairs = [(labels[t], (labels + ["novel"])[p]) for t, p in zip(rng.integers(0, 4, 200), rng.integers(0, 5, 200))]
        report = evaluate_known(pairs, labels)
        expected = brute_force_macro(pairs, labels)
        assert (report.macro_pre, report.macro_rcl, report.macro_f1) == pytest.approx(expected, abs=1e-12)

    def test_empty(self):
        """Nothing to score is an error."""
        with pytest.raises(MetricsValidationError):
            evaluate_known([])

    def test_prediction_outside_label_space(self):
        """Unknown predicted labels are rejected."""
        with pytest.raises(MetricsValidationError):
            evaluate_known([("A", "A"), ("B", "Zeus")])

    def test_class_without_test_samples(self):
        """A database class that never occurs among the test flows does not lower the average."""
        flows = [make_flow(f"a{i}", label="A") for i in range(5)] + [
            make_flow("x-http", label="X", proto="TCP|HTTP"),
            make_flow("x-dns", label="X", proto="UDP|DNS"),
        ]
        db_part, test_part = stratified_split(flows, SplitSpec(), seed=0)
        assert sorted({f.label for f in db_part}) == ["A", "X"]
        assert {f.label for f in test_part} == {"A"}

        report = evaluate_known([(f.label, f.label) for f in test_part], ["A", "X"])
        assert (report.macro_pre, report.macro_rcl, report.macro_f1) == (1.0, 1.0, 1.0)
        assert report.per_class["X"].support == 0

    def test_unsupported_class_still_receives_predictions(self):
        """Predictions of a class with no samples count against precision of that class only."""
        report = evaluate_known([("A", "A"), ("A", "X"), ("B", "B")], ["A", "B", "X"])
        assert report.macro_rcl == pytest.approx(0.75)
        assert report.macro_pre == pytest.approx(1.0)
        assert report.per_class["X"].precision == 0.0

    def test_error_label_counts_as_wrong(self):
        """Strictly scored failures get their own confusion column."""
        report = evaluate_known([("A", "A"), ("A", ERROR_LABEL), ("B", "B")])
        assert report.confusion_labels[-1] == ERROR_LABEL
        assert report.per_class["A"].recall == 0.5


class TestEvaluateOpenset:
    """Test cases for open-set metrics."""

    def test_hand_computed(self):
        """The 20-sample fixture."""
        report = evaluate_openset(openset_fixture())
        assert report.pre_k == pytest.approx(53 / 70)
        assert report.rcl_k == pytest.approx(0.75)
        assert report.pre_n == pytest.approx(0.75)
        assert report.rcl_n == pytest.approx(0.75)
        assert report.aks == pytest.approx(0.75)
        assert report.aus == pytest.approx(0.75)
        assert report.na == pytest.approx(0.75)
        assert report.confusion == [[5, 0, 1], [1, 4, 1], [1, 1, 6]]

    def test_everything_novel(self):
        """Calling everything novel balances to an NA of one half."""
        pairs = repeat("A", "novel", 4) + repeat("B", "novel", 4) + repeat("novel", "novel", 3)
        report = evaluate_openset(pairs)
        assert report.aks == 0.0
        assert report.aus == 1.0
        assert report.na == 0.5
        assert report.rcl_n == 1.0

    def test_na_is_balanced_not_pooled(self):
        """A large known stratum does not dominate NA."""
        pairs = repeat("A", "A", 90) + repeat("novel", "A", 10)
        report = evaluate_openset(pairs)
        assert report.na == pytest.approx(0.5)

    def test_known_class_without_samples(self):
        """PRE-K and RCL-K average only the known classes present among the true labels."""
        pairs = repeat("A", "A", 3) + repeat("novel", "novel", 2)
        report = evaluate_openset(pairs, ["A", "B"])
        assert (report.pre_k, report.rcl_k, report.macro_f1) == (1.0, 1.0, 1.0)
        assert report.per_class["B"].support == 0

    def test_needs_both_strata(self):
        """Open-set scoring needs known and novel samples."""
        with pytest.raises(MetricsValidationError):
            evaluate_openset(repeat("A", "A", 3))
        with pytest.raises(MetricsValidationError):
            evaluate_openset(repeat("novel", "novel", 3))


class TestMeanMetrics:
    """Test cases for aggregation over seeds."""

    def test_mean_over_seeds(self):
        """Each scalar metric is averaged over the per-seed reports."""
        perfect = evaluate_known(repeat("A", "A", 2) + repeat("B", "B", 2))
        half = evaluate_known(repeat("A", "A", 2) + repeat("B", "A", 2))
        mean = mean_metrics([perfect, half])
        assert mean["macro_rcl"] == pytest.approx(0.75)
        assert mean["macro_pre"] == pytest.approx((1.0 + 0.25) / 2)


class _GarbageClient:
    identity = "garbage"

    def generate(self, prompt):
        return "I am not sure what this is."


class TestRunOnFlows:
    """Test cases for experiment runs on small synthetic data."""

    @pytest.fixture(scope="class")
    def data(self):
        return generate_synthetic_openset(SyntheticSpec(classes=2, flows=10, novel=1, seed=1))

    def test_report_shape(self, data):
        """One report per seed, means and a readable text block."""
        known, novel = data
        report = run_on_flows(known, novel, "openset", Ablation.FULL, EngineConfig(),
                              SplitSpec(seeds=(0, 1)))
        assert len(report.per_seed) == 2
        assert set(report.mean) >= {"macro_f1", "na", "rcl_n"}
        assert "== mean over 2 seeds ==" in format_experiment_report(report)
        assert set(experiment_to_dict(report)["seeds"]) == {"0", "1"}

    def test_parse_failures_excluded_by_default(self, data):
        """Unparseable verdicts are dropped and counted; nothing left to score is an error."""
        known, _ = data
        with pytest.raises(MetricsValidationError):
            run_on_flows(known, [], "known", Ablation.FULL, EngineConfig(), SplitSpec(seeds=(0,)),
                         client=_GarbageClient())

    def test_parse_failures_scored_as_wrong(self, data):
        """Strict scoring counts every failure as a miss."""
        known, _ = data
        report = run_on_flows(known, [], "known", Ablation.FULL, EngineConfig(), SplitSpec(seeds=(0,)),
                              client=_GarbageClient(), errors_as_wrong=True)
        assert report.mean["macro_f1"] == 0.0
        assert report.per_seed[0].confusion_labels[-1] == ERROR_LABEL

    def test_openset_without_novel(self, data):
        """Open-set runs need held-out flows."""
        known, _ = data
        with pytest.raises(MetricsValidationError):
            run_on_flows(known, [], "openset", Ablation.FULL, EngineConfig(), SplitSpec(seeds=(0,)))

    def test_unknown_mode(self, data):
        """Only known and openset modes exist."""
        known, novel = data
        with pytest.raises(ConfigError):
            run_on_flows(known, novel, "closed", Ablation.FULL, EngineConfig())


class TestRunExperiment:
    """Test cases for experiments started from a dataset name."""

    SYNTHETIC = "synthetic:classes=2,flows=10,novel=1,seed=1"

    def test_synthetic_dataset(self):
        """A synthetic dataset string runs an open-set experiment per seed."""
        report = run_experiment(self.SYNTHETIC, "openset", Ablation.FULL, EngineConfig(),
                                SplitSpec(seeds=(0, 1)), RandomizationPolicy(seed=0))
        assert report.mode == "openset"
        assert report.seeds == [0, 1]
        assert {"na", "rcl_n", "pre_k"} <= set(report.mean)

    def test_same_as_loaded_flows(self):
        """Running on the dataset string equals running on the generated flows."""
        known, novel = generate_synthetic_openset(parse_synthetic_spec(self.SYNTHETIC))
        split = SplitSpec(seeds=(0,))
        direct = run_on_flows(known, novel, "openset", Ablation.FULL, EngineConfig(), split)
        named = run_experiment(self.SYNTHETIC, "openset", Ablation.FULL, EngineConfig(), split,
                               RandomizationPolicy.disabled())
        assert named.mean == direct.mean

    def test_record_file_with_novel_classes(self, tmp_path):
        """Classes named as novel in a record file are held out of the database."""
        known, novel = generate_synthetic_openset(parse_synthetic_spec(self.SYNTHETIC))
        path = tmp_path / "flows.jsonl"
        write_dataset(path, known + novel)
        split = SplitSpec(seeds=(0,))

        from_file = run_experiment(path, "openset", Ablation.FULL, EngineConfig(), split,
                                   RandomizationPolicy.disabled(), novel_classes=["class2"])
        generated = run_experiment(self.SYNTHETIC, "openset", Ablation.FULL, EngineConfig(), split,
                                   RandomizationPolicy.disabled())
        assert from_file.mean == generated.mean
        assert "class2" not in from_file.per_seed[0].per_class


if __name__ == '__main__':
    pytest.main([__file__])
