import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TINY, random_backbone, random_bank
from tabexit.cli import write_task_csv
from tabexit.errors import ConfigurationError, IngestionError, MetricError
from tabexit.evaluation import (
    DEFAULT_TAUS, SWEEP_COLUMNS, SweepReport, SweepRow, TabularDataset, evaluate_dataset,
    kfold_split, load_csv, multiclass_auc, read_report_csv, read_sweep_csv, render_report,
    roc_auc, write_sweep_csv,
)
from tabexit.prior import PriorConfig, sample_task


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def synthetic_dataset(seed=0, n=60, f=3, k=2, name="synth"):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, f))
    y = (x[:, 0] + 0.5 * rng.normal(size=n) > 0).astype(int) if k == 2 else rng.integers(0, k, n)
    return TabularDataset(name, x, y, k)


class TestLoadCsv:
    def test_first_appearance_labels(self, tmp_path):
        ds = load_csv(write(tmp_path, "x,label\n1,b\n2,a\n3,b\n"), "label")
        assert ds.labels.tolist() == [0, 1, 0]
        assert ds.n_classes == 2 and ds.class_names == ["b", "a"]
        assert ds.features.tolist() == [[1.0], [2.0], [3.0]]

    def test_missing_cell_dropped(self, tmp_path):
        ds = load_csv(write(tmp_path, "x,y,label\n1,2,a\n3,,b\n4,5,a\n6,7,b\n"), "label")
        assert ds.n_rows == 3 and ds.dropped_rows == 1

    def test_categorical_features_encoded(self, tmp_path):
        ds = load_csv(write(tmp_path, "c,x,label\nred,1,0\nblue,2,1\nred,3,1\n"), "label")
        assert ds.features[:, 0].tolist() == [0.0, 1.0, 0.0]
        assert ds.feature_names == ["c", "x"]

    def test_round_trip_prior_dump(self, tmp_path):
        task = sample_task(PriorConfig(seed=2), 5)
        path = tmp_path / "task.csv"
        write_task_csv(task, path)
        ds = load_csv(path, "label")
        x = np.vstack([task.x_train, task.x_test])
        y = np.concatenate([task.y_train, task.y_test])
        assert np.max(np.abs(ds.features - x)) <= 1e-12
        # labels are re-encoded by first appearance; the mapping must be a bijection
        mapping = dict(zip(ds.labels.tolist(), y.tolist()))
        assert [mapping[v] for v in ds.labels.tolist()] == y.tolist()
        assert len(set(mapping.values())) == len(mapping)

    @pytest.mark.parametrize("text,match", [
        ("x,y\n1,2\n3,4\n", "label column"),
        ("x,label\n1,a\n2,a\n", "single class"),
        ("x,label\n1,a\n", "at least 2"),
        ("x,label\n1,a\n2\n", ":3:"),
        ("", "empty"),
    ])
    def test_ingestion_errors(self, tmp_path, text, match):
        with pytest.raises(IngestionError, match=match):
            load_csv(write(tmp_path, text), "label")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(tmp_path / "nope.csv", "label")


class TestKFold:
    def test_singletons(self):
        splits = kfold_split(10, 10, 0)
        assert sorted(int(te[0]) for _, te in splits) == list(range(10))
        assert all(len(te) == 1 and len(tr) == 9 for tr, te in splits)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 300), st.integers(2, 20), st.integers(0, 2**32))
    def test_partition(self, n, k, seed):
        if n < k:
            with pytest.raises(ConfigurationError):
                kfold_split(n, k, seed)
            return
        splits = kfold_split(n, k, seed)
        tests = np.concatenate([te for _, te in splits])
        assert sorted(tests.tolist()) == list(range(n))
        for tr, te in splits:
            assert len(te) in (n // k, -(-n // k))
            assert set(tr.tolist()) | set(te.tolist()) == set(range(n))
            assert not set(tr.tolist()) & set(te.tolist())

    def test_deterministic(self):
        a, b = kfold_split(37, 5, 9), kfold_split(37, 5, 9)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
        assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, kfold_split(37, 5, 10)))

    def test_one_fold_rejected(self):
        with pytest.raises(ConfigurationError):
            kfold_split(10, 1, 0)


class TestAuc:
    def test_perfect(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_inverted(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_ties_against_pairwise_oracle(self):
        s, y = [0.5, 0.5, 0.5, 0.2], [1, 0, 1, 0]
        # pairs: two ties at 0.5 count 1/2 each, two wins over 0.2 -> 3/4
        assert roc_auc(s, y) == pairwise_auc(s, y) == 0.75

    def test_single_class(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 200).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 6), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n))))
    def test_equals_pairwise_oracle(self, data):
        scores, labels = data
        if all(labels) or not any(labels):
            return
        s = np.array(scores) / 6.0
        assert roc_auc(s, labels) == pairwise_auc(s.tolist(), labels)

    def test_macro_one_vs_rest(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=40)
        y = rng.integers(0, 3, 40)
        expected = np.mean([pairwise_auc(p[:, c].tolist(), (y == c).tolist()) for c in range(3)])
        assert abs(multiclass_auc(p, y) - expected) < 1e-15

    def test_binary_uses_positive_column(self):
        p = np.array([[0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        assert multiclass_auc(p, np.array([1, 0, 0])) == roc_auc(p[:, 1], [1, 0, 0])


@pytest.fixture(scope="module")
def model():
    backbone = random_backbone(scale=0.4)
    return backbone, random_bank(backbone, scale=0.6)


class TestEvaluateDataset:
    def test_baseline_only(self, model):
        report = evaluate_dataset(synthetic_dataset(), *model, taus=[0.0], folds=5)
        assert [r.tau for r in report.rows] == [0.0]
        assert all(r.exit_layer == TINY.n_layers for r in report.fold_results)
        assert len(report.fold_results) == 5

    def test_baseline_added_and_rows_in_range(self, model):
        report = evaluate_dataset(synthetic_dataset(), *model, taus=[0.3, 0.1], folds=4)
        assert [r.tau for r in report.rows] == [0.0, 0.1, 0.3]
        for r in report.rows:
            assert 1 <= r.mean_exit_layer <= TINY.n_layers
        assert report.rows[0].runtime_delta_s == 0.0

    def test_monotone_exit_layers(self, model):
        for seed in range(3):
            ds = synthetic_dataset(seed, k=3 if seed == 2 else 2)
            taus = np.linspace(0, 1.2, 13)
            report = evaluate_dataset(ds, *model, taus=taus, folds=5, seed=seed)
            layers = [r.mean_exit_layer for r in report.rows]
            assert all(a >= b for a, b in zip(layers, layers[1:]))
            for f in range(5):
                per_fold = [r.exit_layer for r in report.fold_results if r.fold == f]
                assert all(a >= b for a, b in zip(per_fold, per_fold[1:]))

    def test_predictions_are_truncated_baseline(self, model):
        # the entropy trace at any tau is a prefix of the tau=0 trace
        report = evaluate_dataset(synthetic_dataset(), *model, taus=[0.2, 0.5], folds=3)
        for f in range(3):
            rs = [r for r in report.fold_results if r.fold == f]
            full = rs[0].entropy_trace
            for r in rs[1:]:
                assert r.entropy_trace == full[:r.exit_layer]

    def test_deterministic_except_timing(self, model):
        ds = synthetic_dataset(4)
        a = evaluate_dataset(ds, *model, taus=DEFAULT_TAUS, folds=5, seed=3)
        b = evaluate_dataset(ds, *model, taus=DEFAULT_TAUS, folds=5, seed=3)
        for ra, rb in zip(a.rows, b.rows):
            assert (ra.tau, ra.mean_auc, ra.std_auc, ra.mean_accuracy, ra.mean_exit_layer) == (
                rb.tau, rb.mean_auc, rb.std_auc, rb.mean_accuracy, rb.mean_exit_layer)

    def test_context_subsampling(self, model):
        report = evaluate_dataset(synthetic_dataset(n=80), *model, taus=[0.0], folds=4,
                                  max_context=20)
        assert len(report.fold_results) == 4

    def test_capacity_violation_skips_folds(self, model):
        ds = synthetic_dataset(f=6)
        report = evaluate_dataset(ds, *model, taus=[0.0], folds=3)
        assert len(report.skipped) == 3 and not report.fold_results
        assert "features" in report.skipped[0][1]

    def test_too_few_rows(self, model):
        with pytest.raises(ConfigurationError):
            evaluate_dataset(synthetic_dataset(n=3), *model, folds=2)


def make_report(name, rows):
    return SweepReport(name, [SweepRow(*r) for r in rows], 10, 0)


class TestReport:
    one = make_report("a", [(0.0, 0.9, 0.01, 0.8, 6.0, 0.2, 0.0)])
    two = make_report("b", [(0.0, 0.8, 0.02, 0.7, 6.0, 0.4, 0.0),
                            (0.1, 0.7, 0.03, 0.6, 3.0, 0.2, -0.2)])

    def test_single_dataset_text(self):
        text = render_report([self.one])
        assert "== a" in text and "== aggregate" in text
        assert "base" in text

    def test_aggregate_is_mean(self):
        rows = read_report_csv(render_report([self.one, self.two], "csv"))
        agg = {r["tau"]: r for r in rows if r["table"] == "aggregate"}
        assert agg[0.0]["mean_auc"] == pytest.approx((0.9 + 0.8) / 2, abs=1e-15)
        assert agg[0.0]["mean_elapsed_s"] == pytest.approx(0.3, abs=1e-15)
        assert agg[0.1]["mean_auc"] == 0.7

    def test_single_dataset_aggregate_equals_row(self):
        rows = read_report_csv(render_report([self.two], "csv"))
        data = [r for r in rows if r["table"] == "dataset"]
        agg = [r for r in rows if r["table"] == "aggregate"]
        for d, a in zip(data, agg):
            for c in SWEEP_COLUMNS:
                assert d[c] == a[c]

    def test_tradeoff(self):
        rows = read_report_csv(render_report([self.two], "csv"))
        trade = {r["tau"]: r for r in rows if r["table"] == "tradeoff"}
        assert trade[0.1]["speedup"] == pytest.approx(2.0)
        assert trade[0.1]["auc_decrease_pct"] == pytest.approx(12.5)

    def test_csv_round_trip(self):
        rows = read_report_csv(render_report([self.one, self.two], "csv"))
        data = [r for r in rows if r["table"] == "dataset"]
        expected = [r for rep in (self.one, self.two) for r in rep.rows]
        for parsed, row in zip(data, expected):
            for c, v in zip(SWEEP_COLUMNS, row.values()):
                assert abs(parsed[c] - v) <= 1e-9

    def test_sweep_csv_round_trip(self, tmp_path):
        path = write_sweep_csv(self.two, tmp_path / "b.sweep.csv")
        assert path.read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)
        for parsed, row in zip(read_sweep_csv(path), self.two.rows):
            assert tuple(parsed[c] for c in SWEEP_COLUMNS) == row.values()

    def test_nan_rendered(self):
        rep = make_report("c", [(0.0, math.nan, math.nan, 0.5, 6.0, 0.1, 0.0)])
        assert "nan" in render_report([rep])

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            render_report([])
        with pytest.raises(ConfigurationError):
            render_report([self.one], "html")
