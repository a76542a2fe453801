"""Dataset ingestion, cross-validation, metrics and threshold sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import HELDOUT_START, BackboneWeights, embed, encode_layer
from .decoders import DecoderBank, decode, decoder_logits
from .early_exit import ExitConfig, predict_early_exit
from .errors import CapacityError, ConfigurationError, IngestionError, MetricError
from .prior import PriorConfig, SyntheticTask, sample_task

log = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "null", "none", "?"}
SWEEP_COLUMNS = ("tau", "mean_auc", "std_auc", "mean_accuracy", "mean_exit_layer",
                 "mean_elapsed_s", "runtime_delta_s")
REPORT_COLUMNS = ("table", "dataset") + SWEEP_COLUMNS + ("speedup", "auc_decrease_pct")
DEFAULT_TAUS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class TabularDataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    dropped_rows: int = 0
    feature_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]


def _parse_float(text: str):
    try:
        return float(text)
    except ValueError:
        return None


def load_csv(path, label_column: str, name: str | None = None) -> TabularDataset:
    """Read a headered CSV into a dataset.

    Non-numeric feature columns and the label column are integer-encoded in
    order of first appearance. Rows with a missing cell are dropped and
    counted in ``dropped_rows``.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise IngestionError(f"{path}: cannot read CSV ({exc})") from exc
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise IngestionError(f"{path}: label column {label_column!r} not in header {header}")
    li = header.index(label_column)

    kept, dropped = [], 0
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestionError(
                f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        cells = [c.strip() for c in row]
        if any(c.lower() in MISSING for c in cells):
            dropped += 1
            continue
        kept.append(cells)
    if len(kept) < 2:
        raise IngestionError(f"{path}: need at least 2 complete rows, found {len(kept)}")

    label_codes: dict[str, int] = {}
    labels = np.array([label_codes.setdefault(r[li], len(label_codes)) for r in kept])
    if len(label_codes) < 2:
        raise IngestionError(f"{path}: label column {label_column!r} has a single class")

    columns, names = [], []
    for j, col in enumerate(header):
        if j == li:
            continue
        raw = [r[j] for r in kept]
        values = [_parse_float(v) for v in raw]
        if all(v is not None for v in values):
            columns.append(np.array(values, dtype=np.float64))
        else:
            codes: dict[str, int] = {}
            columns.append(np.array([codes.setdefault(v, len(codes)) for v in raw], dtype=np.float64))
        names.append(col)
    features = np.column_stack(columns) if columns else np.zeros((len(kept), 0))
    if not np.all(np.isfinite(features)):
        raise IngestionError(f"{path}: non-finite feature values")
    if dropped:
        log.info("%s: dropped %d row(s) with missing values", path, dropped)
    return TabularDataset(name or path.stem, features, labels, len(label_codes), dropped,
                          names, list(label_codes))


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; the first ``n % k`` test blocks get one extra row."""
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ConfigurationError(f"cannot split {n} rows into {k} folds")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    bounds = np.cumsum([0] + sizes)
    splits = []
    for i in range(k):
        test = np.sort(perm[bounds[i]:bounds[i + 1]])
        train = np.sort(np.concatenate([perm[:bounds[i]], perm[bounds[i + 1]:]]))
        splits.append((train, test))
    return splits


def roc_auc(scores, labels) -> float:
    """Rank-sum AUC: P(score of a positive > score of a negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both positive and negative labels")
    if np.isnan(s).any():
        raise MetricError("ROC AUC scores contain NaN")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    avg_rank = np.cumsum(counts) - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse.reshape(-1)][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Positive-class AUC for two columns, macro one-vs-rest otherwise.

    Classes that are absent (or the only class) in ``labels`` are skipped.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], labels == 1)
    aucs = [roc_auc(probs[:, c], labels == c) for c in range(probs.shape[1])
            if 0 < np.sum(labels == c) < labels.size]
    if not aucs:
        raise MetricError("no class has both positive and negative examples")
    return float(np.mean(aucs))


@dataclass
class FoldResult:
    fold: int
    tau: float
    auc: float
    accuracy: float
    exit_layer: int
    elapsed: float
    entropy_trace: list[float]


@dataclass
class SweepRow:
    tau: float
    mean_auc: float
    std_auc: float
    mean_accuracy: float
    mean_exit_layer: float
    mean_elapsed_s: float
    runtime_delta_s: float

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in SWEEP_COLUMNS)


@dataclass
class SweepReport:
    dataset: str
    rows: list[SweepRow]
    folds: int
    seed: int
    fold_results: list[FoldResult] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def row(self, tau: float) -> SweepRow:
        for r in self.rows:
            if r.tau == tau:
                return r
        raise KeyError(tau)


def _zscore(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def fold_task(ds: TabularDataset, train_idx, test_idx, max_context: int | None,
              seed: int, fold: int) -> SyntheticTask:
    """Z-scored train/test split, context subsampled to ``max_context`` rows."""
    if max_context is not None and len(train_idx) > max_context:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, fold])))
        train_idx = np.sort(rng.choice(train_idx, size=max_context, replace=False))
        log.info("%s fold %d: context subsampled to %d rows", ds.name, fold, max_context)
    x_tr, x_te = _zscore(ds.features[train_idx], ds.features[test_idx])
    return SyntheticTask(x_tr, ds.labels[train_idx], x_te, ds.labels[test_idx], ds.n_classes)


def _nan_stat(fn, values) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(fn(v)) if v.size else math.nan


def evaluate_dataset(ds: TabularDataset, backbone: BackboneWeights, bank: DecoderBank,
                     taus=DEFAULT_TAUS, folds: int = 10, seed: int = 0, min_layer: int = 1,
                     normalize_entropy: bool = False, max_context: int | None = 1024) -> SweepReport:
    """Cross-validated threshold sweep.

    Runs are executed serially, all thresholds back to back within a fold, so
    timings of different thresholds see the same machine state. AUC of a fold
    whose test labels hold a single class is NaN and left out of the means.
    """
    taus = sorted({float(t) for t in taus} | {0.0})
    if ds.n_rows < 2 * ds.n_classes:
        raise ConfigurationError(
            f"{ds.name}: {ds.n_rows} rows is fewer than twice the {ds.n_classes} classes")
    results: list[FoldResult] = []
    skipped: list[tuple[int, str]] = []
    for f, (tr, te) in enumerate(kfold_split(ds.n_rows, folds, seed)):
        task = fold_task(ds, tr, te, max_context, seed, f)
        for tau in taus:
            cfg = ExitConfig(tau=tau, min_layer=min_layer, normalize_entropy=normalize_entropy)
            try:
                rep = predict_early_exit(task, backbone, bank, cfg)
            except CapacityError as exc:
                skipped.append((f, str(exc)))
                log.warning("%s fold %d skipped: %s", ds.name, f, exc)
                break
            try:
                auc = multiclass_auc(rep.probs, task.y_test)
            except MetricError:
                auc = math.nan
            acc = float(np.mean(rep.predictions == task.y_test))
            results.append(FoldResult(f, tau, auc, acc, rep.exit_layer, rep.elapsed,
                                      rep.entropy_trace))

    rows = []
    for tau in taus:
        rs = [r for r in results if r.tau == tau]
        rows.append(SweepRow(
            tau=tau,
            mean_auc=_nan_stat(np.mean, [r.auc for r in rs]),
            std_auc=_nan_stat(np.std, [r.auc for r in rs]),
            mean_accuracy=_nan_stat(np.mean, [r.accuracy for r in rs]),
            mean_exit_layer=_nan_stat(np.mean, [r.exit_layer for r in rs]),
            mean_elapsed_s=_nan_stat(np.mean, [r.elapsed for r in rs]),
            runtime_delta_s=math.nan,
        ))
    base = rows[0].mean_elapsed_s
    for r in rows:
        r.runtime_delta_s = r.mean_elapsed_s - base
    return SweepReport(ds.name, rows, folds, seed, results, skipped)


# --- output --------------------------------------------------------------------

def write_sweep_csv(report: SweepReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in report.rows:
            w.writerow([repr(float(v)) for v in r.values()])
    return path


def read_sweep_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _aggregate(reports: list[SweepReport]) -> list[SweepRow]:
    taus = sorted({r.tau for rep in reports for r in rep.rows})
    out = []
    for tau in taus:
        rows = [rep.row(tau) for rep in reports if any(r.tau == tau for r in rep.rows)]
        out.append(SweepRow(tau, *(_nan_stat(np.mean, [getattr(r, c) for r in rows])
                                   for c in SWEEP_COLUMNS[1:])))
    return out


def _tradeoff(reports: list[SweepReport]) -> list[tuple[float, float, float]]:
    """(tau, speedup factor, relative AUC decrease in %) averaged over datasets."""
    taus = sorted({r.tau for rep in reports for r in rep.rows})
    out = []
    for tau in taus:
        speed, drop = [], []
        for rep in reports:
            try:
                base, row = rep.row(0.0), rep.row(tau)
            except KeyError:
                continue
            speed.append(base.mean_elapsed_s / row.mean_elapsed_s if row.mean_elapsed_s > 0 else math.nan)
            drop.append(100.0 * (base.mean_auc - row.mean_auc) / base.mean_auc
                        if base.mean_auc else math.nan)
        out.append((tau, _nan_stat(np.mean, speed), _nan_stat(np.mean, drop)))
    return out


def _fmt(x: float, spec: str = ".3f") -> str:
    return "nan" if math.isnan(x) else format(x, spec)


def _text_table(title: str, rows: list[SweepRow]) -> str:
    lines = [title,
             f"{'tau':>6}  {'ROC AUC':>15}  {'Runtime delta (s)':>17}  {'Avg. exit layer':>15}"
             f"  {'accuracy':>8}  {'elapsed (s)':>11}"]
    for r in rows:
        label = "base" if r.tau == 0 else f"{r.tau:g}"
        auc = f"{_fmt(r.mean_auc)} +- {_fmt(r.std_auc, '.2f')}"
        delta = "-" if r.tau == 0 else _fmt(r.runtime_delta_s, "+.4f")
        lines.append(f"{label:>6}  {auc:>15}  {delta:>17}  {_fmt(r.mean_exit_layer, '.1f'):>15}"
                     f"  {_fmt(r.mean_accuracy):>8}  {_fmt(r.mean_elapsed_s, '.4f'):>11}")
    return "\n".join(lines)


def render_report(reports: list[SweepReport], fmt: str = "text") -> str:
    """Per-dataset tables, the cross-dataset aggregate and the relative
    runtime/AUC tradeoff, as aligned text or as one CSV with a ``table`` column."""
    if not reports:
        raise ConfigurationError("render_report needs at least one report")
    agg = _aggregate(reports)
    trade = _tradeoff(reports)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for r in rep.rows:
                w.writerow(["dataset", rep.dataset] + [repr(float(v)) for v in r.values()] + ["", ""])
        for r in agg:
            w.writerow(["aggregate", ""] + [repr(float(v)) for v in r.values()] + ["", ""])
        for tau, speed, drop in trade:
            w.writerow(["tradeoff", "", repr(tau)] + [""] * 6 + [repr(speed), repr(drop)])
        return buf.getvalue()
    if fmt != "text":
        raise ConfigurationError(f"unknown report format {fmt!r}")
    parts = []
    for rep in reports:
        title = f"== {rep.dataset} ({rep.folds}-fold CV, seed {rep.seed})"
        if rep.skipped:
            title += f"  [{len(rep.skipped)} fold(s) skipped]"
        parts.append(_text_table(title, rep.rows))
    parts.append(_text_table(f"== aggregate over {len(reports)} dataset(s)", agg))
    lines = ["== relative tradeoff (vs. full forward pass)",
             f"{'tau':>6}  {'speedup':>8}  {'AUC decrease %':>14}"]
    for tau, speed, drop in trade:
        if tau == 0:
            continue
        lines.append(f"{tau:>6g}  {'x' + _fmt(speed, '.2f'):>8}  {_fmt(drop, '.2f'):>14}")
    parts.append("\n".join(lines))
    return "\n\n".join(parts) + "\n"


def read_report_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({k: (v if k in ("table", "dataset") else (float(v) if v != "" else None))
                    for k, v in row.items()})
    return out


# --- per-layer quality on held-out prior tasks -----------------------------------

@dataclass
class LayerProfileRow:
    layer: int
    accuracy: float
    auc: float
    routed_accuracy: float
    routed_auc: float
    majority_accuracy: float


def layer_profile(backbone: BackboneWeights, bank: DecoderBank, prior: PriorConfig,
                  n_tasks: int = 100, start: int | None = None) -> list[LayerProfileRow]:
    """Per-layer accuracy/AUC on held-out prior tasks, once with each layer's
    own decoder and once routing the same activations through the final one."""
    start = HELDOUT_START if start is None else start
    n_layers = backbone.config.n_layers
    final = bank[n_layers]
    acc = np.zeros((n_layers, n_tasks))
    auc = np.zeros((n_layers, n_tasks))
    r_acc = np.zeros((n_layers, n_tasks))
    r_auc = np.zeros((n_layers, n_tasks))
    majority = np.zeros(n_tasks)
    for t in range(n_tasks):
        task = sample_task(prior, start + t)
        majority[t] = np.mean(task.y_test == np.bincount(task.y_train).argmax())
        acts = embed(task, backbone)
        for i in range(1, n_layers + 1):
            acts = encode_layer(acts, i - 1, backbone)
            own = T.softmax(decode(acts, bank[i], task.n_test, task.n_classes)).data
            routed = T.softmax(
                decoder_logits(acts.tokens[acts.n_train:], final)[:, :task.n_classes]).data
            for probs, a_out, u_out in ((own, acc, auc), (routed, r_acc, r_auc)):
                a_out[i - 1, t] = np.mean(probs.argmax(1) == task.y_test)
                try:
                    u_out[i - 1, t] = multiclass_auc(probs, task.y_test)
                except MetricError:
                    u_out[i - 1, t] = math.nan
    return [LayerProfileRow(i + 1, float(acc[i].mean()), _nan_stat(np.mean, auc[i]),
                            float(r_acc[i].mean()), _nan_stat(np.mean, r_auc[i]),
                            float(majority.mean()))
            for i in range(n_layers)]


def render_layer_profile(rows: list[LayerProfileRow]) -> str:
    lines = [f"{'layer':>5}  {'acc':>6}  {'auc':>6}  {'acc(final dec)':>14}  "
             f"{'auc(final dec)':>14}  {'majority':>8}"]
    for r in rows:
        lines.append(f"{r.layer:>5}  {r.accuracy:>6.3f}  {_fmt(r.auc):>6}  "
                     f"{r.routed_accuracy:>14.3f}  {_fmt(r.routed_auc):>14}  "
                     f"{r.majority_accuracy:>8.3f}")
    return "\n".join(lines)
