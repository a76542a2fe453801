"""Command-line entry point: ``tabexit <subcommand>``.

Subcommands: ``prior-sample``, ``train``, ``infer``, ``sweep``. Exit codes:
0 success, 2 configuration error, 3 ingestion error, 4 training/numeric
error, 5 partial sweep failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import train_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, write_provenance
from .decoders import train_bank
from .early_exit import ExitConfig, predict_early_exit
from .errors import (
    CapacityError, CheckpointError, ConfigurationError, ContractError, IngestionError,
    NumericInputError, TrainingError,
)
from .evaluation import (
    evaluate_dataset, fold_task, layer_profile, load_csv, render_layer_profile, render_report,
    write_sweep_csv,
)
from .prior import sample_task

log = logging.getLogger("tabexit")

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5
CHECKPOINT_NAME = "model.ckpt"


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    paths, ev, ex = cfg.paths, cfg.eval, cfg.exit
    if getattr(args, "out", None):
        paths = replace(paths, out_dir=args.out)
    if getattr(args, "checkpoint", None):
        paths = replace(paths, checkpoint=args.checkpoint)
    if getattr(args, "manifest", None):
        paths = replace(paths, manifest=args.manifest)
    if getattr(args, "folds", None) is not None:
        ev = replace(ev, folds=args.folds)
    taus = getattr(args, "tau", None)
    if taus:
        if args.command == "sweep":
            ev = replace(ev, taus=tuple(taus))
        else:
            ex = replace(ex, tau=taus[-1])
    cfg = replace(cfg, paths=paths, eval=ev, exit=ex)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.paths.out_dir:
        raise ConfigurationError("an output directory is required (--out DIR)")
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_task_csv(task, path: Path) -> None:
    f = task.n_features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(f)] + ["label"])
        for x, y in ((task.x_train, task.y_train), (task.x_test, task.y_test)):
            for row, label in zip(x, y):
                w.writerow([repr(float(v)) for v in row] + [int(label)])


def cmd_prior_sample(cfg: RunConfig, count: int) -> int:
    out = _out_dir(cfg)
    if count < 1:
        raise ConfigurationError("--count must be >= 1")
    write_provenance(cfg, out)
    ks, fs = Counter(), Counter()
    for i in range(count):
        task = sample_task(cfg.prior, i)
        write_task_csv(task, out / f"task_{i}.csv")
        ks[task.n_classes] += 1
        fs[task.n_features] += 1
    print(f"wrote {count} task(s) to {out}")
    print("classes:  " + "  ".join(f"K={k}: {ks[k]}" for k in sorted(ks)))
    print("features: " + "  ".join(f"f={f}: {fs[f]}" for f in sorted(fs)))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    write_provenance(cfg, out)
    t = cfg.train
    log.info("training backbone (%d steps)", t.backbone_steps)
    backbone = train_backbone(cfg.model, cfg.prior, t.backbone_steps, t.backbone_batch_size,
                              t.backbone_lr)
    log.info("training %d intermediate decoders", cfg.model.n_layers - 1)
    bank = train_bank(backbone, cfg.prior, t.decoder_epochs, t.decoder_steps_per_epoch,
                      t.decoder_batch_size, t.decoder_lr)
    path = save_checkpoint(out / CHECKPOINT_NAME, backbone, bank)
    print(f"checkpoint: {path}")
    print(f"held-out prior tasks: {t.heldout_tasks}")
    print(render_layer_profile(layer_profile(backbone, bank, cfg.prior, t.heldout_tasks)))
    return EXIT_OK


def _load_model(cfg: RunConfig):
    backbone, bank = load_checkpoint(cfg.paths.checkpoint)
    if bank is None:
        raise CheckpointError(f"{cfg.paths.checkpoint} holds no decoder bank; run 'train' first")
    return backbone, bank


def cmd_infer(cfg: RunConfig, dataset: str, label_column: str, trace_only: bool) -> int:
    backbone, bank = _load_model(cfg)
    ds = load_csv(dataset, label_column)
    rng = np.random.Generator(np.random.PCG64(cfg.eval.seed))
    perm = rng.permutation(ds.n_rows)
    n_test = max(1, int(round(0.2 * ds.n_rows)))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    task = fold_task(ds, train, test, cfg.eval.max_context, cfg.eval.seed, 0)
    exit_cfg = replace(cfg.exit, tau=0.0) if trace_only else cfg.exit
    rep = predict_early_exit(task, backbone, bank, exit_cfg)
    print("entropy_trace: " + " ".join(repr(h) for h in rep.entropy_trace))
    if trace_only:
        return EXIT_OK
    print(f"dataset: {ds.name} ({ds.n_rows} rows, {ds.dropped_rows} dropped, "
          f"{ds.n_classes} classes)")
    print(f"tau: {exit_cfg.tau!r}")
    print(f"exit_layer: {rep.exit_layer}")
    print(f"decode_count: {rep.decode_count}")
    print(f"elapsed_s: {rep.elapsed:.6f}")
    print(f"accuracy: {np.mean(rep.predictions == task.y_test):.4f}")
    print("predictions: " + " ".join(str(int(p)) for p in rep.predictions))
    return EXIT_OK


def read_manifest(path) -> list[tuple[str, Path, str]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or not {"name", "path", "label_column"} <= set(rows[0]):
        raise IngestionError(f"{path}: manifest needs columns name,path,label_column")
    out = []
    for r in rows:
        p = Path(r["path"].strip())
        out.append((r["name"].strip(), p if p.is_absolute() else path.parent / p,
                    r["label_column"].strip()))
    return out


def cmd_sweep(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    write_provenance(cfg, out)
    backbone, bank = _load_model(cfg)
    reports, failures = [], []
    for name, path, label in read_manifest(cfg.paths.manifest):
        try:
            ds = load_csv(path, label, name=name)
            rep = evaluate_dataset(ds, backbone, bank, cfg.eval.taus, cfg.eval.folds,
                                   cfg.eval.seed, cfg.exit.min_layer, cfg.exit.normalize_entropy,
                                   cfg.eval.max_context)
        except (IngestionError, ConfigurationError, CapacityError, ContractError) as exc:
            failures.append((name, str(exc)))
            log.error("dataset %s failed: %s", name, exc)
            continue
        if rep.skipped:
            failures.extend((name, f"fold {f}: {msg}") for f, msg in rep.skipped)
        write_sweep_csv(rep, out / f"{name}.sweep.csv")
        reports.append(rep)
    if reports:
        text = render_report(reports, "text")
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(render_report(reports, "csv"))
        print(text, end="")
    if failures:
        print(f"{len(failures)} failure(s):")
        for name, msg in failures:
            print(f"  {name}: {msg}")
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="U64", help="override every seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tabexit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prior-sample", parents=[common], help="dump prior tasks as CSV")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("train", parents=[common], help="train backbone and decoder bank")
    p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("infer", parents=[common], help="early-exit inference on one CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--label-column", default="label")
    p.add_argument("--tau", type=float, action="append")
    p.add_argument("--trace-only", action="store_true", help="print the full-pass entropy trace")

    p = sub.add_parser("sweep", parents=[common], help="cross-validated threshold sweep")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--tau", type=float, action="append", help="repeatable")
    p.add_argument("--folds", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--serial-timing", action="store_true",
                   help="accepted for compatibility; timed sweeps always run serially")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "prior-sample":
            return cmd_prior_sample(cfg, args.count)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, args.dataset, args.label_column, args.trace_only)
        return cmd_sweep(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}\n  hint: drop or merge columns/classes, or train a model "
              "with larger model.max_features / model.max_classes", file=sys.stderr)
        return EXIT_INGEST
    except (IngestionError, CheckpointError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except (TrainingError, NumericInputError) as exc:
        print(f"training/numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_INGEST


if __name__ == "__main__":
    sys.exit(main())
