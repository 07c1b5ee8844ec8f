"""Command-line entry point: ``gaitfusion {synth,train,eval,ablate,gradcheck}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, load_run_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "GAITFUSION_THREADS"
ABLATION_GRID = [("input", "concatenation")] + [
    (loc, mech) for loc in ("middle", "high") for mech in ("addition", "concatenation", "cross_attention")
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gaitfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic multimodal gait dataset")
    p.add_argument("--spec", required=True, help="INI file whose [data] section describes the dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    p = sub.add_parser("train", help="train a model and write checkpoint + loss log")
    p.add_argument("--config", required=True, help="run configuration INI")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.tsv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint under a gallery/probe protocol")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--protocol", required=True, help="INI file with an [eval] section")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--embeddings", default=None, help="also dump per-sequence embeddings here")

    p = sub.add_parser("ablate", help="train and evaluate the 7-cell fusion location x mechanism grid")
    p.add_argument("--config", required=True, help="run configuration INI")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory (ablation.csv + per-cell logs)")
    p.add_argument("--variant", default="s+f", choices=("s+p", "s+f"), help="two-modality variant (default s+f)")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="input seed (default 0)")
    return parser


def thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _log(msg: str) -> None:
    print(msg, flush=True)


def _load_training(run, data_dir, modalities):
    from .data import GaitDataset

    ds = GaitDataset.from_dir(data_dir, modalities)
    if run.train_sequences:
        keep = set(run.train_sequences)
        ds = ds.subset(lambda s: s.sequence in keep)
        if not len(ds):
            raise ConfigError(f"train_sequences {sorted(keep)} match nothing in {data_dir}")
    return ds


def _train_one(run, model_config, data_dir, out_dir, seed):
    from .model import build
    from .training import train

    ds = _load_training(run, data_dir, model_config.modalities)
    model = build(model_config, seed)
    t0 = time.time()

    def progress(row):
        if row["step"] % 25 == 0 or row["step"] == run.train.total_steps - 1:
            _log(f"step {row['step']:5d}  lr {row['lr']:.4g}  triplet {row['triplet_loss']:.4f}  "
                 f"softmax {row['softmax_loss']:.4f}  batch-R1 {row['rank1']:.3f}  ({time.time() - t0:.0f}s)")

    train(model, ds, dataclasses.replace(run.train, seed=seed), out_dir, progress)
    return model


def cmd_synth(args) -> int:
    from .data import synth_generate

    spec = load_run_config(args.spec).data
    manifest = synth_generate(spec, args.out, args.seed)
    _log(f"wrote {spec.num_ids * spec.seqs_per_id} sequences x {spec.frames} frames to {args.out} ({manifest.name})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import DatasetManifest

    run = load_run_config(args.config)
    seed = run.train.seed if args.seed is None else args.seed
    manifest = DatasetManifest.load(args.data)
    ids = {r.identity for r in manifest.rows
           if not run.train_sequences or r.sequence in run.train_sequences}
    model_config = run.model_config(num_classes=len(ids))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = run.to_ini(model_config.num_classes)
    (out / "config.ini").write_text(resolved, encoding="utf-8")
    _log(resolved)
    _train_one(run, model_config, args.data, out, seed)
    _log(f"wrote {out / 'model.gfck'} and {out / 'train_log.csv'}")
    return EXIT_OK


def _evaluate(model, data_dir, protocol):
    from .data import GaitDataset
    from .retrieval import evaluate, extract_embeddings

    table = extract_embeddings(model, GaitDataset.from_dir(data_dir, model.config.modalities))
    return evaluate(protocol, table), table


def cmd_eval(args) -> int:
    from .checkpoint import checkpoint_load

    protocol = load_run_config(args.protocol).protocol
    model, step, _ = checkpoint_load(args.checkpoint)
    report, table = _evaluate(model, args.data, protocol)
    report.to_csv(args.out)
    if args.embeddings:
        table.save(args.embeddings)
    _log(f"checkpoint {args.checkpoint} (step {step})")
    _log(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import DatasetManifest
    from .fusion import FusionSpec

    run = load_run_config(args.config)
    seed = run.train.seed if args.seed is None else args.seed
    manifest = DatasetManifest.load(args.data)
    ids = {r.identity for r in manifest.rows if not run.train_sequences or r.sequence in run.train_sequences}
    base = run.model_config(num_classes=len(ids))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(run.to_ini(base.num_classes), encoding="utf-8")
    conditions = list(run.protocol.probe_conditions) + ["overall"]
    rows = []
    for loc, mech in ABLATION_GRID:
        cfg = base.replace(variant=args.variant, fusion=FusionSpec(loc, mech), use_m_co=True, use_m_di=True,
                           double_merge=False)
        cfg.validate()
        _log(f"== {args.variant} fusion at {loc} by {mech}")
        model = _train_one(run, cfg, args.data, out / f"{loc}-{mech}", seed)
        report, _ = _evaluate(model, args.data, run.protocol)
        rows.append([loc, mech] + [f"{report.row(c)['rank1']:.6f}" for c in conditions])
        _log(report.table())
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location", "mechanism"] + [f"rank1_{c}" for c in conditions])
        w.writerows(rows)
    _log(f"wrote {out / 'ablation.csv'} ({len(rows)} cells)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed, report=lambda name, r: _log(f"{name:32s} {r}"))
    failed = [name for name, r in results if not r.passed]
    _log(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        threads = thread_limit()
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    with threadpool_limits(limits=threads):
        try:
            return COMMANDS[args.command](args)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except Exception as e:  # noqa: BLE001 - any failure while running maps to exit 2
            print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
            return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
