"""Command-line interface: ``subbagmil {gen,train,eval,report,gradcheck,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bagstore import DatasetManifest, SplitSpec, SyntheticConfig, dataset_entropy, generate_synthetic, stratified_split
from .exceptions import (ConfigError, FormatError, GradCheckError, IntegrityError, ModelError, NumericFailure,
                         OptimizerError, PartitionError, SamplingError, SplitError)
from .gradcheck import GRADCHECK_TOL, run_suite
from .metrics import METRIC_NAMES, write_metric_csv
from .model import load_checkpoint, save_checkpoint
from .report import build_report, write_csv
from .trainer import LOSS_COLUMNS, TrainConfig, evaluate, fit

log = logging.getLogger("subbagmil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SCHEDULE_CHOICES = ("smooth", "linear", "exp", "random")
ABLATIONS = {
    "full": {},
    "no-c1": {"use_consistency": False},
    "no-c2": {"use_curriculum": False},
    "no-c3": {"use_pseudo_bags": False},
    "baseline": {"use_consistency": False, "use_curriculum": False, "use_pseudo_bags": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_ratio(text):
    try:
        parts = tuple(float(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed ratio {text!r}; expected a:b:c") from None
    if len(parts) < 2 or any(not np.isfinite(p) or p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(f"ratio {text!r} needs at least two positive parts")
    return parts


def parse_weights(text):
    try:
        w = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed weights {text!r}; expected w1,w2,wc,ws") from None
    if len(w) != 4 or any(x < 0 for x in w):
        raise argparse.ArgumentTypeError("weights need four non-negative values w1,w2,wc,ws")
    return w


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--subbags", type=_positive_int, default=d.n_subbags, help="sub-bags per bag (S)")
    p.add_argument("--schedule", choices=SCHEDULE_CHOICES, default="smooth")
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--topk", type=_positive_int, default=d.top_k)
    p.add_argument("--triplets", type=_positive_int, default=d.n_triplets)
    p.add_argument("--weights", type=parse_weights, default=d.loss_weights, help="w1,w2,wc,ws")
    p.add_argument("--no-c1", action="store_true", help="disable the consistency losses")
    p.add_argument("--no-c2", action="store_true", help="disable curriculum contrastive learning")
    p.add_argument("--no-c3", action="store_true", help="disable pseudo-bag generation")
    p.add_argument("--epochs", type=_positive_int, default=d.epochs)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--wd", type=float, default=d.weight_decay)
    p.add_argument("--hidden", type=_positive_int, default=d.hidden)
    p.add_argument("--attention", type=_positive_int, default=d.attention)
    p.add_argument("--head", choices=("t1", "t2"), default=d.inference_head, help="inference head")
    p.add_argument("--consistency-grad", choices=("t2", "both"), default=d.consistency_grad)
    p.add_argument("--seed", type=int, default=d.seed)


def config_from_args(args, **overrides):
    kw = dict(n_subbags=args.subbags, epochs=args.epochs, patience=args.patience, lr=args.lr,
              weight_decay=args.wd, loss_weights=args.weights, top_k=args.topk,
              n_triplets=args.triplets, margin=args.margin, momentum=args.momentum,
              schedule=args.schedule, use_consistency=not args.no_c1,
              use_curriculum=not args.no_c2, use_pseudo_bags=not args.no_c3,
              hidden=args.hidden, attention=args.attention, inference_head=args.head,
              consistency_grad=args.consistency_grad, seed=args.seed)
    kw.update(overrides)
    return TrainConfig(**kw)


def build_parser():
    p = _Parser(prog="subbagmil", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--classes", type=_positive_int, default=3)
    g.add_argument("--ratio", type=parse_ratio, default=None, help="class ratio a:b:c (default 1:...:1)")
    g.add_argument("--bags", type=_positive_int, default=195)
    g.add_argument("--dim", type=_positive_int, default=32)
    g.add_argument("--min-instances", type=_positive_int, default=16)
    g.add_argument("--max-instances", type=_positive_int, default=48)
    g.add_argument("--salient-fraction", type=float, default=0.25)
    g.add_argument("--background-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on a dataset and write a run directory")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a run's best checkpoint")
    e.add_argument("--run", required=True, type=Path)
    e.add_argument("--data", type=Path, default=None, help="defaults to the dataset recorded in the run")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--head", choices=("t1", "t2"), default=None)

    r = sub.add_parser("report", help="emit CSV tables and SVG charts for a run")
    r.add_argument("--run", required=True, type=Path)
    r.add_argument("--data", type=Path, default=None)
    r.add_argument("--out", type=Path, default=None)

    c = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    c.add_argument("--seeds", type=_positive_int, default=20)
    c.add_argument("--seed", type=int, default=0, help="first seed")

    a = sub.add_parser("ablate", help="train the full method and each ablation over several seeds")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--variants", nargs="+", choices=tuple(ABLATIONS), default=list(ABLATIONS))
    _add_train_flags(a)
    return p


def _load_split(manifest, seed):
    split = stratified_split(manifest, seed)
    return split, [manifest.load_bags(ids) for ids in (split.train, split.val, split.test)]


def train_run(data_dir, out_dir, cfg, split_seed=None, argv=None):
    """Fit on ``data_dir`` and write a complete run directory.

    Returns ``(FitResult, test MetricTable)``.
    """
    t_start = time.perf_counter()
    manifest = DatasetManifest.load(data_dir)
    split_seed = cfg.seed if split_seed is None else split_seed
    split, (train, val, test) = _load_split(manifest, split_seed)
    t_loaded = time.perf_counter()
    result = fit(train, val, cfg, n_classes=manifest.n_classes)
    t_fit = time.perf_counter()
    table = evaluate(result.model, test, head=cfg.inference_head, pooling=cfg.pooling)
    val_table = evaluate(result.model, val, head=cfg.inference_head, pooling=cfg.pooling)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    split.save(out / "split.json")
    means = result.losses.epoch_means()
    write_csv(out / "losses.csv", ["epoch", *LOSS_COLUMNS],
              [[e, *(repr(float(means[e][c])) for c in LOSS_COLUMNS)] for e in sorted(means)])
    write_csv(out / "validation.csv", ["epoch", "f1", "acc", "auc"],
              [[r["epoch"], repr(r["f1"]), repr(r["acc"]), repr(r["auc"])] for r in result.val_history])
    tel_cols = ["epoch", "k", "mean_pos_sim", "mean_neg_sim", "fallbacks", "active_triplets"]
    write_csv(out / "curriculum.csv", tel_cols, [[r[c] for c in tel_cols] for r in result.telemetry])
    save_checkpoint(result.model, out / "best.ckpt")
    write_metric_csv(out / "metrics.csv", {"val": val_table, "test": table})
    run_manifest = {
        "argv": list(argv) if argv is not None else None,
        "command": "train",
        "version": __version__,
        "seed": cfg.seed,
        "split_seed": split_seed,
        "config": cfg.to_json(),
        "dataset": str(Path(data_dir).resolve()),
        "dataset_hash": manifest.content_hash(),
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "counters": dict(sorted(result.counters.items())),
        "timings": {"load_s": t_loaded - t_start, "fit_s": t_fit - t_loaded,
                    "total_s": time.perf_counter() - t_start},
    }
    (out / "run.json").write_text(json.dumps(run_manifest, indent=2) + "\n")
    return result, table


def _run_info(run_dir):
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; is {run_dir} a run directory?")
    return json.loads(path.read_text())


def _print_table(name, table):
    print(",".join(["name", *METRIC_NAMES]))
    print(",".join([name, *table.csv_row()]))


def cmd_gen(args):
    n = args.classes
    ratio = args.ratio or (1.0,) * n
    if n < 2:
        raise UsageError("--classes must be at least 2")
    if len(ratio) != n:
        raise UsageError(f"--ratio has {len(ratio)} parts for {n} classes")
    if args.min_instances > args.max_instances:
        raise UsageError("--min-instances exceeds --max-instances")
    try:
        cfg = SyntheticConfig(n, ratio, args.bags, args.dim, (args.min_instances, args.max_instances),
                              args.salient_fraction, args.background_scale, args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_synthetic(cfg, args.out)
    counts = manifest.class_counts()
    for name, c in zip(manifest.class_names, counts):
        print(f"{name}: {c}")
    print(f"entropy: {dataset_entropy(counts):.4f}")
    return EXIT_OK


def cmd_train(args, argv=None):
    cfg = config_from_args(args)
    _, table = train_run(args.data, args.out, cfg, args.split_seed, argv)
    _print_table("test", table)
    return EXIT_OK


def cmd_eval(args):
    info = _run_info(args.run)
    ckpt = Path(args.run) / "best.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    cfg = TrainConfig.from_json(info["config"])
    manifest = DatasetManifest.load(args.data or info["dataset"])
    if manifest.dim != model.t1.dim:
        raise ModelError(f"dataset dim {manifest.dim} does not match checkpoint dim {model.t1.dim}")
    split = SplitSpec.load(Path(args.run) / "split.json")
    bags = manifest.load_bags(getattr(split, args.split))
    table = evaluate(model, bags, head=args.head or cfg.inference_head, pooling=cfg.pooling)
    write_metric_csv(Path(args.run) / f"eval_{args.split}.csv", {args.split: table})
    _print_table(args.split, table)
    return EXIT_OK


def cmd_report(args):
    info = _run_info(args.run)
    manifest = DatasetManifest.load(args.data or info["dataset"])
    split = SplitSpec.load(Path(args.run) / "split.json")
    counts = manifest.class_counts(split.train)
    for path in build_report(args.run, counts, list(manifest.class_names), args.out):
        print(path)
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = range(args.seed, args.seed + args.seeds)
    results = run_suite(seeds)
    ok = True
    for name, err in results.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name:18s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} over {len(seeds)} seeds (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args, argv=None):
    rows = []
    scores = {v: [] for v in args.variants}
    for seed in args.seeds:
        for variant in args.variants:
            cfg = config_from_args(args, seed=seed, **ABLATIONS[variant])
            _, table = train_run(args.data, args.out / f"{variant}_seed{seed}", cfg, argv=argv)
            scores[variant].append(table.f1)
            rows.append([variant, seed, *table.csv_row()])
            print(f"{variant} seed={seed} f1={100 * table.f1:.2f}", flush=True)
    write_csv(args.out / "ablation.csv", ["variant", "seed", *METRIC_NAMES], rows)
    for variant, vals in scores.items():
        print(f"{variant}: mean f1 {100 * np.mean(vals):.2f}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command]
    try:
        if args.command in ("train", "ablate"):
            return handler(args, argv)
        return handler(args)
    except (UsageError, ConfigError) as exc:
        print(f"subbagmil {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SplitError, IntegrityError, ModelError, PartitionError, SamplingError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"subbagmil {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, OptimizerError, GradCheckError, FloatingPointError) as exc:
        print(f"subbagmil {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
