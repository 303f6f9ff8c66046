"""``priornet`` command line: gen, train, eval, grid.

Exit codes: 0 success, 2 usage error, 3 unparsable input file,
4 numeric failure during training, 5 I/O error, 6 degenerate evaluation
task (e.g. no misclassifications to detect).
"""

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_
from . import measures as measures_
from .evaluation import DegenerateTaskError, misclassification_detection, ood_detection
from .net import (
    CheckpointError,
    forward,
    init_mlp,
    load_checkpoint,
    logits_to_alpha,
    mc_dropout_probs,
    save_checkpoint,
    softmax,
)
from .train import LrSchedule, TargetSpec, TrainConfig, TrainingDivergedError, train_dnn, train_dpn

EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_DEGENERATE = 6

OUT_DIR_ENV = "PRIORNET_OUTPUT_DIR"

SOURCE_MEASURES = {
    "dnn": ("max_prob", "entropy"),
    "mcdp": ("max_prob", "entropy", "mutual_information"),
    "dpn": measures_.MEASURES,
}

TRAIN_DEFAULTS = {
    "hidden": [50],
    "activation": "relu",
    "epochs": 30,
    "batch_size": 64,
    "lr": 1e-3,
    "schedule": "one_cycle",
    "decay_rate": 0.9,
    "cycle_length": None,
    "alpha0": 100.0,
    "smoothing": 0.01,
    "ce_weight": 0.0,
    "ood_ratio": 1.0,
    "optimizer": "nadam",
    "seed": 0,
}
COLUMN_LABELS = {
    "max_prob": "Max.P",
    "entropy": "Ent.",
    "mutual_information": "M.I.",
    "differential_entropy": "D.Ent.",
}
KEEP_PROB_DEFAULT = {"dnn": 0.5, "dpn": 0.95}
DPN_ONLY = ("alpha0", "smoothing", "ce_weight", "ood_ratio")


class UsageError(Exception):
    pass


class ParseError(Exception):
    pass


def _default_dir():
    return Path(os.environ.get(OUT_DIR_ENV, "."))


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest(path, command, config, seed, artifacts, started):
    _write_json(path, {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "duration_s": round(time.perf_counter() - started, 6),
        "version": __version__,
    })


def _load_dataset(path, labeled):
    try:
        ds = data_.load_dataset(path)
    except data_.DatasetFormatError as exc:
        raise ParseError(str(exc)) from exc
    if labeled and not isinstance(ds, data_.LabeledDataset):
        raise ParseError(f"{path}: expected a 'label' column")
    return ds


def _load_model(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


# gen

def cmd_gen(args):
    started = time.perf_counter()
    out = Path(args.out) if args.out else _default_dir()
    out.mkdir(parents=True, exist_ok=True)
    n_test = args.n_test_per_class or args.n_per_class
    n_ood = args.n_ood or 3 * args.n_per_class
    try:
        spec = data_.GaussianMixtureSpec(args.sigma, args.radius, args.n_per_class)
        test_spec = data_.GaussianMixtureSpec(args.sigma, args.radius, n_test)
        if n_ood < 1:
            raise ValueError("--n-ood must be >= 1")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    s_train, s_test, s_ood, s_ood_test = _seeds(args.seed, 4)
    inner, outer = spec.ood_inner_radius, spec.ood_outer_radius

    paths = {
        "train": out / "train.csv",
        "test": out / "test.csv",
        "ood_train": out / "ood_train.csv",
        "ood_test": out / "ood_test.csv",
    }
    data_.save_dataset(data_.generate_gaussian_classes(spec, s_train), paths["train"])
    data_.save_dataset(data_.generate_gaussian_classes(test_spec, s_test), paths["test"])
    data_.save_dataset(data_.sample_ood_annulus(inner, outer, n_ood, s_ood), paths["ood_train"])
    data_.save_dataset(
        data_.sample_ood_annulus(inner, outer, 3 * n_test, s_ood_test), paths["ood_test"]
    )
    config = {
        "sigma": args.sigma, "radius": args.radius, "n_per_class": args.n_per_class,
        "n_test_per_class": n_test, "n_ood": n_ood,
        "ood_inner_radius": inner, "ood_outer_radius": outer,
    }
    _manifest(out / "gen.manifest.json", "gen", config, args.seed, paths, started)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")


# train

def _train_config(args):
    cfg = dict(TRAIN_DEFAULTS)
    cfg["keep_prob"] = KEEP_PROB_DEFAULT[args.kind]
    if args.config:
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ParseError(f"{args.config}: expected a JSON object")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    flags = {k: v for k, v in vars(args).items() if k in cfg and v is not None}
    cfg.update(flags)

    if args.kind == "dnn":
        given = [k for k in DPN_ONLY if k in flags or (args.config and k in file_cfg)]
        if given or args.ood:
            raise UsageError(f"options only valid for dpn: {', '.join(given or ['ood'])}")
    if cfg["schedule"] != "one_cycle" and "cycle_length" in flags:
        raise UsageError("--cycle-length requires --schedule one_cycle")
    if cfg["schedule"] == "one_cycle" and cfg["cycle_length"] is None:
        cfg["cycle_length"] = 0.75 * max(cfg["epochs"], 1)
    return cfg


def cmd_train(args):
    started = time.perf_counter()
    cfg = _train_config(args)
    in_data = _load_dataset(args.data, labeled=True)
    ood = _load_dataset(args.ood, labeled=False) if args.ood else None
    if ood is not None and ood.dim != in_data.dim:
        raise UsageError("OOD data and training data have different feature counts")

    try:
        schedule = LrSchedule(
            cfg["schedule"], cfg["lr"], cfg["decay_rate"],
            cfg["cycle_length"] if cfg["schedule"] == "one_cycle" else None,
            max(cfg["epochs"], 1) if cfg["schedule"] == "one_cycle" else None,
        )
        train_cfg = TrainConfig(
            schedule=schedule, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            ce_weight=cfg["ce_weight"], ood_ratio=cfg["ood_ratio"] if ood is not None else 0.0,
            optimizer=cfg["optimizer"], seed=cfg["seed"],
        )
        sizes = [in_data.dim] + list(cfg["hidden"]) + [in_data.num_classes]
        net = init_mlp(sizes, cfg["activation"], cfg["keep_prob"], seed=cfg["seed"])
        target = TargetSpec(cfg["alpha0"], cfg["smoothing"], in_data.num_classes)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc

    if args.kind == "dpn":
        net, history = train_dpn(net, in_data, ood, target, train_cfg)
    else:
        net, history = train_dnn(net, in_data, train_cfg)

    out = Path(args.out) if args.out else _default_dir() / f"{args.kind}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    hist_path = out.with_suffix(".history.csv")
    with open(hist_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, repr(float(loss))])
    config = dict(cfg, kind=args.kind, data=str(args.data), ood=str(args.ood) if args.ood else None)
    _manifest(out.with_suffix(".manifest.json"), "train", config, cfg["seed"],
              {"checkpoint": out, "history": hist_path}, started)
    final = f"{history[-1]:.6g}" if history else "n/a"
    print(f"wrote {out} (final epoch loss {final})")


# eval / grid shared

def _predict(net, x, source, samples, seed):
    """``(measures, predicted_labels)`` for inputs ``x`` under a source."""
    if source == "dnn":
        probs = softmax(forward(net, x)[0])
        return measures_.categorical_measures(probs), probs.argmax(axis=1)
    if source == "mcdp":
        members = mc_dropout_probs(net, x, samples, seed)
        return measures_.ensemble_measures(members), members.mean(axis=0).argmax(axis=1)
    alpha = logits_to_alpha(forward(net, x)[0])
    return measures_.dirichlet_measures(alpha), alpha.argmax(axis=1)


def _check_measures(source, requested):
    allowed = SOURCE_MEASURES[source]
    bad = [m for m in requested if m not in allowed]
    if bad:
        raise UsageError(f"source {source} does not provide: {', '.join(bad)}")


def _fmt(v):
    return "-" if v is None else f"{100.0 * v:5.1f}"


def _print_report(doc):
    cols = measures_.MEASURES
    print(f"{'':8}" + "".join(f"{COLUMN_LABELS[c]:>8}" for c in cols))
    for key in ("auroc", "aupr"):
        row = [doc["metrics"][c][key] if doc["metrics"][c] else None for c in cols]
        print(f"{key.upper():8}" + "".join(f"{_fmt(v):>8}" for v in row))
    if doc.get("error_rate") is not None:
        print(f"% Err.  {100.0 * doc['error_rate']:.2f}")


def cmd_eval(args):
    started = time.perf_counter()
    requested = args.measures or list(SOURCE_MEASURES[args.source])
    _check_measures(args.source, requested)
    if args.task == "ood" and not args.ood:
        raise UsageError("eval ood requires --ood")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    net = _load_model(args.model)
    test = _load_dataset(args.data, labeled=args.task == "misclass")
    if test.dim != net.input_dim:
        raise UsageError(f"model expects {net.input_dim} features, data has {test.dim}")

    seed_in, seed_out = _seeds(args.seed, 2)
    in_measures, preds = _predict(net, test.features, args.source, args.samples, seed_in)
    in_measures = {m: in_measures[m] for m in requested}
    if args.task == "misclass":
        report = misclassification_detection(in_measures, preds, test.labels)
    else:
        ood = _load_dataset(args.ood, labeled=False)
        out_measures, _ = _predict(net, ood.features, args.source, args.samples, seed_out)
        out_measures = {m: out_measures[m] for m in requested}
        report = ood_detection(in_measures, out_measures, balance=not args.no_balance, seed=args.seed)

    doc = report.to_dict()
    doc["metrics"] = {m: doc["metrics"].get(m) for m in measures_.MEASURES}
    doc.update({
        "source": args.source,
        "seed": args.seed,
        "config": {"samples": args.samples if args.source == "mcdp" else None,
                   "balance": not args.no_balance if args.task == "ood" else None,
                   "measures": requested},
    })
    out = Path(args.out) if args.out else _default_dir() / f"report_{args.task}_{args.source}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, doc)
    artifacts = {"report": out}
    if args.scores_out:
        with open(args.scores_out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["index", "prediction"] + requested)
            for i in range(len(test)):
                w.writerow([i, int(preds[i])] + [repr(float(in_measures[m][i])) for m in requested])
        artifacts["scores"] = args.scores_out
    _manifest(out.with_suffix(".manifest.json"), "eval",
              dict(doc["config"], task=args.task, source=args.source, model=str(args.model),
                   data=str(args.data), ood=str(args.ood) if args.ood else None),
              args.seed, artifacts, started)
    _print_report(doc)


def cmd_grid(args):
    started = time.perf_counter()
    _check_measures(args.source, args.measure)
    net = _load_model(args.model)
    if net.input_dim != 2:
        raise UsageError(f"grid needs a 2-D input model, this one takes {net.input_dim}")
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    x_range = args.x_range or args.range
    y_range = args.y_range or args.range
    pts = data_.grid_points(x_range, y_range, args.resolution).features
    values, _ = _predict(net, pts, args.source, args.samples, args.seed)

    out = Path(args.out) if args.out else _default_dir()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for m in args.measure:
        path = out / f"grid_{args.source}_{m}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(pts, values[m]):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        artifacts[m] = path
    config = {"source": args.source, "measures": args.measure, "x_range": list(x_range),
              "y_range": list(y_range), "resolution": args.resolution, "model": str(args.model),
              "samples": args.samples}
    _manifest(out / f"grid_{args.source}.manifest.json", "grid", config, args.seed, artifacts, started)
    print(f"wrote {', '.join(str(p) for p in artifacts.values())}")


def build_parser():
    p = argparse.ArgumentParser(prog="priornet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the Gaussian-class dataset and OOD samples")
    g.add_argument("--sigma", type=float, required=True)
    g.add_argument("--radius", type=float, default=4.0)
    g.add_argument("--n-per-class", type=int, default=1000)
    g.add_argument("--n-test-per-class", type=int)
    g.add_argument("--n-ood", type=int, help="OOD training points (default 3 * n-per-class)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or .)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a DNN or DPN")
    t.add_argument("kind", choices=("dnn", "dpn"))
    t.add_argument("--data", required=True)
    t.add_argument("--ood", help="OOD training CSV (dpn only)")
    t.add_argument("--config", help="JSON file of defaults; flags override it")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--hidden", type=int, nargs="+")
    t.add_argument("--activation", choices=("relu", "leaky_relu"))
    t.add_argument("--keep-prob", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--schedule", choices=("constant", "exponential_decay", "one_cycle"))
    t.add_argument("--decay-rate", type=float)
    t.add_argument("--cycle-length", type=float)
    t.add_argument("--alpha0", type=float, help="target precision")
    t.add_argument("--smoothing", type=float)
    t.add_argument("--ce-weight", type=float)
    t.add_argument("--ood-ratio", type=float)
    t.add_argument("--optimizer", choices=("nadam", "adam", "momentum"))
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="misclassification or OOD detection report")
    e.add_argument("task", choices=("misclass", "ood"))
    e.add_argument("--model", required=True)
    e.add_argument("--source", choices=tuple(SOURCE_MEASURES), required=True)
    e.add_argument("--data", required=True, help="in-domain test CSV")
    e.add_argument("--ood", help="OOD test CSV (ood task)")
    e.add_argument("--samples", type=int, default=100, help="MC dropout passes (mcdp)")
    e.add_argument("--measures", nargs="+", choices=measures_.MEASURES)
    e.add_argument("--no-balance", action="store_true", help="keep unequal in/OOD set sizes")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--scores-out", help="per-example measures CSV (in-domain data)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("grid", help="evaluate measures over a 2-D lattice")
    r.add_argument("--model", required=True)
    r.add_argument("--source", choices=tuple(SOURCE_MEASURES), default="dpn")
    r.add_argument("--measure", nargs="+", choices=measures_.MEASURES,
                   default=["entropy", "differential_entropy"])
    r.add_argument("--range", type=float, nargs=2, default=(-12.0, 12.0), metavar=("LO", "HI"))
    r.add_argument("--x-range", type=float, nargs=2, metavar=("LO", "HI"))
    r.add_argument("--y-range", type=float, nargs=2, metavar=("LO", "HI"))
    r.add_argument("--resolution", type=int, default=200)
    r.add_argument("--samples", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_grid)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"priornet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"priornet {args.command}: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except TrainingDivergedError as exc:
        print(f"priornet {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateTaskError as exc:
        print(f"priornet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as exc:
        print(f"priornet {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0
