"""Command-line entry point: ``attnmisl <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import cohort as ch
from .clustering import kmeans_cluster, write_assignment_csv
from .errors import DataError, NumericalError
from .heatmap import heatmap_export
from .metrics import concordance_index, kaplan_meier, log_rank_test, median_risk_split, survival_auc
from .model import ModelConfig
from .training import TrainConfig, TrainedModel, cross_validate, ensemble_predict_bags, fit, cohort_tensors

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _echo(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _model_config(args, d) -> ModelConfig:
    return ModelConfig(
        d=d,
        layer_pairs=args.layer_pairs,
        instance_pool={"avg": "average", "max": "max"}[args.pool],
        attention_hidden=args.attention_hidden,
        attention_kind=args.attention,
        siamese=not args.no_siamese,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        max_epochs=args.epochs,
        patience=args.patience,
        min_delta=args.min_delta,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _epoch_logger(args):
    if args.quiet:
        return None
    return lambda epoch, tr, va: print(f"{epoch},{_fmt(tr)},{_fmt(va)}", flush=True)


def _write_predictions(path, ids, risks):
    high = median_risk_split(risks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "risk", "group"])
        for pid, r, h in zip(ids, risks, high):
            w.writerow([pid, _fmt(r), "high" if h else "low"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cohort, truth = ch.generate_synthetic_cohort(
        args.patients, args.patches, args.dim, args.archetypes,
        (args.tumor_min, args.tumor_max), args.seed,
        censor_rate=args.censor_rate, hazard_coef=args.hazard_coef,
    )
    out = Path(args.out)
    manifest = ch.save_cohort(cohort, out)
    ch.write_ground_truth(out / "ground_truth.csv", cohort, truth)
    _echo(args, f"wrote {len(cohort)} patients to {manifest}")


def cmd_cluster(args):
    cohort = ch.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for bag in cohort.patients:
        a = kmeans_cluster(bag, args.clusters, args.seed)
        write_assignment_csv(out / f"{_safe(bag.patient_id)}.csv", bag, a)
    _echo(args, f"clustered {len(cohort)} patients into {out}")


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def cmd_train(args):
    cohort = ch.load_manifest(args.manifest)
    cfg = _model_config(args, cohort.feature_dim)
    tc = _train_config(args)
    n = len(cohort)
    if n < 2:
        raise DataError("need at least two patients to carve a validation set")
    n_val = max(1, int(np.floor(args.val_frac * n + 0.5)))
    perm = np.random.default_rng([args.seed, 3]).permutation(n)
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train_c, val_c = cohort.subset(tr), cohort.subset(val)
    train_c.require_events("training set")
    val_c.require_events("validation set")
    tensors = cohort_tensors(cohort, cfg, args.clusters, args.seed)
    t, e = cohort.times, cohort.events
    model = fit([tensors[i] for i in tr], t[tr], e[tr], [tensors[i] for i in val], t[val], e[val],
                cfg, tc, args.clusters, _epoch_logger(args))
    model.train_ids = train_c.ids
    model.save(args.out)
    _echo(args, f"best epoch {model.best_epoch}; saved {args.out}")


def cmd_crossval(args):
    cohort = ch.load_manifest(args.manifest)
    cfg = _model_config(args, cohort.feature_dim)
    res = cross_validate(cohort, args.folds, cfg, _train_config(args), args.clusters,
                         seed=args.seed, val_frac=args.val_frac, n_models=args.ensemble)
    text = json.dumps(res.table(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_predict(args):
    cohort = ch.load_manifest(args.manifest)
    model = TrainedModel.load(args.model)
    if model.config.d != cohort.feature_dim:
        raise DataError(f"model expects d={model.config.d}, manifest has d={cohort.feature_dim}")
    _write_predictions(args.out, cohort.ids, model.predict(cohort.patients))
    _echo(args, f"wrote {args.out}")


def cmd_ensemble(args):
    cohort = ch.load_manifest(args.manifest)
    models = [TrainedModel.load(p) for p in args.models]
    if any(m.config.d != cohort.feature_dim for m in models):
        raise DataError("model and manifest feature dimensions differ")
    _write_predictions(args.out, cohort.ids, ensemble_predict_bags(models, cohort.patients))
    _echo(args, f"wrote {args.out}")


def _km_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events"])
        for row in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            w.writerow([_fmt(row[0]), _fmt(row[1]), int(row[2]), int(row[3])])


def cmd_evaluate(args):
    cohort = ch.load_manifest(args.manifest)
    with open(args.predictions, newline="", encoding="utf-8") as fh:
        pred = {row["patient_id"]: float(row["risk"]) for row in csv.DictReader(fh)}
    missing = [pid for pid in cohort.ids if pid not in pred]
    if missing:
        raise DataError(f"no prediction for {missing[:3]}")
    risks = np.array([pred[pid] for pid in cohort.ids])
    t, e = cohort.times, cohort.events
    tau = float(np.median(t)) if args.tau is None else args.tau
    high = median_risk_split(risks)
    km_low, km_high = kaplan_meier(t[~high], e[~high]), kaplan_meier(t[high], e[high])
    lr = log_rank_test(t[~high], e[~high], t[high], e[high])
    result = {
        "c_index": concordance_index(risks, t, e),
        "auc": survival_auc(risks, t, e, tau),
        "tau": tau,
        "km_low": km_low.to_dict(),
        "km_high": km_high.to_dict(),
        "log_rank": {"statistic": lr.statistic, "p_value": lr.p_value},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(result, indent=2)
    (out / "evaluation.json").write_text(text + "\n", encoding="utf-8")
    _km_csv(out / "km_low.csv", km_low)
    _km_csv(out / "km_high.csv", km_high)
    if not args.quiet:
        print(text)


def cmd_heatmap(args):
    cohort = ch.load_manifest(args.manifest)
    model = TrainedModel.load(args.model)
    if model.config.d != cohort.feature_dim:
        raise DataError(f"model expects d={model.config.d}, manifest has d={cohort.feature_dim}")
    bags = cohort.patients
    if args.patient:
        bags = [b for b in bags if b.patient_id in set(args.patient)]
        if len(bags) != len(set(args.patient)):
            raise DataError("unknown patient id")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for bag in bags:
        a = kmeans_cluster(bag, model.clusters, model.train_config.seed) if model.config.siamese else None
        heatmap_export(model, bag, a, out / _safe(bag.patient_id), tile=args.tile)
    _echo(args, f"wrote {len(bags)} heatmaps to {out}")


# ---------------------------------------------------------------------------
# parser


def _model_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--layer-pairs", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--pool", choices=("avg", "max"), default="avg")
    p.add_argument("--attention", choices=("plain", "gated", "uniform"), default="plain")
    p.add_argument("--attention-hidden", type=int, default=64)
    p.add_argument("--no-siamese", action="store_true")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--val-frac", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--config", help="JSON file mirroring the flags; explicit flags win")

    parser = argparse.ArgumentParser(prog="attnmisl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--patches", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--archetypes", type=int, default=4)
    p.add_argument("--tumor-min", type=float, default=0.0)
    p.add_argument("--tumor-max", type=float, default=1.0)
    p.add_argument("--censor-rate", type=float, default=0.3)
    p.add_argument("--hazard-coef", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", parents=[common], help="per-patient k-means assignments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", parents=[common], help="train one model")
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", parents=[common], help="k-fold cross-validation")
    _model_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--ensemble", type=int, default=1, help="models averaged per fold")
    p.add_argument("--out")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("predict", parents=[common], help="score a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="C-index, AUC, KM curves, log-rank")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", parents=[common], help="attention heatmaps (CSV + SVG)")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient", action="append")
    p.add_argument("--tile", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ensemble", parents=[common], help="average several checkpoints")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config and command:
        try:
            with open(known.config, encoding="utf-8") as fh:
                conf = json.load(fh)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        if not isinstance(conf, dict):
            parser.error("config must be a JSON object")
        sub = subparsers[command]
        known_dests = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in conf.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known_dests or dest in ("config", "func", "help"):
                parser.error(f"unknown config key {key!r}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
