"""The ``segcal`` command line: generate, train, predict, evaluate, sweep, correlate.

Every subcommand accepts ``--config FILE.json``; its keys are flag names
(dashes or underscores) either at top level or under a section named after the
subcommand. Explicit flags override the config file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from . import calibration as cal
from . import phantoms as ph
from . import toynet as tn
from .ensemble import DEFAULT_SIZES, EnsembleConfig, ensemble_mean, m_sweep, mc_dropout_mean, sweep_csv
from .segmetrics import EMPTY_SEGMENT, EmptySegmentWarning, dice_coefficient, hausdorff95, union_foreground_box
from .stats import BootstrapConfig, bootstrap_ci
from .uncertainty import DEFAULT_LOGIT_EPS, correlate, logit, mean_segment_entropy
from .volume import LabelVolume, ProbabilityVolume, argmax_labels, read_volume, write_volume

log = logging.getLogger("segcal")

MANIFEST_FORMAT = "segcal-manifest/1"
MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "preset", "seed", "phantom", "cases"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "preset": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "phantom": {"type": "object"},
        "cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["case_id", "features", "labels", "preset", "shift"],
                "additionalProperties": False,
                "properties": {
                    "case_id": {"type": "string", "minLength": 1},
                    "features": {"type": "string"},
                    "labels": {"type": "string"},
                    "preset": {"type": "string"},
                    "shift": {"type": "boolean"},
                },
            },
        },
    },
}
WARNINGS_SCHEMA = {
    "type": "object",
    "required": ["warnings"],
    "properties": {
        "warnings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["case_id", "region", "class_id", "metric", "code"],
                "properties": {
                    "case_id": {"type": "string"},
                    "region": {"enum": ["whole", "box"]},
                    "class_id": {"type": "integer", "minimum": 1},
                    "metric": {"type": "string"},
                    "code": {"type": "string"},
                },
            },
        }
    },
}

CORRELATION_HEADER = ("n", "r", "p_value", "slope", "intercept", "clamp_eps")
SCATTER_HEADER = ("case_id", "mean_entropy", "logit_dice", "shift_flag")
SUMMARY_HEADER = ("region", "metric", "n", "mean", "ci_lo", "ci_hi")
SEEDED_COMMANDS = ("generate", "train", "predict", "sweep")


class UsageError(Exception):
    pass


# -- manifests ---------------------------------------------------------------

def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    return manifest, path.parent


def load_cases(path) -> list[tuple[dict, ProbabilityVolume, LabelVolume]]:
    manifest, root = load_manifest(path)
    return [(c, read_volume(root / c["features"]), read_volume(root / c["labels"]))
            for c in manifest["cases"]]


def _dump_json(obj, path, schema=None):
    if schema is not None:
        jsonschema.validate(obj, schema)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return "" if v is None else cal.fmt_real(v)


# -- generate ----------------------------------------------------------------

def cmd_generate(args) -> int:
    overrides = {k: v for k, v in (("classes", args.classes), ("shape", args.shape),
                                   ("in_channels", args.in_channels)) if v is not None}
    cfg = ph.preset(args.preset, seed=args.seed, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(args.count):
        feats, labels = ph.generate_one(cfg, i)
        case_id = f"{args.preset}_{args.seed}_{i:04d}"
        write_volume(feats, out / f"{case_id}.features.segv")
        write_volume(labels, out / f"{case_id}.labels.segv")
        cases.append({"case_id": case_id, "features": f"{case_id}.features.segv",
                      "labels": f"{case_id}.labels.segv", "preset": args.preset,
                      "shift": not cfg.shift.is_identity})
    phantom = asdict(cfg)
    phantom["dims"], phantom["spacing"] = list(cfg.dims), list(cfg.spacing)
    manifest = {"format": MANIFEST_FORMAT, "preset": args.preset, "seed": args.seed,
                "phantom": phantom, "cases": cases}
    _dump_json(manifest, out / "manifest.json", MANIFEST_SCHEMA)
    log.info("wrote %d cases to %s", args.count, out)
    return 0


# -- train -------------------------------------------------------------------

def _split(args):
    cases = [(f, y) for _, f, y in load_cases(args.manifest)]
    if args.val:
        return cases, [(f, y) for _, f, y in load_cases(args.val)]
    n_val = max(1, round(args.val_fraction * len(cases)))
    if n_val >= len(cases):
        raise ValueError("manifest too small to hold out a validation split")
    return cases[:-n_val], cases[-n_val:]


def loss_config(kind: str, weight_mode: str | None, explicit, labels, classes: int) -> tn.LossConfig:
    """CE defaults to inverse-frequency weights; Dice to uniform foreground weights."""
    kind = kind.upper()
    if weight_mode is None:
        weight_mode = "inverse-frequency" if kind == "CE" else "explicit"
        if kind == "DSC" and explicit is None:
            explicit = tn.foreground_weights(classes)
    if weight_mode == "inverse-frequency":
        w = tn.inverse_frequency_weights(labels, classes)
    elif weight_mode == "uniform":
        w = np.ones(classes)
    else:
        if explicit is None:
            raise UsageError("--weight-mode explicit needs --class-weights")
        w = np.asarray(explicit, dtype=np.float64)
    return tn.LossConfig(kind, tuple(float(v) for v in w), weight_mode=weight_mode)


def cmd_train(args) -> int:
    train_cases, val_cases = _split(args)
    feats, labels = train_cases[0]
    loss = loss_config(args.loss, args.weight_mode, args.class_weights,
                       [y for _, y in train_cases + val_cases], labels.classes)
    base = tn.TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        seed = tn.member_seed(args.seed, i)
        model = tn.ToyModel.init(feats.classes, labels.classes, args.head, args.dropout, seed)
        cfg = tn.TrainConfig(**{**asdict(base), "seed": seed})
        try:
            return i, *tn.train(model, train_cases, val_cases, loss, cfg)
        except tn.TrainingDivergedError as exc:
            return i, None, exc

    failed = 0
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        for i, model, hist in pool.map(one, range(args.members)):
            if model is None:
                failed += 1
                print(f"member {i}: {hist}", file=sys.stderr)
                continue
            tn.save_checkpoint(model, out / f"member_{i:03d}.toym")
            tn.write_history_csv(hist, out / f"member_{i:03d}.history.csv")
            log.info("member %d: best epoch %d, val dice %.4f", i, hist.best_epoch,
                     hist.val_dice[hist.best_epoch])
    return 1 if failed else 0


# -- predict -----------------------------------------------------------------

def _checkpoint_paths(items) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.toym")) if p.is_dir() else [p])
    if not paths:
        raise ValueError("no checkpoints found")
    return paths


def predict_case(models, feats, mode: str, samples: int, seed: int, case_index: int) -> ProbabilityVolume:
    if mode == "single":
        return tn.forward(models[0], feats)
    if mode == "ensemble":
        return ensemble_mean([tn.forward(m, feats) for m in models])
    per_member = []
    for j, m in enumerate(models):
        stream = np.random.SeedSequence([seed, case_index, j])
        per_member.append(mc_dropout_mean(tn.stochastic_sampler(m), feats, samples, stream))
    return ensemble_mean(per_member)


def cmd_predict(args) -> int:
    models = [tn.load_checkpoint(p) for p in _checkpoint_paths(args.checkpoints)]
    if args.mode == "single" and len(models) != 1:
        raise ValueError(f"mode single needs exactly one checkpoint, got {len(models)}")
    if args.mode == "mcdo" and any(m.dropout_p == 0 for m in models):
        raise ValueError("mode mcdo needs checkpoints trained with dropout_p > 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = load_cases(args.manifest)

    def one(item):
        i, (case, feats, _) = item
        write_volume(predict_case(models, feats, args.mode, args.samples, args.seed, i),
                     out / f"{case['case_id']}.pred.segv")

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        list(pool.map(one, enumerate(cases)))
    log.info("wrote %d predictions to %s", len(cases), out)
    return 0


# -- evaluate ----------------------------------------------------------------

def record_header(classes: int) -> list[str]:
    head = ["case_id", "model_id", "region", "shift", "n_voxels", "nll", "brier", "ece"]
    for k in range(1, classes):
        head += [f"dice_{k}", f"hd95_{k}", f"mean_entropy_{k}"]
    return head


def evaluate_case(pred: ProbabilityVolume, truth: LabelVolume, regions, bins: int, renorm: bool):
    """Per-region calibration metrics plus whole-volume segment metrics.

    Returns ``(rows, reports, warnings)``; rows map column names to values,
    ``None`` marking undefined entries.
    """
    hard = argmax_labels(pred)
    seg, notes = {}, []
    for k in range(1, truth.classes):
        with warnings.catch_warnings():
            # undefined entries are reported through the sidecar instead
            warnings.simplefilter("ignore", EmptySegmentWarning)
            seg[f"dice_{k}"] = dice_coefficient(hard, truth, k)
            seg[f"hd95_{k}"] = hausdorff95(hard, truth, k)
            u = mean_segment_entropy(pred, k)
        seg[f"mean_entropy_{k}"] = None if u is None else u.mean_entropy
        notes += [(k, m) for m in ("dice", "hd95", "mean_entropy") if seg[f"{m}_{k}"] is None]
    rows, reports = [], {}
    for region in regions:
        mask = union_foreground_box(truth) if region == "box" else None
        rep = cal.reliability(pred, truth, mask, bins, renorm)
        rows.append({"region": region, "n_voxels": rep.total,
                     "nll": cal.nll(pred, truth, mask, renorm), "brier": cal.brier(pred, truth, mask),
                     "ece": rep.ece, **seg})
        reports[region] = rep
    return rows, reports, notes


def summarize(records: list[dict], metrics, boot: BootstrapConfig) -> list[tuple]:
    out = []
    for region in dict.fromkeys(r["region"] for r in records):
        for metric in metrics:
            vals = [r[metric] for r in records if r["region"] == region and r[metric] is not None]
            if vals:
                ci = bootstrap_ci(vals, "mean", boot)
                out.append((region, metric, len(vals), ci.point, ci.ci_lo, ci.ci_hi))
    return out


def cmd_evaluate(args) -> int:
    manifest, root = load_manifest(args.manifest)
    pred_dir = Path(args.predictions)
    regions = ("whole", "box") if args.region == "both" else (args.region,)
    model_id = args.model_id or pred_dir.name
    records, notes = [], []
    reports = {r: [] for r in regions}
    header = None
    for case in manifest["cases"]:
        pred_path = pred_dir / f"{case['case_id']}.pred.segv"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction for case {case['case_id']}: {pred_path}")
        truth = read_volume(root / case["labels"])
        header = header or record_header(truth.classes)
        rows, reps, case_notes = evaluate_case(read_volume(pred_path), truth, regions, args.bins,
                                               args.renormalize)
        for row in rows:
            records.append({"case_id": case["case_id"], "model_id": model_id,
                            "shift": int(case["shift"]), **row})
        for region, rep in reps.items():
            reports[region].append(rep)
        notes += [{"case_id": case["case_id"], "region": region, "class_id": k,
                   "metric": metric, "code": EMPTY_SEGMENT}
                  for region in regions for k, metric in case_notes]
    if header is None:
        raise ValueError("manifest lists no cases")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for rec in records:
            fh.write(",".join(rec[h] if h in ("case_id", "model_id", "region") else
                              str(rec[h]) if h in ("shift", "n_voxels") else _fmt(rec[h])
                              for h in header) + "\n")
    stem = out.with_suffix("")
    for region, reps in reports.items():
        text = cal.render_reliability_csv(cal.merge_reports(reps), args.min_count)
        Path(f"{stem}.reliability.{region}.csv").write_text(text)
    _dump_json({"warnings": notes}, f"{stem}.warnings.json", WARNINGS_SCHEMA)
    metrics = [h for h in header if h not in ("case_id", "model_id", "region", "shift", "n_voxels")]
    boot = BootstrapConfig(resamples=args.resamples, seed=args.seed or 0)
    with open(f"{stem}.summary.csv", "w", newline="") as fh:
        fh.write(",".join(SUMMARY_HEADER) + "\n")
        for region, metric, n, mean, lo, hi in summarize(records, metrics, boot):
            fh.write(f"{region},{metric},{n},{_fmt(mean)},{_fmt(lo)},{_fmt(hi)}\n")
    return 0


# -- sweep -------------------------------------------------------------------

def cmd_sweep(args) -> int:
    models = [tn.load_checkpoint(p) for p in _checkpoint_paths(args.checkpoints)]
    cases = load_cases(args.manifest)
    preds = [[tn.forward(m, f) for _, f, _ in cases] for m in models]
    truths = [y for _, _, y in cases]
    if args.sizes:
        cfg = EnsembleConfig(len(models), tuple(args.sizes), args.repeats, args.seed)
    else:
        cfg = EnsembleConfig.truncated(len(models), DEFAULT_SIZES, repeats=args.repeats, seed=args.seed)
    boot = BootstrapConfig(resamples=args.resamples, seed=args.seed)
    res = m_sweep(preds, truths, cfg, args.metric, args.region, boot)
    Path(args.out).write_text(sweep_csv(res.rows))
    return 0


# -- correlate ---------------------------------------------------------------

def read_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_correlate(args) -> int:
    rows = [r for r in read_records(args.records) if r["region"] == args.region]
    dcol, ecol = f"dice_{args.class_id}", f"mean_entropy_{args.class_id}"
    if rows and (dcol not in rows[0] or ecol not in rows[0]):
        raise ValueError(f"records have no columns for class {args.class_id}")
    usable = [r for r in rows if r[dcol] != "" and r[ecol] != ""]
    pairs = [(float(r[ecol]), float(r[dcol])) for r in usable]
    res = correlate(pairs, args.clamp_eps)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        fh.write(",".join(CORRELATION_HEADER) + "\n")
        fh.write(f"{res.n},{_fmt(res.r)},{_fmt(res.p_value)},{_fmt(res.slope)},"
                 f"{_fmt(res.intercept)},{_fmt(res.clamp_eps)}\n")
    scatter = Path(args.scatter) if args.scatter else out.with_suffix("").with_suffix(".scatter.csv")
    with open(scatter, "w", newline="") as fh:
        fh.write(",".join(SCATTER_HEADER) + "\n")
        for r, (e, d) in zip(usable, pairs):
            fh.write(f"{r['case_id']},{_fmt(e)},{_fmt(logit(d, args.clamp_eps))},{r['shift']}\n")
    return 0


# -- parser ------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _real_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_nonneg_int, help="master seed (required for seeded commands)")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker threads")
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--config", help="JSON file supplying defaults for any flag")

    parser = argparse.ArgumentParser(prog="segcal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a phantom dataset and manifest")
    p.add_argument("--preset", choices=sorted(ph.PRESETS), default="medium")
    p.add_argument("--count", type=_nonneg_int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--shape", choices=ph.SHAPES)
    p.add_argument("--in-channels", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train ensemble members")
    p.add_argument("manifest")
    p.add_argument("--val", help="validation manifest (default: hold out the tail of MANIFEST)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--loss", choices=("ce", "dsc"), default="ce")
    p.add_argument("--members", type=_positive_int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--head", choices=tn.HEADS, default="softmax")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--epochs", type=_positive_int, default=tn.TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=tn.TrainConfig.lr)
    p.add_argument("--batch-size", type=_positive_int, default=tn.TrainConfig.batch_size)
    p.add_argument("--weight-mode", choices=("inverse-frequency", "uniform", "explicit"))
    p.add_argument("--class-weights", type=_real_list)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write probability volumes")
    p.add_argument("checkpoints", nargs="+", help="TOYM1 files or directories of them")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("single", "ensemble", "mcdo"), default="single")
    p.add_argument("--samples", type=_positive_int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="per-case metric records")
    p.add_argument("predictions", help="directory of <case_id>.pred.segv files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--region", choices=("whole", "box", "both"), default="both")
    p.add_argument("--bins", type=_positive_int, default=cal.DEFAULT_BINS)
    p.add_argument("--min-count", type=_nonneg_int, default=0)
    p.add_argument("--renormalize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--resamples", type=_positive_int, default=100)
    p.add_argument("--model-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="ensemble-size sweep table")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.add_argument("--metric", choices=("nll", "brier", "ece", "dice"), default="nll")
    p.add_argument("--region", choices=("whole", "box"), default="box")
    p.add_argument("--resamples", type=_positive_int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("correlate", parents=[common], help="entropy vs logit-Dice correlation")
    p.add_argument("records", help="CSV written by evaluate")
    p.add_argument("--class-id", type=_positive_int, default=1)
    p.add_argument("--region", choices=("whole", "box"), default="whole")
    p.add_argument("--clamp-eps", type=float, default=DEFAULT_LOGIT_EPS)
    p.add_argument("--scatter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)
    return parser


def _subparser(parser, name):
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[name]


def load_config(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    return raw


def apply_config(parser, argv):
    """Fold ``--config`` values into the subcommand defaults, then parse; flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    if known.config and command is not None:
        try:
            raw = load_config(known.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        try:
            sp = _subparser(parser, command)
        except KeyError:
            return parser.parse_args(argv)
        section = raw.get(command, {})
        flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        merged = {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}
        actions = {a.dest: a for a in sp._actions if a.option_strings}
        unknown = sorted(set(merged) - set(actions))
        if unknown:
            parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
        for dest, value in merged.items():
            action = actions[dest]
            if dest == "config":
                continue
            if action.choices is not None and value not in action.choices:
                parser.error(f"config {dest}={value!r} is not one of {list(action.choices)}")
            if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
                try:
                    value = action.type(str(value)) if action.type in (_real_list, _int_list) else action.type(value)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    parser.error(f"config {dest}: {exc}")
            action.required = False
            sp.set_defaults(**{dest: value})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = apply_config(parser, argv)
    if args.command in SEEDED_COMMANDS and args.seed is None:
        parser.error(f"--seed is required for {args.command}")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError, jsonschema.ValidationError, json.JSONDecodeError) as exc:
        print(f"segcal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
