"""ramen: generate data, train, evaluate, run the variant grid, check gradients, render reports.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datasets import COLORS, SHAPES, GenConfig, GenerationError, generate_toy_dataset, load_dataset, save_dataset
from .fusion import DimensionError, FusionKind
from .metrics import write_predictions, score
from .model import VARIANTS, AggregationKind, PipelineError, RamenModel, load_checkpoint, save_checkpoint
from .training import (
    DivergenceError, GridConfig, fit, grad_check_variants, make_model_config, predict_examples,
    report_from_logs, run_grid,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# Per-command defaults. Flags default to None so that an explicit flag can be
# told apart from a config-file value; these fill whatever is still unset.
DEFAULTS = {
    "gen-data": dict(seed=0, out=None, dv=16, regions=6, split="iid", holdout="red:cylinder",
                     n_train=2000, n_val=200, n_test=400, noise=0.1, annotators=False,
                     annotator_p=0.9, metric=None, name=None, cp_threshold=0.3),
    "train": dict(seed=0, out=None, data=None, dq=None, dv=None, regions=None, fusion="concat",
                  late_fusion=None, aggregation="bigru", epochs=25, batch_size=32, lr=2e-3,
                  agg_hidden=16, transformer_layers=1, transformer_heads=2,
                  positional_encoding=False, eval_split="test"),
    "eval": dict(seed=0, out=None, checkpoint=None, data=None, split="test", batch_size=256),
    "grid": dict(seed=0, out=None, data=None, dq=None, epochs=25, transformer_epochs=None,
                 batch_size=32, lr=2e-3, agg_hidden=16, workers=1, fusion=None, aggregation=None),
    "grad-check": dict(seed=0, out=None, fusion=None, aggregation=None, eps=1e-5, tol=1e-4),
    "report": dict(seed=0, out=None, logs=None),
}

PRESETS = {"tiny"}


def _add(p: argparse.ArgumentParser, cmd: str, *names, help: str = "", **kw):
    dest = names[0].lstrip("-").replace("-", "_")
    default = DEFAULTS[cmd].get(dest)
    shown = "none" if default is None else default
    p.add_argument(*names, dest=dest, default=None, help=f"{help} (default: {shown})", **kw)


def _shared(p, cmd, *flags):
    table = {
        "seed": dict(type=int, help="random seed"),
        "out": dict(help="output directory or file"),
        "dq": dict(type=int, help="question embedding size; auto = dv for additive/multiplicative, dv/2 otherwise"),
        "dv": dict(type=int, help="region feature size"),
        "regions": dict(type=int, help="regions per image"),
        "fusion": dict(help="fusion kind: concat|additive|multiplicative|question (early and late)"),
        "aggregation": dict(help="aggregation: bigru|transformer"),
        "epochs": dict(type=int, help="training epochs"),
        "batch_size": dict(type=int, help="mini-batch size"),
        "lr": dict(type=float, help="base learning rate (linear warmup over 4 epochs)"),
    }
    for f in flags:
        kw = dict(table[f])
        _add(p, cmd, "--" + f.replace("_", "-"), **kw)
    _add(p, cmd, "--config", help="key:value config file (flags override it); grad-check also accepts 'tiny'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramen", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _shared(p, "gen-data", "seed", "out", "dv", "regions")
    _add(p, "gen-data", "--split", choices=["iid", "cogent", "cp"], help="split kind")
    _add(p, "gen-data", "--holdout", help="comma-separated color:shape pairs held out of train (cogent)")
    _add(p, "gen-data", "--n-train", type=int, help="training examples")
    _add(p, "gen-data", "--n-val", type=int, help="validation examples")
    _add(p, "gen-data", "--n-test", type=int, help="test examples")
    _add(p, "gen-data", "--noise", type=float, help="gaussian noise sigma of the filler feature dims")
    _add(p, "gen-data", "--annotators", action="store_const", const=True, help="emit 10 annotator answers")
    _add(p, "gen-data", "--annotator-p", type=float, help="probability an annotator answers correctly")
    _add(p, "gen-data", "--metric", choices=["vqa10", "simple", "mean_per_type"],
         help="declared evaluation metric; none = vqa10 with annotators, else simple")
    _add(p, "gen-data", "--name", help="dataset name; none = output directory name")
    _add(p, "gen-data", "--cp-threshold", type=float, help="minimum train/test answer TV distance (cp)")

    p = sub.add_parser("train", help="train one model variant")
    _shared(p, "train", "seed", "out", "dq", "dv", "regions", "fusion", "aggregation", "epochs", "batch_size", "lr")
    _add(p, "train", "--data", help="dataset directory")
    _add(p, "train", "--late-fusion", help="late fusion kind; none = same as --fusion")
    _add(p, "train", "--agg-hidden", type=int, help="aggregation hidden size (output is twice this)")
    _add(p, "train", "--transformer-layers", type=int, help="encoder layers")
    _add(p, "train", "--transformer-heads", type=int, help="attention heads")
    _add(p, "train", "--positional-encoding", action="store_const", const=True,
         help="add learned region position embeddings")
    _add(p, "train", "--eval-split", choices=["val", "test"], help="split scored each epoch")

    p = sub.add_parser("eval", help="predict a split with a checkpoint and score it")
    _shared(p, "eval", "seed", "out", "batch_size")
    _add(p, "eval", "--checkpoint", help="checkpoint file")
    _add(p, "eval", "--data", help="dataset directory")
    _add(p, "eval", "--split", choices=["train", "val", "test"], help="split to evaluate")

    p = sub.add_parser("grid", help="train all eight variants on each dataset")
    _shared(p, "grid", "seed", "out", "dq", "fusion", "aggregation", "epochs", "batch_size", "lr")
    _add(p, "grid", "--data", help="comma-separated dataset directories")
    _add(p, "grid", "--transformer-epochs", type=int, help="epochs for transformer variants; none = --epochs")
    _add(p, "grid", "--agg-hidden", type=int, help="aggregation hidden size")
    _add(p, "grid", "--workers", type=int, help="parallel training processes")

    p = sub.add_parser("grad-check", help="finite-difference check of the full pipeline")
    _shared(p, "grad-check", "seed", "out", "fusion", "aggregation")
    _add(p, "grad-check", "--eps", type=float, help="central-difference step")
    _add(p, "grad-check", "--tol", type=float, help="max relative error")

    p = sub.add_parser("report", help="render the results table from run logs")
    _shared(p, "report", "seed", "out")
    _add(p, "report", "--logs", help="comma-separated run-log files or directories")
    return parser


def _read_config_file(path: str, cmd: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition(":")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key:value")
        if key not in DEFAULTS[cmd]:
            raise UsageError(f"{path}:{n}: unknown key {key!r} for {cmd}")
        out[key] = val.strip()
    return out


def _coerce(cmd: str, key: str, raw: str):
    default = DEFAULTS[cmd][key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if key in ("dq", "dv", "regions", "transformer_epochs"):
        return int(raw)
    return raw


def resolve(args: argparse.Namespace) -> dict:
    """Flags > config file > defaults."""
    cmd = args.command
    opts = dict(DEFAULTS[cmd])
    preset = None
    if args.config:
        if args.config in PRESETS and not Path(args.config).exists():
            preset = args.config
        else:
            try:
                for k, v in _read_config_file(args.config, cmd).items():
                    opts[k] = _coerce(cmd, k, v)
            except ValueError as exc:
                raise UsageError(f"bad value in {args.config}: {exc}") from None
    for k in DEFAULTS[cmd]:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    opts["preset"] = preset
    return opts


def _need(opts, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _parse_holdout(text: str) -> list[tuple[str, str]]:
    pairs = []
    for item in text.split(","):
        color, sep, shape = item.strip().partition(":")
        if not sep or color not in COLORS or shape not in SHAPES:
            raise UsageError(f"bad --holdout pair {item!r}; expected color:shape with color in "
                             f"{'/'.join(COLORS)} and shape in {'/'.join(SHAPES)}")
        pairs.append((color, shape))
    return pairs


# ---------------------------------------------------------------- commands

def cmd_gen_data(o) -> int:
    _need(o, "out")
    out = Path(o["out"])
    try:
        cfg = GenConfig(
            name=o["name"] or out.resolve().name, n_train=o["n_train"], n_val=o["n_val"],
            n_test=o["n_test"], regions=o["regions"], dv=o["dv"], noise=o["noise"], split=o["split"],
            holdout=_parse_holdout(o["holdout"]), cp_threshold=o["cp_threshold"],
            annotators=bool(o["annotators"]), annotator_p=o["annotator_p"], metric=o["metric"],
        )
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_toy_dataset(cfg, o["seed"])
    counts = save_dataset(ds, out)
    print(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items())
          + f" (split={cfg.split}, metric={cfg.metric})")
    return EXIT_OK


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise OSError(f"dataset not found: {exc.filename}") from None


def cmd_train(o) -> int:
    _need(o, "data", "out")
    try:
        fusion = FusionKind.parse(o["fusion"])
        late = FusionKind.parse(o["late_fusion"]) if o["late_fusion"] else fusion
        aggregation = AggregationKind.parse(o["aggregation"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if o["epochs"] < 0 or o["batch_size"] < 2 or o["lr"] <= 0:
        raise UsageError("need --epochs >= 0, --batch-size >= 2 and --lr > 0")
    ds = _load_data(o["data"])
    for key, have in (("dv", ds.dv), ("regions", ds.regions)):
        if o[key] is not None and o[key] != have:
            raise UsageError(f"--{key} {o[key]} does not match the dataset ({have})")
    try:
        cfg = make_model_config(
            ds, aggregation, fusion, late, dq=o["dq"], seed=o["seed"], agg_hidden=o["agg_hidden"],
            transformer_layers=o["transformer_layers"], transformer_heads=o["transformer_heads"],
            positional_encoding=bool(o["positional_encoding"]),
        )
    except (DimensionError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = RamenModel(cfg)
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        rec = fit(model, ds, o["epochs"], o["batch_size"], o["lr"], o["seed"], log_file=fh,
                  eval_split=o["eval_split"])
    save_checkpoint(model, out / "model.ckpt")
    (out / "summary.json").write_text(json.dumps(rec.summary(), indent=2) + "\n", encoding="utf-8")
    best = rec.best_test_score
    shown = "n/a" if best is None else f"{100 * best:.2f}"
    print(f"{cfg.variant} on {ds.name}: best {o['eval_split']} score {shown} (epoch {rec.best_epoch})")
    return EXIT_OK


def cmd_eval(o) -> int:
    _need(o, "checkpoint", "data", "out")
    model = load_checkpoint(o["checkpoint"])
    ds = _load_data(o["data"])
    examples = ds.split(o["split"])
    preds = predict_examples(model, examples, o["batch_size"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out / "predictions.csv")
    rep = score(ds.metric, preds, examples) if examples else None
    body = {"dataset": ds.name, "split": o["split"], "variant": model.config.variant,
            "metric": ds.metric, "overall": rep.overall if rep else None,
            "per_type": rep.per_type if rep else {}}
    (out / "report.json").write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    shown = "n/a" if rep is None else f"{100 * rep.overall:.2f}"
    print(f"{model.config.variant} on {ds.name}/{o['split']}: {ds.metric} {shown} ({len(preds)} predictions)")
    return EXIT_OK


def _variant_filter(o):
    try:
        fusions = [FusionKind.parse(o["fusion"])] if o.get("fusion") else list(FusionKind)
        aggs = [AggregationKind.parse(o["aggregation"])] if o.get("aggregation") else list(AggregationKind)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return [(a, f) for a, f in VARIANTS if a in aggs and f in fusions]


def cmd_grid(o) -> int:
    _need(o, "data", "out")
    datasets = [_load_data(p.strip()) for p in o["data"].split(",") if p.strip()]
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise UsageError(f"dataset names must be unique, got {names}")
    cfg = GridConfig(epochs=o["epochs"], transformer_epochs=o["transformer_epochs"],
                     batch_size=o["batch_size"], lr=o["lr"], seed=o["seed"], dq=o["dq"],
                     model={"agg_hidden": o["agg_hidden"]}, workers=o["workers"])
    report = run_grid(datasets, _variant_filter(o), cfg, o["out"])
    sys.stdout.write(report.to_tsv())
    for key, msg in report.failures.items():
        print(f"run {key[0]} / {key[1]} failed: {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(o) -> int:
    if o["preset"] not in (None, "tiny"):
        raise UsageError(f"unknown preset {o['preset']!r}")
    reports = grad_check_variants(_variant_filter(o), seed=o["seed"], eps=o["eps"], tol=o["tol"])
    failed = False
    for name, rep in reports.items():
        status = "ok" if rep.ok else "FAIL " + ",".join(rep.failures)
        failed |= not rep.ok
        print(f"{name:32s} max rel err {rep.worst:.3e}  {status}")
    worst = max(r.worst for r in reports.values())
    print(f"max rel err {worst:.3e} (tol {o['tol']:g}, eps {o['eps']:g})")
    if o["out"]:
        body = {n: r.max_rel_error for n, r in reports.items()}
        Path(o["out"]).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_report(o) -> int:
    _need(o, "logs")
    paths = []
    for item in o["logs"].split(","):
        p = Path(item.strip())
        if p.is_dir():
            paths.extend(sorted(p.rglob("*.jsonl")))
        elif p.exists():
            paths.append(p)
        else:
            raise OSError(f"no such log: {p}")
    paths = [p for p in paths if p.name != "runs.jsonl"]
    table = report_from_logs(paths)
    if o["out"]:
        Path(o["out"]).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "grid": cmd_grid, "grad-check": cmd_grad_check, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"ramen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else ""
        print(f"ramen {args.command}: diverged{where}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, PipelineError, GenerationError, ValueError) as exc:
        print(f"ramen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
