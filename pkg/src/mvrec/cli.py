"""Command-line entry point: ``mvrec <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure
(including diverged training runs).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness
from . import models as mz
from .eals import load_factors  # noqa: F401  (re-exported for scripting)
from .metrics import MetricSummary, write_metric_rows
from .synth import SpecError, SyntheticSpec, generate
from .views import ValidationError

log = logging.getLogger("mvrec")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class CLIError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError(f"bad seed list {text!r}", EXIT_INVALID) from None


def _load_config(path, data):
    doc = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    doc["data"] = data
    return harness.ExperimentConfig.from_dict(doc)


def _config_from_meta(meta, data, k="auto"):
    cfg = harness.ExperimentConfig(data=data, k=k)
    cfg.T = meta["settings"]["T"]
    cfg.d_r = meta["settings"]["d_r"]
    cfg.rnd_seed = meta["settings"]["rnd_seed"]
    cfg.eals = dict(meta["settings"]["eals"])
    return cfg


# ---------------------------------------------------------------- subcommands

def cmd_generate(args):
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    generate(spec, args.out)
    print(os.path.abspath(args.out))


def cmd_train(args):
    cfg = _load_config(args.config, args.data)
    if args.model != "all":
        cfg.kinds = [args.model]
    if args.seeds:
        cfg.seeds = _seeds(args.seeds)
    if args.epochs:
        cfg.epochs = {k: args.epochs for k in mz.KINDS}
    cfg.validate()
    prepared = harness.prepare(cfg)
    report = harness.run_experiment(cfg, prepared, keep_models=True)
    os.makedirs(args.out, exist_ok=True)
    for (kind, seed), model in sorted(report.models.items(), key=lambda kv: (mz.KINDS.index(kv[0][0]), kv[0][1])):
        meta = {"kind": kind, "seed": seed, "dataset": prepared.dataset.name, "settings": prepared.settings}
        mz.save_checkpoint(model, os.path.join(args.out, f"{kind}-seed{seed}.npz"), meta)
    harness.save_report(report, os.path.join(args.out, "report.json"))
    harness.emit_report(report, "csv", args.out)
    with open(os.path.join(args.out, "params.csv"), "w", encoding="utf-8") as fh:
        fh.write(harness.params_csv([(k, report.param_counts[k]) for k in cfg.kinds]))
    sys.stdout.write(harness.metrics_markdown(report))
    if any(report.failed.values()):
        raise CLIError(f"diverged runs: {report.failed}", EXIT_RUNTIME)


def cmd_eval(args):
    model, meta = mz.load_checkpoint(args.checkpoint)
    cfg = _config_from_meta(meta, args.data, args.k)
    prepared = harness.prepare(cfg)
    if prepared.n != model.config.n:
        raise CLIError(f"checkpoint expects {model.config.n} products, data has {prepared.n}", EXIT_INVALID)
    res = harness.evaluate(model, prepared.test, (prepared.k_large, prepared.k_small))
    rows = [(model.config.kind, prepared.dataset.name, MetricSummary(m, K, v, 0.0, 1))
            for (m, K), v in res.items()]
    write_metric_rows(sys.stdout, rows)


def cmd_views_eval(args):
    cfg = harness.ExperimentConfig(data=args.data)
    prepared = harness.prepare(cfg)
    table = harness.view_quality_eval(prepared, list(range(args.seeds)), args.epochs, cfg)
    K = prepared.k_large
    lines = [f"| view | HR@{K} | NDCG@{K} |", "|---|---|---|"]
    for label, hr, nd in table:
        lines.append(f"| {label} | {harness.fmt_pm(hr)} | {harness.fmt_pm(nd)} |" if hr else f"| {label} | failed | failed |")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_attention(args):
    model, meta = mz.load_checkpoint(args.checkpoint)
    if model.config.kind != "mv-afm":
        raise CLIError("attention report needs an mv-afm checkpoint", EXIT_INVALID)
    prepared = harness.prepare(_config_from_meta(meta, args.data))
    pairs = harness.attention_report(model, prepared, args.n_samples)
    sys.stdout.write(harness.attention_csv(pairs))


def cmd_params(args):
    cfg = _load_config(args.config, args.data)
    prepared = harness.prepare(cfg)
    sys.stdout.write(harness.params_csv(harness.param_table(prepared, cfg)))


def cmd_report(args):
    report = harness.load_report(os.path.join(args.indir, "report.json"))
    paths = harness.emit_report(report, args.format, args.indir)
    with open(paths[0], encoding="utf-8") as fh:
        sys.stdout.write(fh.read())


def build_parser():
    p = argparse.ArgumentParser(prog="mvrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a planted synthetic dataset")
    g.add_argument("--spec", help="JSON file of SyntheticSpec fields (default spec if omitted)")
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate models over seeds")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--model", default="all", choices=[*mz.KINDS, "all"])
    t.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    t.add_argument("--epochs", type=int, help="epochs for every kind (default 50 baseline, 10 others)")
    t.add_argument("--config", help="JSON file of experiment settings")
    t.add_argument("--out", required=True, help="directory for checkpoints and reports")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out targets")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", default="auto", help="'auto' or K_large,K_small")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("views-eval", help="single-view quality table")
    v.add_argument("--data", required=True)
    v.add_argument("--seeds", type=int, default=10, help="number of seeds")
    v.add_argument("--epochs", type=int, default=20)
    v.add_argument("--out", help="also write the table to this file")
    v.set_defaults(func=cmd_views_eval)

    a = sub.add_parser("attention", help="mean view-level attention of an mv-afm checkpoint")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--n-samples", type=int, default=1000)
    a.set_defaults(func=cmd_attention)

    pr = sub.add_parser("params", help="trainable parameter count per model kind")
    pr.add_argument("--data", required=True)
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_params)

    r = sub.add_parser("report", help="render a saved training report")
    r.add_argument("--in", dest="indir", required=True, help="directory written by train")
    r.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except CLIError as exc:
        print(f"mvrec: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, SpecError, mz.ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"mvrec: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, ArithmeticError) as exc:
        print(f"mvrec: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
