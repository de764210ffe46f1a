"""Experiment runner: data preparation, training, evaluation and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import eals
from . import models as mz
from . import tensor as tn
from .metrics import (MetricSummary, aggregate_runs, choose_k, hr_at_k, ndcg_at_k,
                      target_ranks, write_metric_rows)
from .optim import make_optimizer
from .rng import derive
from .synth import interaction_matrix
from .views import STATIC_VIEWS, assemble_arrays, load_dataset, split_leave_last_out

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"baseline": 50, "mv-dnn": 10, "tdssm": 10, "mv-afm": 10}
DEFAULT_VIEWS = {
    "baseline": list(mz.BASELINE_VIEWS),
    "mv-dnn": list(STATIC_VIEWS),
    "tdssm": ["3d", *STATIC_VIEWS],
    "mv-afm": ["3d", *STATIC_VIEWS],
}
QUALITY_VIEWS = (("random", "rnd"), ("sessions", "3d"), ("cd", "cd"), ("cr", "cr"), ("ct", "ct"), ("uv", "uv"))
METRICS = ("HR", "NDCG")


class DivergenceError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    data: str
    kinds: list = field(default_factory=lambda: list(mz.KINDS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: dict = field(default_factory=lambda: dict(DEFAULT_EPOCHS))
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    model: dict = field(default_factory=dict)
    k: object = "auto"
    views: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_VIEWS.items()})
    T: int = 8
    d_r: int = 16
    rnd_seed: int = 0
    eals: dict = field(default_factory=lambda: dict(k=32, lam=0.1, w_obs=1.0, c0=0.01, sweeps=30, seed=0))
    cache_factors: bool = True

    def validate(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for kind in self.kinds:
            if kind not in mz.KINDS:
                raise ValueError(f"unknown model kind {kind!r}")
            if int(self.epochs.get(kind, 0)) < 1:
                raise ValueError(f"epochs for {kind} must be >= 1")
            if kind == "mv-dnn" and "3d" in self.views.get(kind, []):
                raise ValueError("mv-dnn cannot take the session view")
        if self.batch_size < 1 or self.lr < 0:
            raise ValueError("batch_size must be >= 1 and lr >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "epochs" in d and isinstance(d["epochs"], int):
            d["epochs"] = {k: d["epochs"] for k in mz.KINDS}
        base = cls(data=d.pop("data"))
        for key, val in d.items():
            if not hasattr(base, key):
                raise ValueError(f"unknown experiment setting {key!r}")
            if key in ("epochs", "views", "eals") and isinstance(val, dict):
                merged = dict(getattr(base, key))
                merged.update(val)
                val = merged
            setattr(base, key, val)
        return base


# ---------------------------------------------------------------- data

@dataclass
class Prepared:
    dataset: object
    split: object
    latent: dict
    train: object
    test: object
    k_large: int
    k_small: int
    settings: dict

    @property
    def n(self):
        return self.dataset.n


def fit_user_factors(dataset, params, cache=True):
    """Latent user vectors from eALS on history events (targets held out)."""
    params = dict(params)
    path = os.path.join(dataset.path, "factors.json") if cache and dataset.path else None
    if path and os.path.exists(path):
        k, users, meta = eals.load_factors(path)
        if meta == params:
            return users
    R, users = interaction_matrix(dataset, holdout_last=True)
    model = eals.eals_fit(R, k=params["k"], lam=params["lam"], w_obs=params["w_obs"], c0=params["c0"],
                          sweeps=params["sweeps"], seed=params["seed"], track=False)
    P = eals.latent_user_vectors(model)
    if path:
        eals.save_factors(path, users, P, meta=params)
    return {u: P[i] for i, u in enumerate(users)}


def resolve_k(policy, n):
    if policy in (None, "auto"):
        return choose_k(n)
    if isinstance(policy, str):
        policy = [int(v) for v in policy.split(",")]
    kl, ks = (int(v) for v in policy)
    if kl < 1 or ks < 1:
        raise ValueError("K values must be >= 1")
    return kl, ks


def prepare(config, dataset=None):
    ds = dataset or load_dataset(config.data)
    split = split_leave_last_out(ds.log)
    latent = fit_user_factors(ds, config.eals, config.cache_factors)
    k = int(config.eals["k"])
    train = assemble_arrays(split.train, ds, latent, config.T, config.d_r, config.rnd_seed, k)
    test = assemble_arrays(split.test, ds, latent, config.T, config.d_r, config.rnd_seed, k)
    kl, ks = resolve_k(config.k, ds.n)
    settings = {"T": config.T, "d_r": config.d_r, "rnd_seed": config.rnd_seed, "eals": dict(config.eals)}
    return Prepared(ds, split, latent, train, test, kl, ks, settings)


def model_config(prepared, kind, views, overrides=None):
    dims = prepared.train.dims()
    overrides = dict(overrides or {})
    per_kind = overrides.pop(kind, None) if kind in overrides else None
    overrides = {k: v for k, v in overrides.items() if k not in mz.KINDS}
    if per_kind:
        overrides.update(per_kind)
    cfg = mz.ModelConfig(kind=kind, n=prepared.n,
                         views=[(v, 0 if v == "3d" else dims[v]) for v in views],
                         T=prepared.settings["T"], **overrides)
    return cfg.validate()


# ---------------------------------------------------------------- train / evaluate

def train_model(model, arrays, epochs, seed, batch_size=64, lr=1e-3, optimizer="adam", momentum=0.9):
    """Minibatch softmax cross-entropy training; returns per-epoch mean loss."""
    opt = make_optimizer(optimizer, model.parameters(), lr, momentum)
    order_rng = derive(seed, "minibatch", model.config.kind)
    N = len(arrays)
    history = []
    for ep in range(epochs):
        perm = order_rng.permutation(N)
        total = 0.0
        for s in range(0, N, batch_size):
            batch = arrays.take(perm[s:s + batch_size])
            logits, _ = model.forward(batch)
            loss = tn.cross_entropy(logits, batch.targets)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise DivergenceError(f"non-finite loss in epoch {ep + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += lv * len(batch)
        history.append(total / N)
        log.debug("%s epoch %d loss %.5f", model.config.kind, ep + 1, history[-1])
    return history


def evaluate(model, arrays, ks):
    logits, _ = mz.predict(model, arrays)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits at evaluation")
    ranks = target_ranks(logits, arrays.targets)
    out = {}
    for K in ks:
        out[("HR", K)] = hr_at_k(ranks, K)
        out[("NDCG", K)] = ndcg_at_k(ranks, K)
    return out


@dataclass
class RunResult:
    kind: str
    seed: int
    ok: bool
    metrics: dict
    n_params: int
    seconds: float
    attention: list = None
    error: str = ""
    model: object = None


def run_single(prepared, kind, views, seed, epochs, config, keep_model=False, n_attention=1000):
    cfg = model_config(prepared, kind, views, config.model)
    model = mz.build_model(cfg, derive(seed, "init", kind))
    t0 = time.perf_counter()
    try:
        train_model(model, prepared.train, epochs, seed, config.batch_size, config.lr,
                    config.optimizer, config.momentum)
        metrics = evaluate(model, prepared.test, (prepared.k_large, prepared.k_small))
        att = attention_report(model, prepared, n_attention) if kind == "mv-afm" else None
        ok, err = True, ""
    except DivergenceError as exc:
        metrics, att, ok, err = {}, None, False, str(exc)
        log.warning("%s seed %d diverged: %s", kind, seed, exc)
    secs = time.perf_counter() - t0
    log.info("%s seed %d done in %.1fs %s", kind, seed, secs,
             " ".join(f"{m}@{k}={v:.2f}" for (m, k), v in sorted(metrics.items())))
    return RunResult(kind, seed, ok, metrics, mz.parameter_count(model), secs, att, err,
                     model if keep_model else None)


_WORKER = {}


def _worker_init(prepared, config):
    _WORKER["prepared"], _WORKER["config"] = prepared, config


def _worker_run(job):
    kind, views, seed, epochs = job
    r = run_single(_WORKER["prepared"], kind, views, seed, epochs, _WORKER["config"])
    return r


def _threads():
    try:
        return max(1, int(os.environ.get("MVREC_THREADS", "1")))
    except ValueError:
        return 1


def _run_jobs(prepared, config, jobs, keep_models=False):
    workers = _threads()
    if workers == 1 or len(jobs) == 1 or keep_models:
        return [run_single(prepared, *job, config, keep_model=keep_models) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(prepared, config)) as ex:
        return list(ex.map(_worker_run, jobs))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    dataset: str
    rows: list
    failed: dict
    configured: dict
    param_counts: dict
    attention: list = None
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "rows": [[m, asdict(s)] for m, s in self.rows],
            "failed": self.failed,
            "configured": self.configured,
            "param_counts": self.param_counts,
            "attention": self.attention,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dataset"], [(m, MetricSummary(**s)) for m, s in d["rows"]], d["failed"],
                   d["configured"], d["param_counts"], d.get("attention"))

    def summary(self, kind, metric, K):
        for m, s in self.rows:
            if m == kind and s.metric == metric and s.K == K:
                return s
        raise KeyError((kind, metric, K))


def summarise(dataset_name, results, kinds, seeds, ks):
    rows, failed, params, timings = [], {}, {}, {}
    ks = tuple(dict.fromkeys(ks))  # K_large == K_small on tiny catalogues
    att_runs = []
    for kind in kinds:
        rs = [r for r in results if r.kind == kind]
        ok = [r for r in rs if r.ok]
        failed[kind] = len(rs) - len(ok)
        params[kind] = rs[0].n_params if rs else None
        timings[kind] = [r.seconds for r in rs]
        if kind == "mv-afm":
            att_runs = [r.attention for r in ok if r.attention]
        if not ok:
            continue
        for metric in METRICS:
            for K in ks:
                rows.append((kind, aggregate_runs([r.metrics[(metric, K)] for r in ok], metric, K)))
    attention = None
    if att_runs:
        labels = [lab for lab, _ in att_runs[0]]
        mean = np.mean([[p for _, p in run] for run in att_runs], axis=0)
        attention = [[lab, float(p)] for lab, p in zip(labels, mean)]
    configured = {kind: len(seeds) for kind in kinds}
    return EvalReport(dataset_name, rows, failed, configured, params, attention, timings)


def run_experiment(config, prepared=None, keep_models=False):
    """Train and evaluate every (kind, seed); aggregate over seeds.

    Runs are reduced in (kind, seed) order regardless of parallelism.
    Diverged runs are excluded from the summaries and counted in ``failed``.
    """
    config.validate()
    prepared = prepared or prepare(config)
    jobs = [(kind, config.views.get(kind, DEFAULT_VIEWS[kind]), int(seed), int(config.epochs[kind]))
            for kind in config.kinds for seed in config.seeds]
    results = _run_jobs(prepared, config, jobs, keep_models)
    report = summarise(prepared.dataset.name, results, config.kinds, config.seeds,
                       (prepared.k_large, prepared.k_small))
    if keep_models:
        report.models = {(r.kind, r.seed): r.model for r in results if r.ok}
    return report


def view_quality_eval(prepared, seeds, epochs, config=None):
    """Single-view networks, one per view; HR/NDCG at the large cut-off.

    Static views all use the same MLP; the session view uses the 3D-CNN.
    Returns rows ``(view, hr_summary, ndcg_summary)``.
    """
    config = config or ExperimentConfig(data=prepared.dataset.path)
    K = prepared.k_large
    jobs = []
    for _, v in QUALITY_VIEWS:
        kind = "tdssm" if v == "3d" else "mv-dnn"
        jobs += [(kind, [v], int(s), int(epochs)) for s in seeds]
    results = _run_jobs(prepared, config, jobs)
    table = []
    for label, v in QUALITY_VIEWS:
        rs = [r for r, job in zip(results, jobs) if job[1] == [v] and r.ok]
        if not rs:
            table.append((label, None, None))
            continue
        table.append((label, aggregate_runs([r.metrics[("HR", K)] for r in rs], "HR", K),
                      aggregate_runs([r.metrics[("NDCG", K)] for r in rs], "NDCG", K)))
    return table


def attention_report(model, prepared, n_samples=1000):
    """Mean view-level attention (percent) over ``n_samples`` test predictions."""
    if model.config.kind != "mv-afm":
        raise mz.UnsupportedError("attention report needs an mv-afm model")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    idx = np.arange(n_samples) % len(prepared.test)
    _, alpha = mz.predict(model, prepared.test.take(idx))
    pct = 100.0 * alpha.mean(axis=0)
    return [(lab, float(p)) for lab, p in zip(mz.interaction_labels(model.config.view_names), pct)]


def param_table(prepared, config):
    rows = []
    for kind in mz.KINDS:
        cfg = model_config(prepared, kind, config.views.get(kind, DEFAULT_VIEWS[kind]), config.model)
        rows.append((kind, mz.expected_parameter_count(cfg)))
    return rows


# ---------------------------------------------------------------- emission

def fmt_pm(s):
    return f"{s.mean:.2f} ± {s.std:.2f}"


def metrics_markdown(report):
    lines = ["| model | metric | K | mean | std | n_runs |", "|---|---|---|---|---|---|"]
    for m, s in report.rows:
        lines.append(f"| {m} | {s.metric} | {s.K} | {s.mean:.4f} | {s.std:.4f} | {s.n_runs} |")
    return "\n".join(lines) + "\n"


def attention_csv(pairs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "percent"])
    for lab, p in pairs:
        w.writerow([lab, repr(float(p))])
    return buf.getvalue()


def params_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "parameters"])
    for kind, count in rows:
        w.writerow([kind, count])
    return buf.getvalue()


def emit_report(report, fmt, out_dir):
    """Write the report tables into ``out_dir``; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if fmt == "csv":
        p = os.path.join(out_dir, "metrics.csv")
        write_metric_rows(p, [(m, report.dataset, s) for m, s in report.rows])
        paths.append(p)
    elif fmt == "markdown":
        p = os.path.join(out_dir, "metrics.md")
        body = [f"# {report.dataset}\n", metrics_markdown(report)]
        body.append("\n| model | parameters | failed runs |\n|---|---|---|\n")
        for kind, count in report.param_counts.items():
            body.append(f"| {kind} | {count} | {report.failed.get(kind, 0)} |\n")
        if report.attention:
            body.append("\n| view | attention % |\n|---|---|\n")
            body.extend(f"| {lab} | {p:.2f} |\n" for lab, p in report.attention)
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("".join(body))
        paths.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if report.attention:
        p = os.path.join(out_dir, "attention.csv")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(attention_csv(report.attention))
        paths.append(p)
    return paths


def save_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
