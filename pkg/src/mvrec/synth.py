"""Planted-structure synthetic datasets.

Products and users get latent Gaussian vectors. Every view is derived from
them: expert features are a noisy linear image of the product vector,
comparability is the rescaled cosine between product vectors, products
fall into disjoint vehicle classes that define compatibility, and session
events are drawn without replacement from the session's class with
probability proportional to ``exp(z_u . w_i / tau)``.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .eals import InteractionMatrix
from .rng import make_rng
from .views import ACTIONS


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_products: int = 300
    n_users: int = 2000
    n_sessions: int = 2500
    latent_dim: int = 8
    min_events: int = 3
    max_events: int = 10
    n_classes: int = 6
    feature_dim: int = 16
    feature_noise: float = 0.1
    temperature: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_products < 20:
            raise SpecError("n_products must be >= 20")
        if self.temperature <= 0:
            raise SpecError("temperature must be > 0")
        if not 1 <= self.n_classes <= self.n_products:
            raise SpecError("n_classes must be in [1, n_products]")
        if not 2 <= self.min_events <= self.max_events:
            raise SpecError("need 2 <= min_events <= max_events")
        if self.n_products // self.n_classes < self.max_events:
            raise SpecError("smallest vehicle class is smaller than max_events")
        if self.feature_dim < 1 or self.latent_dim < 1 or self.n_users < 1 or self.n_sessions < 1:
            raise SpecError("dimensions and counts must be positive")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class PlantedTruth:
    product_latent: np.ndarray
    user_latent: np.ndarray
    product_class: np.ndarray
    user_ids: list
    product_ids: list


def product_id(i):
    return f"p{i:05d}"


def user_id(u):
    return f"u{u:06d}"


def sample_without_replacement(logits, m, rng):
    """Draw ``m`` distinct indices, each step picking i with probability
    proportional to ``exp(logits[i])`` among those left; returned in draw order.

    Uses Gumbel top-k, which has exactly that sequential law.
    """
    keys = np.asarray(logits, dtype=np.float64) + rng.gumbel(size=len(logits))
    return np.argsort(-keys, kind="stable")[:m]


def _fmt(x):
    return repr(float(x))


def generate(spec, out_dir):
    """Write the five dataset files into ``out_dir``; return the planted truth."""
    spec.validate()
    rng = make_rng(spec.seed)
    n, k = spec.n_products, spec.latent_dim
    W = rng.standard_normal((n, k))
    Z = rng.standard_normal((spec.n_users, k))
    A = rng.standard_normal((spec.feature_dim, k))
    feats = W @ A.T + spec.feature_noise * rng.standard_normal((n, spec.feature_dim))

    unit = W / np.linalg.norm(W, axis=1, keepdims=True)
    S = np.clip((unit @ unit.T + 1.0) / 2.0, 0.0, 1.0)
    S = (S + S.T) / 2.0
    np.fill_diagonal(S, 1.0)

    perm = rng.permutation(n)
    cls = np.empty(n, dtype=np.int64)
    for c, chunk in enumerate(np.array_split(perm, spec.n_classes)):
        cls[chunk] = c
    members = [np.sort(np.flatnonzero(cls == c)) for c in range(spec.n_classes)]

    pids = [product_id(i) for i in range(n)]
    uids = [user_id(u) for u in range(spec.n_users)]
    os.makedirs(out_dir, exist_ok=True)

    sessions, compat_lines, used_users = [], [], set()
    for s in range(spec.n_sessions):
        u = int(rng.integers(spec.n_users))
        c = int(rng.integers(spec.n_classes))
        length = int(rng.integers(spec.min_events, spec.max_events + 1))
        cand = members[c]
        picked = cand[sample_without_replacement((W[cand] @ Z[u]) / spec.temperature, length, rng)]
        t = int(rng.integers(1_600_000_000, 1_700_000_000))
        gaps = rng.integers(1, 600, size=length)
        acts = rng.integers(len(ACTIONS), size=length)
        events = []
        for j in range(length):
            t += int(gaps[j])
            events.append({"t": t, "product_id": pids[picked[j]], "action": ACTIONS[acts[j]]})
        sid = f"s{s:06d}"
        sessions.append({"session_id": sid, "user_id": uids[u], "query_id": f"q{c}", "events": events})
        compat_lines.append({"session_id": sid, "compatible": [pids[i] for i in cand]})
        used_users.add(u)

    with open(os.path.join(out_dir, "products.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["product_id"] + [f"f{j}" for j in range(spec.feature_dim)])
        for i in range(n):
            w.writerow([pids[i]] + [_fmt(v) for v in feats[i]])
    with open(os.path.join(out_dir, "comparability.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(pids)
        for i in range(n):
            w.writerow([_fmt(v) for v in S[i]])
    with open(os.path.join(out_dir, "sessions.jsonl"), "w", encoding="utf-8") as fh:
        for rec in sessions:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    with open(os.path.join(out_dir, "compatibility.jsonl"), "w", encoding="utf-8") as fh:
        for rec in compat_lines:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    manifest = {"n_products": n, "n_sessions": spec.n_sessions, "n_users": len(used_users),
                "feature_dim": spec.feature_dim}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return PlantedTruth(W, Z, cls, uids, pids)


def spec_to_json(spec):
    return json.dumps(asdict(spec), indent=2, sort_keys=True)


def interaction_matrix(dataset, holdout_last=False):
    """Deduplicated (user, product) pairs from session events.

    Users are indexed in sorted user-id order (returned alongside). With
    ``holdout_last`` each session's final event is left out, so held-out
    targets never leak into factors fitted on the matrix.
    """
    users = dataset.log.users()
    uindex = {u: i for i, u in enumerate(users)}
    pairs = set()
    for s in dataset.log.sessions:
        prods = s.products[:-1] if holdout_last and len(s) >= 2 else s.products
        ui = uindex[s.user_id]
        pairs.update((ui, int(p)) for p in prods)
    R = InteractionMatrix.from_pairs(len(users), dataset.n, sorted(pairs))
    return R, users
