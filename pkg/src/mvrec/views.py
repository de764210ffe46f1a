"""Loading, validation and per-sample assembly of the five data views.

Views: ``3d`` (session history as a frame volume), ``uv`` (latent user
vector), ``cd`` (expert product features), ``cr`` (comparability row),
``ct`` (session compatibility mask), plus ``rnd``, a per-user random
control vector.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .rng import hash64, make_rng

log = logging.getLogger(__name__)

ACTIONS = ("view", "click", "compare", "redirect")
ACTION_WIDTH = len(ACTIONS) + 1  # last slot: unknown action
STATIC_VIEWS = ("uv", "cd", "cr", "ct")
ALL_VIEWS = ("3d",) + STATIC_VIEWS
FEATURE_STD_FLOOR = 1e-12


class ValidationError(ValueError):
    """Input data violates the dataset contract."""


def action_index(action):
    try:
        return ACTIONS.index(action)
    except ValueError:
        return len(ACTIONS)


# ---------------------------------------------------------------- catalog

@dataclass(frozen=True)
class ProductCatalog:
    ids: tuple
    index_of: dict
    expert_features: np.ndarray

    @property
    def n(self):
        return len(self.ids)

    @property
    def feature_dim(self):
        return self.expert_features.shape[1]


def standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < FEATURE_STD_FLOOR, np.inf, sd)
    return (X - mu) / sd


def load_catalog(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "product_id":
            raise ValidationError(f"{path}: header must start with product_id")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            ids.append(row[0])
    if not ids:
        raise ValidationError(f"{path}: no products")
    index_of = {}
    for i, pid in enumerate(ids):
        if pid in index_of:
            raise ValidationError(f"duplicate product_id {pid!r}")
        index_of[pid] = i
    X = np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{path}: non-finite expert feature")
    return ProductCatalog(tuple(ids), index_of, standardize(X))


# ---------------------------------------------------------------- sessions

@dataclass(frozen=True)
class Session:
    session_id: str
    user_id: str
    query_id: str
    times: np.ndarray
    products: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return int(self.products.size)


@dataclass
class SessionLog:
    sessions: list
    n_dropped_empty: int = 0
    n_short: int = 0

    def __len__(self):
        return len(self.sessions)

    def users(self):
        return sorted({s.user_id for s in self.sessions})


def load_sessions(path, catalog):
    sessions, dropped, short = [], 0, 0
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sid, uid, qid = str(rec["session_id"]), str(rec["user_id"]), str(rec.get("query_id", ""))
                raw = rec["events"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed session record ({exc})") from None
            if sid in seen_ids:
                raise ValidationError(f"{path}:{lineno}: duplicate session_id {sid!r}")
            seen_ids.add(sid)
            events = []
            for ev in raw:
                pid = str(ev["product_id"])
                if pid not in catalog.index_of:
                    raise ValidationError(f"{path}:{lineno}: unknown product_id {pid!r}")
                events.append((int(ev["t"]), catalog.index_of[pid], action_index(ev.get("action", ""))))
            if not events:
                dropped += 1
                continue
            # stable sort keeps file order among equal timestamps; first one wins
            events.sort(key=lambda e: e[0])
            kept = [events[0]]
            for e in events[1:]:
                if e[0] != kept[-1][0]:
                    kept.append(e)
            arr = np.asarray(kept, dtype=np.int64)
            if len(kept) < 2:
                short += 1
            sessions.append(Session(sid, uid, qid, arr[:, 0], arr[:, 1], arr[:, 2]))
    if dropped:
        log.warning("dropped %d empty sessions", dropped)
    return SessionLog(sessions, dropped, short)


# ---------------------------------------------------------------- comparability / compatibility

def load_comparability(path, catalog, atol=1e-9):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != catalog.ids:
            raise ValidationError(f"{path}: header must list product ids in catalog order")
        try:
            S = np.asarray([[float(v) for v in row] for row in reader if row], dtype=np.float64)
        except ValueError as exc:
            raise ValidationError(f"{path}: non-numeric similarity ({exc})") from None
    validate_comparability(S, catalog.n, atol)
    return S


def validate_comparability(S, n, atol=1e-9):
    if S.shape != (n, n):
        raise ValidationError(f"comparability matrix shape {S.shape}, expected {(n, n)}")
    if not np.all(np.isfinite(S)) or S.min() < 0.0 or S.max() > 1.0:
        raise ValidationError("comparability values must lie in [0, 1]")
    if not np.allclose(np.diag(S), 1.0, rtol=0.0, atol=atol):
        raise ValidationError("comparability diagonal must equal 1")
    if np.max(np.abs(S - S.T)) > atol:
        raise ValidationError("comparability matrix is not symmetric")


def load_compatibility(path, catalog):
    records = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            mask = np.zeros(catalog.n, dtype=bool)
            for pid in rec["compatible"]:
                if pid not in catalog.index_of:
                    raise ValidationError(f"{path}:{lineno}: unknown product_id {pid!r}")
                mask[catalog.index_of[pid]] = True
            if not mask.any():
                raise ValidationError(f"{path}:{lineno}: compatibility record has no product")
            records[str(rec["session_id"])] = mask
    return records


# ---------------------------------------------------------------- whole dataset

@dataclass
class Dataset:
    name: str
    catalog: ProductCatalog
    log: SessionLog
    S: np.ndarray
    compat: dict
    manifest: dict = field(default_factory=dict)
    path: str = ""

    @property
    def n(self):
        return self.catalog.n


def load_dataset(directory):
    d = os.fspath(directory)
    with open(os.path.join(d, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    catalog = load_catalog(os.path.join(d, "products.csv"))
    sess = load_sessions(os.path.join(d, "sessions.jsonl"), catalog)
    S = load_comparability(os.path.join(d, "comparability.csv"), catalog)
    compat = load_compatibility(os.path.join(d, "compatibility.jsonl"), catalog)
    checks = {
        "n_products": catalog.n,
        "n_sessions": len(sess) + sess.n_dropped_empty,
        "n_users": len({s.user_id for s in sess.sessions}),
        "feature_dim": catalog.feature_dim,
    }
    for key, got in checks.items():
        if key in manifest and int(manifest[key]) != got:
            raise ValidationError(f"manifest {key}={manifest[key]} but data has {got}")
    missing = [s.session_id for s in sess.sessions if s.session_id not in compat]
    if missing:
        raise ValidationError(f"{len(missing)} sessions lack a compatibility record (e.g. {missing[0]!r})")
    name = os.path.basename(os.path.normpath(d))
    return Dataset(name, catalog, sess, S, compat, manifest, d)


# ---------------------------------------------------------------- session tensor

def near_square_grid(length):
    """Smallest ``(r, c)`` with ``r*c >= length``, ``r - c`` in {0, 1}."""
    if length < 1:
        raise ValueError("length must be >= 1")
    s = math.isqrt(length - 1) + 1
    return (s, s - 1) if s * (s - 1) >= length else (s, s)


def session_window(products, actions, T):
    """Last ``T`` events, front-padded with -1 so the newest is the last slot."""
    items = np.full(T, -1, dtype=np.int64)
    acts = np.full(T, -1, dtype=np.int64)
    p = np.asarray(products, dtype=np.int64)[-T:]
    a = np.asarray(actions, dtype=np.int64)[-T:]
    items[T - p.size:] = p
    acts[T - a.size:] = a
    return items, acts


def action_onehot(acts):
    acts = np.asarray(acts)
    oh = np.zeros(acts.shape + (ACTION_WIDTH,))
    valid = acts >= 0
    oh[valid, acts[valid]] = 1.0
    return oh


def build_session_tensor(items, actions, item_embedding, grid=None):
    """Render windowed history into a frame volume.

    Each event becomes ``[embedding(item), onehot(action)]`` laid row-major
    on an ``r x c`` grid (zero padded); padding slots (index -1) are all-zero
    frames. ``items``/``actions`` of shape [T] give [1, T, r, c]; shape
    [B, T] gives [B, 1, T, r, c].
    """
    items = np.asarray(items, dtype=np.int64)
    single = items.ndim == 1
    items2 = items[None] if single else items
    acts2 = np.asarray(actions, dtype=np.int64).reshape(items2.shape)
    B, T = items2.shape
    L = item_embedding.shape[1] + ACTION_WIDTH
    r, c = grid or near_square_grid(L)
    if r * c < L:
        raise tn.ShapeError(f"grid {r}x{c} cannot hold {L} features")
    emb = tn.embedding(item_embedding, items2)
    parts = [emb, tn.Tensor(action_onehot(acts2))]
    if r * c > L:
        parts.append(tn.Tensor(np.zeros((B, T, r * c - L))))
    frames = tn.concat(parts, axis=2)
    vol = tn.reshape(frames, (B, 1, T, r, c))
    return tn.reshape(vol, (1, T, r, c)) if single else vol


# ---------------------------------------------------------------- static views

def build_comparability_vector(index, S):
    if not 0 <= index < S.shape[0]:
        raise IndexError(f"product index {index} out of range")
    return S[index].copy()


def build_compatibility_vector(session_id, records):
    if session_id not in records:
        raise KeyError(f"no compatibility record for session {session_id!r}")
    return records[session_id].astype(np.float64)


def build_random_view(user_id, d_r, seed):
    if d_r < 1:
        raise ValueError("random view width must be >= 1")
    return make_rng(hash64(seed, user_id)).random(d_r)


# ---------------------------------------------------------------- split

@dataclass(frozen=True)
class Sample:
    session: int
    n_history: int


@dataclass
class SplitSpec:
    train: list
    test: list


def split_leave_last_out(log_):
    """Final event of each session is the test target; every earlier
    (prefix, next event) pair is a training sample."""
    train, test = [], []
    for si, s in enumerate(log_.sessions):
        if len(s) < 2:
            continue
        train.extend(Sample(si, h) for h in range(1, len(s) - 1))
        test.append(Sample(si, len(s) - 1))
    return SplitSpec(train, test)


# ---------------------------------------------------------------- bundles

@dataclass
class ViewBundle:
    session_items: np.ndarray
    session_actions: np.ndarray
    static_views: dict
    target: int

    def session_tensor(self, item_embedding, grid=None):
        return build_session_tensor(self.session_items, self.session_actions, item_embedding, grid)


@dataclass
class ViewArrays:
    """Column-stacked bundles for a list of samples (row i = sample i)."""

    session_items: np.ndarray
    session_actions: np.ndarray
    static_views: dict
    targets: np.ndarray

    def __len__(self):
        return int(self.targets.size)

    def take(self, idx):
        return ViewArrays(self.session_items[idx], self.session_actions[idx],
                          {k: v[idx] for k, v in self.static_views.items()}, self.targets[idx])

    def bundle(self, i):
        return ViewBundle(self.session_items[i], self.session_actions[i],
                          {k: v[i] for k, v in self.static_views.items()}, int(self.targets[i]))

    def dims(self):
        return {k: int(v.shape[1]) for k, v in self.static_views.items()}


def stack_bundles(bundles):
    return ViewArrays(
        np.stack([b.session_items for b in bundles]),
        np.stack([b.session_actions for b in bundles]),
        {k: np.stack([b.static_views[k] for b in bundles]) for k in bundles[0].static_views},
        np.asarray([b.target for b in bundles], dtype=np.int64),
    )


def assemble_bundle(sample, dataset, latent_users, T=8, d_r=16, seed=0, k=None):
    """One sample's views. Unknown users get a zero latent vector."""
    return assemble_arrays([sample], dataset, latent_users, T, d_r, seed, k).bundle(0)


def assemble_arrays(samples, dataset, latent_users, T=8, d_r=16, seed=0, k=None):
    if k is None:
        k = len(next(iter(latent_users.values()))) if latent_users else 1
    N = len(samples)
    items = np.empty((N, T), dtype=np.int64)
    acts = np.empty((N, T), dtype=np.int64)
    targets = np.empty(N, dtype=np.int64)
    last = np.empty(N, dtype=np.int64)
    uv = np.zeros((N, k))
    ct = np.empty((N, dataset.n))
    rnd = np.empty((N, d_r))
    rnd_cache = {}
    for row, smp in enumerate(samples):
        s = dataset.log.sessions[smp.session]
        h = smp.n_history
        if not 1 <= h < len(s):
            raise ValueError(f"sample history length {h} invalid for session of {len(s)} events")
        items[row], acts[row] = session_window(s.products[:h], s.actions[:h], T)
        targets[row] = s.products[h]
        last[row] = s.products[h - 1]
        vec = latent_users.get(s.user_id)
        if vec is not None:
            uv[row] = vec
        ct[row] = build_compatibility_vector(s.session_id, dataset.compat)
        if s.user_id not in rnd_cache:
            rnd_cache[s.user_id] = build_random_view(s.user_id, d_r, seed)
        rnd[row] = rnd_cache[s.user_id]
    static = {
        "uv": uv,
        "cd": dataset.catalog.expert_features[last],
        "cr": dataset.S[last],
        "ct": ct,
        "rnd": rnd,
    }
    return ViewArrays(items, acts, static, targets)
