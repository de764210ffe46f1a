"""Element-wise alternating least squares for implicit feedback.

Minimises

    J = sum_obs w_obs (1 - p_u.q_i)^2 + sum_missing c0 (p_u.q_i)^2
        + lam (|P|^2 + |Q|^2)

by cyclic coordinate descent: each scalar of P (then Q) is set to its
closed-form one-dimensional minimiser with everything else fixed. The
missing-cell sums are folded through the k x k Gram matrix of the fixed
side so a sweep costs O((|obs| + n) k) rather than O(n_users n_items k).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionMatrix:
    """Sparse binary user-item matrix stored as sorted, unique (user, item) pairs."""

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.users, dtype=np.int64)
        i = np.asarray(self.items, dtype=np.int64)
        if u.shape != i.shape:
            raise ValueError("users and items must have equal length")
        if u.size and (u.min() < 0 or u.max() >= self.n_users or i.min() < 0 or i.max() >= self.n_items):
            raise ValueError("interaction index out of bounds")
        order = np.lexsort((i, u))
        u, i = u[order], i[order]
        if u.size > 1 and np.any((np.diff(u) == 0) & (np.diff(i) == 0)):
            raise ValueError("duplicate (user, item) pairs")
        object.__setattr__(self, "users", u)
        object.__setattr__(self, "items", i)

    @classmethod
    def from_pairs(cls, n_users, n_items, pairs, dedup=True):
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if dedup and arr.size:
            arr = np.unique(arr, axis=0)
        return cls(n_users, n_items, arr[:, 0], arr[:, 1])

    @property
    def nnz(self):
        return int(self.users.size)

    def dense(self):
        R = np.zeros((self.n_users, self.n_items))
        R[self.users, self.items] = 1.0
        return R


@dataclass
class FactorModel:
    P: np.ndarray
    Q: np.ndarray
    lam: float
    w_obs: float
    c0: float
    history: list = field(default_factory=list)


def _csr(rows, cols, n_rows):
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr


def eals_fit(R, k=32, lam=0.1, w_obs=1.0, c0=0.01, sweeps=30, seed=0, track=True):
    """Fit user and item factors to ``R``; returns a :class:`FactorModel`.

    When ``track`` is set, ``model.history`` holds the objective at init and
    after every sweep.
    """
    if k < 1 or sweeps < 1:
        raise ValueError("k and sweeps must be >= 1")
    if R.nnz == 0:
        raise ValueError("no observed interactions")
    if lam < 0 or c0 < 0 or w_obs <= 0:
        raise ValueError("need lam >= 0, c0 >= 0, w_obs > 0")
    if k > min(R.n_users, R.n_items):
        warnings.warn(f"k={k} exceeds min(n_users, n_items)={min(R.n_users, R.n_items)}")
    rng = make_rng(seed)
    P = rng.uniform(-0.01, 0.01, size=(R.n_users, k))
    Q = rng.uniform(-0.01, 0.01, size=(R.n_items, k))

    u_ptr = _csr(R.users, R.items, R.n_users)
    u_pos = np.arange(R.nnz, dtype=np.int64)
    perm = np.lexsort((R.users, R.items)).astype(np.int64)
    i_ptr = _csr(R.items[perm], R.users[perm], R.n_items)
    i_idx = np.ascontiguousarray(R.users[perm])
    pred = np.einsum("ij,ij->i", P[R.users], Q[R.items])

    model = FactorModel(P, Q, float(lam), float(w_obs), float(c0))
    if track:
        model.history.append(eals_objective(model, R))
    for s in range(sweeps):
        kernels.eals_update(P, Q, u_ptr, R.items, u_pos, pred, w_obs, c0, lam)
        kernels.eals_update(Q, P, i_ptr, i_idx, perm, pred, w_obs, c0, lam)
        if track:
            model.history.append(eals_objective(model, R))
            log.debug("eals sweep %d objective %.6g", s + 1, model.history[-1])
    return model


def eals_objective(model, R, dense=False):
    """Exact objective; ``dense=True`` evaluates every cell explicitly."""
    P, Q = model.P, model.Q
    if P.shape[0] != R.n_users or Q.shape[0] != R.n_items or P.shape[1] != Q.shape[1]:
        raise ValueError("model and interaction matrix dimensions disagree")
    reg = model.lam * (np.sum(P * P) + np.sum(Q * Q))
    if dense:
        Y = P @ Q.T
        Rd = R.dense()
        W = np.where(Rd > 0, model.w_obs, model.c0)
        return float(np.sum(W * (Rd - Y) ** 2) + reg)
    y = np.einsum("ij,ij->i", P[R.users], Q[R.items])
    total_sq = float(np.sum((P.T @ P) * (Q.T @ Q)))
    obs = model.w_obs * np.sum((1.0 - y) ** 2)
    missing = model.c0 * (total_sq - np.sum(y * y))
    return float(obs + missing + reg)


def latent_user_vectors(model):
    return model.P.copy()


def save_factors(path, user_ids, P, meta=None):
    doc = {"k": int(P.shape[1]), "users": {u: [float(v) for v in row] for u, row in zip(user_ids, P)}}
    if meta:
        doc["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_factors(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    k = int(doc["k"])
    users = {u: np.asarray(v, dtype=np.float64) for u, v in doc["users"].items()}
    for u, v in users.items():
        if v.shape != (k,):
            raise ValueError(f"factor row for {u!r} has length {v.size}, expected {k}")
    return k, users, doc.get("meta")
