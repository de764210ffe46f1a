import json
import math
import os
from itertools import permutations

import numpy as np
import pytest

from mvrec.metrics import choose_k, hr_at_k, target_ranks
from mvrec.synth import (SpecError, SyntheticSpec, generate, interaction_matrix,
                         sample_without_replacement, spec_to_json)
from mvrec.views import load_dataset, split_leave_last_out

from conftest import TINY_SPEC

FILES = ("products.csv", "sessions.jsonl", "comparability.csv", "compatibility.jsonl", "manifest.json")


def oracle_scores(ds, truth, sample):
    """True affinity z_u . w_i over the session's class, minus already-seen items."""
    s = ds.log.sessions[sample.session]
    z = truth.user_latent[truth.user_ids.index(s.user_id)]
    score = np.full(ds.n, -np.inf)
    members = np.flatnonzero(ds.compat[s.session_id])
    score[members] = truth.product_latent[members] @ z
    score[s.products[:sample.n_history]] = -np.inf
    return score


def oracle_hr(ds, truth, K):
    split = split_leave_last_out(ds.log)
    Z = np.stack([oracle_scores(ds, truth, smp) for smp in split.test])
    targets = [ds.log.sessions[smp.session].products[smp.n_history] for smp in split.test]
    return hr_at_k(target_ranks(Z, targets), K), split


class TestSpec:
    @pytest.mark.parametrize("bad", [
        dict(n_products=10), dict(temperature=0.0), dict(n_classes=0),
        dict(min_events=1), dict(min_events=5, max_events=4),
        dict(n_products=40, n_classes=8, max_events=6),  # class of 5 < 6 events
    ])
    def test_invalid(self, bad):
        with pytest.raises(SpecError):
            SyntheticSpec(**bad).validate()

    def test_json_round_trip(self, tmp_path):
        spec = SyntheticSpec(**TINY_SPEC)
        p = tmp_path / "s.json"
        p.write_text(spec_to_json(spec))
        assert SyntheticSpec.from_json(p) == spec

    def test_unknown_field(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"n_productz": 5}))
        with pytest.raises(SpecError):
            SyntheticSpec.from_json(p)


class TestSampler:
    def test_distinct_and_length(self):
        idx = sample_without_replacement(np.zeros(10), 7, np.random.default_rng(0))
        assert len(set(idx.tolist())) == 7

    def test_sequential_law(self):
        # exact probability of each ordered pair under sequential draws
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        p = np.exp(logits)
        want = {(i, j): p[i] * p[j] / (1 - p[i]) for i, j in permutations(range(3), 2)}
        rng = np.random.default_rng(7)
        m = 60_000
        counts = {}
        for _ in range(m):
            key = tuple(sample_without_replacement(logits, 2, rng).tolist())
            counts[key] = counts.get(key, 0) + 1
        for key, pr in want.items():
            assert abs(counts.get(key, 0) / m - pr) <= 4 * math.sqrt(pr * (1 - pr) / m)


class TestGenerate:
    def test_files_and_validation(self, tiny_data):
        for f in FILES:
            assert os.path.exists(os.path.join(tiny_data, f))
        ds = load_dataset(tiny_data)
        assert ds.n == TINY_SPEC["n_products"] and len(ds.log) == TINY_SPEC["n_sessions"]
        np.testing.assert_array_equal(np.diag(ds.S), 1.0)
        np.testing.assert_array_equal(ds.S, ds.S.T)

    def test_deterministic(self, tmp_path):
        spec = SyntheticSpec(**TINY_SPEC)
        generate(spec, tmp_path / "a")
        generate(spec, tmp_path / "b")
        for f in FILES:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_changes_data(self, tmp_path):
        generate(SyntheticSpec(**TINY_SPEC), tmp_path / "a")
        generate(SyntheticSpec(**dict(TINY_SPEC, seed=12)), tmp_path / "b")
        assert (tmp_path / "a" / "sessions.jsonl").read_bytes() != (tmp_path / "b" / "sessions.jsonl").read_bytes()

    def test_planted_structure(self, tmp_path):
        truth = generate(SyntheticSpec(**TINY_SPEC), tmp_path / "d")
        ds = load_dataset(tmp_path / "d")
        W = truth.product_latent
        cos = (W @ W.T) / np.outer(np.linalg.norm(W, axis=1), np.linalg.norm(W, axis=1))
        off = ~np.eye(ds.n, dtype=bool)
        np.testing.assert_allclose(ds.S[off], ((cos + 1) / 2)[off], atol=1e-12)
        for s in ds.log.sessions:
            members = ds.compat[s.session_id]
            assert members[s.products].all()
            assert len(set(s.products.tolist())) == len(s)
            c = truth.product_class[s.products]
            assert np.all(c == c[0]) and s.query_id == f"q{c[0]}"

    def test_uniform_limit(self, tmp_path):
        spec = SyntheticSpec(**dict(TINY_SPEC, temperature=1e6, n_sessions=600))
        truth = generate(spec, tmp_path / "d")
        ds = load_dataset(tmp_path / "d")
        K = 3
        hr, split = oracle_hr(ds, truth, K)
        # uniform choice among the class items not yet seen
        rates = [min(1.0, K / (ds.compat[ds.log.sessions[s.session].session_id].sum() - s.n_history))
                 for s in split.test]
        p, m = float(np.mean(rates)), len(rates)
        assert abs(hr / 100 - p) <= 4 * math.sqrt(p * (1 - p) / m)


class TestInteractionMatrix:
    def test_pairs(self, tiny_data):
        ds = load_dataset(tiny_data)
        R, users = interaction_matrix(ds)
        events = sum(len(s) for s in ds.log.sessions)
        assert R.nnz <= events and users == sorted(users)
        want = {(users.index(s.user_id), int(p)) for s in ds.log.sessions for p in s.products}
        assert set(zip(R.users.tolist(), R.items.tolist())) == want

    def test_holdout_last(self, tiny_data):
        ds = load_dataset(tiny_data)
        R, users = interaction_matrix(ds, holdout_last=True)
        want = {(users.index(s.user_id), int(p)) for s in ds.log.sessions for p in s.products[:-1]}
        assert set(zip(R.users.tolist(), R.items.tolist())) == want


def test_plantedness_default(default_data):
    # regenerate the truth (same default seed) rather than storing it on disk
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        truth = generate(SyntheticSpec(), tmp)
    ds = load_dataset(default_data)
    K, _ = choose_k(ds.n)
    hr, split = oracle_hr(ds, truth, K)
    class_size = np.mean([ds.compat[ds.log.sessions[s.session].session_id].sum() for s in split.test])
    chance = 100.0 * K / class_size
    assert hr >= 3 * chance, (hr, chance)
