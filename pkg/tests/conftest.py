import json
import os

import numpy as np
import pytest

from mvrec import models as mz
from mvrec.synth import SyntheticSpec, generate
from mvrec.views import ACTIONS, ViewArrays

TINY_SPEC = dict(n_products=40, n_users=80, n_sessions=120, latent_dim=4, min_events=3,
                 max_events=6, n_classes=4, feature_dim=6, seed=11)

TINY_MODEL = dict(T=3, item_embed_dim=3, conv_channels=(2,), conv_kernel=2, pool=2,
                  branch_hidden=(5,), d_branch=4, x=2, y=3, a=3, final_hidden=(4,))

TINY_DIMS = {"uv": 3, "cd": 4, "cr": 6, "ct": 6, "rnd": 2}

TINY_VIEWS = {
    "baseline": ["3d", "cd", "uv"],
    "mv-dnn": ["uv", "cd", "cr"],
    "tdssm": ["3d", "uv", "cd"],
    "mv-afm": ["3d", "uv", "cr"],
}


def tiny_config(kind, n=6, views=None, **overrides):
    names = views or TINY_VIEWS[kind]
    kw = dict(TINY_MODEL, **overrides)
    return mz.ModelConfig(kind, n, [(v, 0 if v == "3d" else TINY_DIMS[v]) for v in names], **kw).validate()


def random_arrays(rng, n, B, T=3, dims=None):
    dims = dims or TINY_DIMS
    items = rng.integers(0, n, size=(B, T))
    acts = rng.integers(0, len(ACTIONS), size=(B, T))
    items[0, 0] = acts[0, 0] = -1  # one padded slot
    static = {k: rng.normal(size=(B, d)) for k, d in dims.items()}
    return ViewArrays(items, acts, static, rng.integers(0, n, size=B))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny") / "data"
    generate(SyntheticSpec(**TINY_SPEC), str(d))
    return str(d)


@pytest.fixture(scope="session")
def tiny_spec_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("spec") / "spec.json"
    p.write_text(json.dumps(TINY_SPEC))
    return str(p)


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    """The default planted synthetic dataset (generated once per session)."""
    d = tmp_path_factory.mktemp("default") / "data"
    generate(SyntheticSpec(), str(d))
    return str(d)


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    monkeypatch.setenv("MVREC_THREADS", os.environ.get("MVREC_TEST_THREADS", "1"))


def model_grad_error(kind, seed=0, B=3, max_coords=None):
    """Max relative finite-difference error of the full cross-entropy loss
    of a tiny ``kind`` model with respect to every parameter tensor."""
    from mvrec import tensor as tn
    from mvrec.gradcheck import grad_check

    rng = np.random.default_rng(seed)
    cfg = tiny_config(kind)
    model = mz.build_model(cfg, rng)
    for t in model.params.values():
        # move biases and weights off the ReLU kinks
        t.data = t.data + rng.uniform(-0.1, 0.1, size=t.shape)
    arrays = random_arrays(rng, cfg.n, B, cfg.T)
    params = list(model.params.values())
    return grad_check(lambda: tn.cross_entropy(mz._forward(model, arrays)[0], arrays.targets),
                      params, max_coords=max_coords, rng=rng)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE = {}


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
