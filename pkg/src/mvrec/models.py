"""The four compared architectures behind one interface.

``baseline``  session frames with cd/uv tiled in as extra channels, one 3D-CNN.
``mv-dnn``    one identical MLP branch per static view, concatenated, final MLP.
``tdssm``     mv-dnn plus a 3D-CNN branch for the session view.
``mv-afm``    per-view encoder, x-way embedding, feature-level attention,
              pairwise Hadamard interactions, view-level attention, two
              final layers.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as tn
from .views import ACTION_WIDTH, ViewArrays, ViewBundle, build_session_tensor, near_square_grid

KINDS = ("baseline", "mv-dnn", "tdssm", "mv-afm")
SESSION = "3d"
BASELINE_VIEWS = ("3d", "cd", "uv")


class ConfigError(ValueError):
    pass


class UnsupportedError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str
    n: int
    views: list
    T: int = 8
    item_embed_dim: int = 20
    conv_channels: tuple = (8, 16)
    conv_kernel: int = 3
    pool: int = 2
    branch_hidden: tuple = (256, 128)
    d_branch: int = 64
    x: int = 8
    y: int = 32
    a: int = 32
    final_hidden: tuple = (128,)
    feature_attention: bool = True

    def __post_init__(self):
        self.views = [(str(v), int(d)) for v, d in self.views]
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.branch_hidden = tuple(int(c) for c in self.branch_hidden)
        self.final_hidden = tuple(int(c) for c in self.final_hidden)

    @property
    def view_names(self):
        return [v for v, _ in self.views]

    @property
    def view_dims(self):
        return dict(self.views)

    @property
    def has_session(self):
        return SESSION in self.view_names

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        names = self.view_names
        if not names or len(set(names)) != len(names):
            raise ConfigError("views must be a nonempty list of distinct names")
        if self.kind == "mv-dnn" and SESSION in names:
            raise ConfigError("mv-dnn handles static views only")
        if self.kind == "baseline" and set(names) != set(BASELINE_VIEWS):
            raise ConfigError(f"baseline uses exactly {BASELINE_VIEWS}")
        if min(self.x, self.y, self.a) < 1:
            raise ConfigError("x, y and a must be >= 1")
        if self.n < 1 or self.T < 1 or self.item_embed_dim < 1 or self.d_branch < 1:
            raise ConfigError("n, T, item_embed_dim and d_branch must be >= 1")
        if not self.conv_channels or min(self.conv_channels) < 1 or self.conv_kernel < 1 or self.pool < 1:
            raise ConfigError("bad conv spec")
        if self.kind in ("mv-afm",) and len(self.final_hidden) != 1:
            raise ConfigError("mv-afm ends in exactly two layers (final_hidden of length 1)")
        for v, d in self.views:
            if v != SESSION and d < 1:
                raise ConfigError(f"static view {v!r} needs a positive width")
        return self

    def to_dict(self):
        d = asdict(self)
        d["views"] = [list(p) for p in self.views]
        for key in ("conv_channels", "branch_hidden", "final_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def session_grid(config):
    L = config.item_embed_dim + ACTION_WIDTH
    if config.kind == "baseline":
        dims = config.view_dims
        L = max(L, dims["cd"], dims["uv"])
    return near_square_grid(L)


def conv_stack_shapes(config, in_channels):
    """(layer shapes, flattened width) of the session 3D-CNN."""
    r, c = session_grid(config)
    ext = [config.T, r, c]
    k, pad = config.conv_kernel, config.conv_kernel // 2
    layers, ci = [], in_channels
    for co in config.conv_channels:
        ext = [tn.conv_out_extent(e, k, 1, pad) for e in ext]
        if min(ext) < 1:
            raise ConfigError("session volume too small for the conv kernel")
        win = tuple(min(config.pool, e) for e in ext)
        layers.append(((co, ci, k, k, k), win))
        ext = [e // w for e, w in zip(ext, win)]
        ci = co
    return layers, ci * ext[0] * ext[1] * ext[2]


# ---------------------------------------------------------------- build

@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def forward(self, batch):
        return _forward(self, batch)


class _Init:
    def __init__(self, rng, params):
        self.rng, self.params = rng, params

    def linear(self, name, fan_in, fan_out):
        self.params[f"{name}.W"] = tn.tensor_new((fan_in, fan_out), "glorot", rng=self.rng,
                                                 fan_in=fan_in, fan_out=fan_out, requires_grad=True)
        self.params[f"{name}.b"] = tn.tensor_new((fan_out,), requires_grad=True)

    def mlp(self, prefix, widths):
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.linear(f"{prefix}.fc{i}", a, b)

    def conv(self, name, shape):
        co, ci, k = shape[0], shape[1], shape[2] * shape[3] * shape[4]
        self.params[f"{name}.W"] = tn.tensor_new(shape, "glorot", rng=self.rng,
                                                 fan_in=ci * k, fan_out=co * k, requires_grad=True)
        self.params[f"{name}.b"] = tn.tensor_new((co,), requires_grad=True)

    def attention(self, name, a, y):
        self.params[f"{name}.W"] = tn.tensor_new((a, y), "glorot", rng=self.rng,
                                                 fan_in=y, fan_out=a, requires_grad=True)
        self.params[f"{name}.b"] = tn.tensor_new((a,), requires_grad=True)
        self.params[f"{name}.q"] = tn.tensor_new((a,), "glorot", rng=self.rng,
                                                 fan_in=a, fan_out=1, requires_grad=True)


def build_model(config, rng):
    """Initialise every parameter (Glorot weights, zero biases) from ``rng``."""
    config.validate()
    cfg = config
    params = {}
    init = _Init(rng, params)
    if cfg.has_session:
        init.params["item_emb"] = tn.tensor_new((cfg.n, cfg.item_embed_dim), "glorot", rng=rng,
                                                fan_in=cfg.n, fan_out=cfg.item_embed_dim,
                                                requires_grad=True)
    if cfg.kind == "baseline":
        layers, flat = conv_stack_shapes(cfg, len(BASELINE_VIEWS))
        for i, (shape, _) in enumerate(layers):
            init.conv(f"enc.3d.conv{i}", shape)
        init.mlp("head", [flat, *cfg.final_hidden, cfg.n])
        return Model(cfg, params)

    for v, d in cfg.views:
        if v == SESSION:
            layers, flat = conv_stack_shapes(cfg, 1)
            for i, (shape, _) in enumerate(layers):
                init.conv(f"enc.3d.conv{i}", shape)
            init.linear("enc.3d.proj", flat, cfg.d_branch)
        elif cfg.kind == "mv-afm":
            init.mlp(f"enc.{v}", [d, cfg.d_branch])
        else:
            init.mlp(f"enc.{v}", [d, *cfg.branch_hidden, cfg.d_branch])
    if cfg.kind == "mv-afm":
        for v in cfg.view_names:
            init.linear(f"emb.{v}", cfg.d_branch, cfg.x * cfg.y)
            init.attention(f"att.{v}", cfg.a, cfg.y)
        init.attention("att.view", cfg.a, cfg.y)
        init.mlp("head", [cfg.y, *cfg.final_hidden, cfg.n])
    else:
        init.mlp("head", [cfg.d_branch * len(cfg.views), *cfg.final_hidden, cfg.n])
    return Model(cfg, params)


# ---------------------------------------------------------------- forward pieces

def _mlp(params, prefix, x, final_relu):
    i = 0
    while f"{prefix}.fc{i}.W" in params:
        x = tn.linear(x, params[f"{prefix}.fc{i}.W"], params[f"{prefix}.fc{i}.b"])
        i += 1
        if final_relu or f"{prefix}.fc{i}.W" in params:
            x = tn.relu(x)
    return x


def _conv_stack(model, vol):
    layers, _ = conv_stack_shapes(model.config, vol.shape[1])
    pad = model.config.conv_kernel // 2
    p = model.params
    for i, (_, win) in enumerate(layers):
        vol = tn.conv3d(vol, p[f"enc.3d.conv{i}.W"], p[f"enc.3d.conv{i}.b"], 1, pad)
        vol = tn.maxpool3d(tn.relu(vol), win, win)
    return tn.reshape(vol, (vol.shape[0], -1))


def _tile_static(vec, grid, T):
    B, d = vec.shape
    r, c = grid
    flat = np.zeros((B, r * c))
    flat[:, :d] = vec
    return np.broadcast_to(flat.reshape(B, 1, 1, r, c), (B, 1, T, r, c))


@dataclass
class AttentionParams:
    W: tn.Tensor
    b: tn.Tensor
    q: tn.Tensor


def attention_params(model, name):
    p = model.params
    return AttentionParams(p[f"att.{name}.W"], p[f"att.{name}.b"], p[f"att.{name}.q"])


def feature_attention(F, params, enabled=True):
    """Attention pooling of ``F`` [x, y] (or [B, x, y]).

    ``e_i = q . tanh(W F_i + b)``, ``alpha = softmax(e)``,
    ``c = sum_i alpha_i F_i``. Returns ``(c, alpha)``.
    """
    single = F.data.ndim == 2
    F3 = tn.reshape(F, (1,) + F.shape) if single else F
    B, x, y = F3.shape
    if enabled:
        h = tn.tanh(tn.linear(F3, tn.transpose(params.W), params.b))
        e = tn.reshape(tn.matmul(h, tn.reshape(params.q, (-1, 1))), (B, x))
        alpha = tn.softmax(e, axis=-1)
        c = tn.reshape(tn.matmul(tn.reshape(alpha, (B, 1, x)), F3), (B, y))
    else:
        alpha = tn.Tensor(np.full((B, x), 1.0 / x))
        c = tn.mean_axis(F3, 1)
    if single:
        return tn.reshape(c, (y,)), tn.reshape(alpha, (x,))
    return c, alpha


def interaction_labels(view_names):
    return list(view_names) + [f"{a} x {b}" for a, b in combinations(view_names, 2)]


def interaction_slots(o):
    return o + o * (o - 1) // 2


def pairwise_interactions(contexts):
    """The ``o`` inputs followed by the Hadamard product of every pair i < j."""
    out = list(contexts)
    for i, j in combinations(range(len(contexts)), 2):
        out.append(tn.mul(contexts[i], contexts[j]))
    return out


def _as_arrays(batch):
    if isinstance(batch, ViewBundle):
        return ViewArrays(batch.session_items[None], batch.session_actions[None],
                          {k: np.asarray(v)[None] for k, v in batch.static_views.items()},
                          np.asarray([batch.target])), True
    return batch, False


def _forward(model, batch):
    """Logits [B, n] and, for mv-afm, the view-level alignment [B, V]."""
    cfg, p = model.config, model.params
    arrays, _ = _as_arrays(batch)
    for v in cfg.view_names:
        if v != SESSION and v not in arrays.static_views:
            raise ValueError(f"bundle lacks view {v!r}")
        if v != SESSION and arrays.static_views[v].shape[1] != cfg.view_dims[v]:
            raise ValueError(f"view {v!r} width {arrays.static_views[v].shape[1]} != {cfg.view_dims[v]}")

    def session_volume(grid=None):
        return build_session_tensor(arrays.session_items[:, -cfg.T:], arrays.session_actions[:, -cfg.T:],
                                    p["item_emb"], grid)

    if cfg.kind == "baseline":
        grid = session_grid(cfg)
        frames = session_volume(grid)
        T = frames.shape[2]
        vol = tn.concat([frames,
                         tn.Tensor(_tile_static(arrays.static_views["cd"], grid, T)),
                         tn.Tensor(_tile_static(arrays.static_views["uv"], grid, T))], axis=1)
        return _mlp(p, "head", _conv_stack(model, vol), False), None

    encoded = []
    for v in cfg.view_names:
        if v == SESSION:
            h = _conv_stack(model, session_volume())
            h = tn.relu(tn.linear(h, p["enc.3d.proj.W"], p["enc.3d.proj.b"]))
        else:
            h = _mlp(p, f"enc.{v}", tn.Tensor(arrays.static_views[v]), True)
        encoded.append(h)

    if cfg.kind != "mv-afm":
        return _mlp(p, "head", tn.concat(encoded, axis=1), False), None

    contexts = []
    for v, h in zip(cfg.view_names, encoded):
        F = tn.linear(h, p[f"emb.{v}.W"], p[f"emb.{v}.b"])
        F = tn.reshape(F, (F.shape[0], cfg.x, cfg.y))
        c, _ = feature_attention(F, attention_params(model, v), cfg.feature_attention)
        contexts.append(c)
    V = tn.stack(pairwise_interactions(contexts), axis=1)
    g, alpha = feature_attention(V, attention_params(model, "view"))
    return _mlp(p, "head", g, False), alpha


def forward(model, bundle):
    """Logits for a bundle ([n]) or a batch ([B, n]); plus the mv-afm trace."""
    logits, alpha = _forward(model, bundle)
    if isinstance(bundle, ViewBundle):
        logits = tn.reshape(logits, (model.config.n,))
        if alpha is not None:
            return logits, AttentionTrace(interaction_labels(model.config.view_names), alpha.data[0].copy())
        return logits, None
    return logits, alpha


@dataclass
class AttentionTrace:
    labels: list
    alpha: np.ndarray


def attention_trace(model, bundle):
    if model.config.kind != "mv-afm":
        raise UnsupportedError(f"attention trace needs mv-afm, got {model.config.kind}")
    with tn.no_grad():
        _, trace = forward(model, bundle)
    return trace


def predict(model, arrays, batch_size=256):
    """Inference logits [N, n] (and alphas [N, V] for mv-afm) in fixed-size chunks."""
    outs, alphas = [], []
    with tn.no_grad():
        for s in range(0, len(arrays), batch_size):
            logits, alpha = _forward(model, arrays.take(slice(s, s + batch_size)))
            outs.append(logits.data)
            if alpha is not None:
                alphas.append(alpha.data)
    return np.concatenate(outs), (np.concatenate(alphas) if alphas else None)


# ---------------------------------------------------------------- parameter counts

def parameter_count(model):
    return int(sum(t.size for t in model.params.values()))


def _mlp_count(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def expected_parameter_count(config):
    """Closed-form trainable-parameter count implied by ``config``."""
    cfg = config
    total = cfg.n * cfg.item_embed_dim if cfg.has_session else 0

    def conv_count(cin):
        layers, flat = conv_stack_shapes(cfg, cin)
        return sum(int(np.prod(s)) + s[0] for s, _ in layers), flat

    if cfg.kind == "baseline":
        cc, flat = conv_count(len(BASELINE_VIEWS))
        return total + cc + _mlp_count([flat, *cfg.final_hidden, cfg.n])
    for v, d in cfg.views:
        if v == SESSION:
            cc, flat = conv_count(1)
            total += cc + _mlp_count([flat, cfg.d_branch])
        elif cfg.kind == "mv-afm":
            total += _mlp_count([d, cfg.d_branch])
        else:
            total += _mlp_count([d, *cfg.branch_hidden, cfg.d_branch])
    if cfg.kind == "mv-afm":
        o = len(cfg.views)
        att = cfg.a * cfg.y + 2 * cfg.a
        total += o * (_mlp_count([cfg.d_branch, cfg.x * cfg.y]) + att) + att
        return total + _mlp_count([cfg.y, *cfg.final_hidden, cfg.n])
    return total + _mlp_count([cfg.d_branch * len(cfg.views), *cfg.final_hidden, cfg.n])


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model, path, meta=None):
    """Write parameters and config to an ``.npz``; values round-trip bit-exactly."""
    doc = {"config": model.config.to_dict(), "meta": meta or {}, "order": list(model.params)}
    members = [("__meta__", np.asarray(json.dumps(doc, sort_keys=True)))]
    members += [(f"param:{k}", t.data) for k, t in model.params.items()]
    # fixed member timestamps keep the archive byte-reproducible
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in members:
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.require(arr, requirements="C"), allow_pickle=False)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        doc = json.loads(str(z["__meta__"].reshape(-1)[0]))
        config = ModelConfig.from_dict(doc["config"]).validate()
        params = {k: tn.Tensor(z[f"param:{k}"].copy(), requires_grad=True) for k in doc["order"]}
    return Model(config, params), doc.get("meta", {})
