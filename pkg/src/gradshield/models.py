"""Toy ViT and weight-standardized CNN graphs, their ensemble and an SGD trainer.

Each builder returns a :class:`Model` carrying the graph, the canonical
shield selection (everything up to the position embedding for the ViT; the
standardized convolution and its max-pool for the CNN) and the ids an
attacker needs: logits, label leaf and per-head attention weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor
from .autodiff import backward, forward
from .data import SyntheticDataset
from .graph import Graph, GraphBuilder
from .shield import Selection, select


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class VitConfig:
    image: int = 16
    channels: int = 3
    patch: int = 4
    width: int = 16
    blocks: int = 2
    heads: int = 2
    classes: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image % self.patch:
            raise ValueError(f"patch {self.patch} must divide image size {self.image}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        if min(self.image, self.channels, self.patch, self.width, self.blocks, self.heads) < 1:
            raise ValueError("all ViT extents must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @property
    def tokens(self) -> int:
        return (self.image // self.patch) ** 2 + 1


@dataclass(frozen=True)
class CnnConfig:
    image: int = 16
    channels: int = 3
    filters: int = 8
    kernel: int = 3
    stride: int = 1
    pool: int = 2
    trunk_filters: int = 8
    hidden: int = 32
    classes: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        stem = (self.image - self.kernel) // self.stride + 1
        if self.kernel > self.image or self.pool > stem or stem // self.pool < 3:
            raise ValueError("CNN extents do not chain: image too small for kernel/pool/trunk")
        if self.classes < 2:
            raise ValueError("need at least two classes")


@dataclass(frozen=True)
class Model:
    kind: str
    graph: Graph
    selection: Selection
    config: object
    logits: int
    label: int
    attention: tuple = ()  # attention[l][h] = node id of that head's weights
    clear_entry: int = 0  # first clear node after the shield
    spatial_reduction: int = 1

    @property
    def input(self) -> int:
        return self.graph.attack_input

    def init_params(self, rng: np.random.Generator) -> dict:
        return {self.graph[i].name: _init(self.graph[i].name, self.graph[i].shape, rng)
                for i in self.graph.params()}

    def bindings(self, params, x, onehot):
        b = {self.input: x, self.label: onehot}
        b.update(params)
        return b


def _init(name, shape, rng):
    if name.endswith(("cls", "pos")):
        return rng.uniform(-0.02, 0.02, size=shape)
    if name.rsplit("_", 1)[-1].startswith("b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def build_tiny_vit(cfg: VitConfig) -> Model:
    gb = GraphBuilder()
    P, D, nh = cfg.patch, cfg.width, cfg.heads
    d = D // nh
    N = cfg.tokens - 1
    x = gb.input("x", (cfg.channels, cfg.image, cfg.image))
    y = gb.input("y", (cfg.classes,))
    E = gb.param("E", (cfg.channels * P * P, D))
    cls = gb.param("cls", (1, D))
    pos = gb.param("pos", (N + 1, D))
    blocks = []
    for l in range(cfg.blocks):
        blk = {k: gb.param(f"blk{l}_{k}", s) for k, s in (
            ("Wq", (D, D)), ("Wk", (D, D)), ("Wv", (D, D)), ("Wo", (D, D)), ("bo", (D,)),
            ("W1", (D, cfg.mlp_ratio * D)), ("b1", (cfg.mlp_ratio * D,)),
            ("W2", (cfg.mlp_ratio * D, D)), ("b2", (D,)))}
        blocks.append(blk)
    Wh = gb.param("head_W", (D, cfg.classes))
    bh = gb.param("head_b", (cfg.classes,))

    patches = gb.op("patchify", x, name="patches", patch=P)
    emb = gb.op("linear", patches, E, name="embed")
    tok = gb.op("concat", cls, emb, name="with_cls", axis=-2)
    z0 = gb.op("add", tok, pos, name="z0")
    z = gb.op("identity", z0, name="tokens")
    attention = []
    for l, blk in enumerate(blocks):
        h = gb.op("layernorm", z, name=f"blk{l}_ln1")
        q = gb.op("linear", h, blk["Wq"], name=f"blk{l}_q")
        k = gb.op("linear", h, blk["Wk"], name=f"blk{l}_k")
        v = gb.op("linear", h, blk["Wv"], name=f"blk{l}_v")
        heads, outs = [], []
        for i in range(nh):
            qi = gb.op("slice", q, name=f"blk{l}_q{i}", start=i * d, stop=(i + 1) * d)
            ki = gb.op("slice", k, name=f"blk{l}_k{i}", start=i * d, stop=(i + 1) * d)
            vi = gb.op("slice", v, name=f"blk{l}_v{i}", start=i * d, stop=(i + 1) * d)
            kt = gb.op("transpose", ki, name=f"blk{l}_kT{i}")
            s = gb.op("matmul", qi, kt, name=f"blk{l}_qk{i}")
            s = gb.op("scale", s, name=f"blk{l}_scores{i}", c=1.0 / math.sqrt(d))
            a = gb.op("softmax", s, name=f"blk{l}_att{i}")
            heads.append(a)
            outs.append(gb.op("matmul", a, vi, name=f"blk{l}_o{i}"))
        attention.append(heads)
        cat = gb.op("concat", *outs, name=f"blk{l}_heads", axis=-1)
        o = gb.op("linear", cat, blk["Wo"], name=f"blk{l}_proj")
        o = gb.op("add", o, blk["bo"], name=f"blk{l}_proj_b")
        z = gb.op("add", z, o, name=f"blk{l}_res1")
        h = gb.op("layernorm", z, name=f"blk{l}_ln2")
        m = gb.op("linear", h, blk["W1"], name=f"blk{l}_fc1")
        m = gb.op("add", m, blk["b1"], name=f"blk{l}_fc1_b")
        m = gb.op("gelu", m, name=f"blk{l}_gelu")
        m = gb.op("linear", m, blk["W2"], name=f"blk{l}_fc2")
        m = gb.op("add", m, blk["b2"], name=f"blk{l}_fc2_b")
        z = gb.op("add", z, m, name=f"blk{l}_res2")
    zf = gb.op("layernorm", z, name="ln_final")
    c = gb.op("select", zf, name="cls_out", index=0, axis=-2)
    logits = gb.op("linear", c, Wh, name="head")
    logits = gb.op("add", logits, bh, name="logits")
    gb.op("softmax_ce", logits, y, name="loss")
    g = gb.build(attack_input="x")
    ids = g.ids
    return Model("vit", g, select(g, [ids["z0"]]), cfg, ids["logits"], ids["y"],
                 tuple(tuple(ids[a] for a in heads) for heads in attention),
                 clear_entry=ids["tokens"], spatial_reduction=P)


def build_tiny_cnn(cfg: CnnConfig) -> Model:
    gb = GraphBuilder()
    F, F2 = cfg.filters, cfg.trunk_filters
    x = gb.input("x", (cfg.channels, cfg.image, cfg.image))
    y = gb.input("y", (cfg.classes,))
    W0 = gb.param("stem_W", (F, cfg.channels, cfg.kernel, cfg.kernel))
    Wt = gb.param("trunk_W", (F2, F, 3, 3))
    bt = gb.param("trunk_b", (F2, 1, 1))
    Wr = gb.param("res_W", (F2, F2, 1, 1))
    br = gb.param("res_b", (F2, 1, 1))
    stem = (cfg.image - cfg.kernel) // cfg.stride + 1
    pooled = (stem - cfg.pool) // cfg.pool + 1
    trunk = pooled - 2
    Wf = gb.param("fc_W", (F2 * trunk * trunk, cfg.hidden))
    bf = gb.param("fc_b", (cfg.hidden,))
    Wh = gb.param("head_W", (cfg.hidden, cfg.classes))
    bh = gb.param("head_b", (cfg.classes,))

    ws = gb.op("wstd", W0, name="stem_Wstd", eps=cfg.eps)
    c = gb.op("conv2d", x, ws, name="stem_conv", stride=cfg.stride)
    p = gb.op("maxpool2d", c, name="stem_pool", size=cfg.pool, stride=cfg.pool)
    r0 = gb.op("relu", p, name="block_in")
    t = gb.op("conv2d", r0, Wt, name="trunk_conv", stride=1)
    t = gb.op("add", t, bt, name="trunk_conv_b")
    t = gb.op("relu", t, name="trunk_relu")
    u = gb.op("conv2d", t, Wr, name="res_conv", stride=1)
    u = gb.op("add", u, br, name="res_conv_b")
    r = gb.op("add", t, u, name="res_add")
    r = gb.op("relu", r, name="res_relu")
    f = gb.op("reshape", r, name="flatten", shape=(F2 * trunk * trunk,))
    h = gb.op("linear", f, Wf, name="fc")
    h = gb.op("add", h, bf, name="fc_b_add")
    h = gb.op("relu", h, name="fc_relu")
    o = gb.op("linear", h, Wh, name="head")
    o = gb.op("add", o, bh, name="logits")
    gb.op("softmax_ce", o, y, name="loss")
    g = gb.build(attack_input="x")
    ids = g.ids
    return Model("cnn", g, select(g, [ids["stem_pool"]]), cfg, ids["logits"], ids["y"],
                 clear_entry=ids["block_in"], spatial_reduction=cfg.image // pooled)


# --- inference / ensemble -----------------------------------------------------------

def predict_logits(model: Model, params, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == len(model.graph[model.input].shape) + 1
    k = model.graph[model.label].shape[0]
    y = np.zeros((x.shape[0], k) if batched else (k,))
    return forward(model.graph, model.bindings(params, x, y))[model.logits]


def predict(model: Model, params, x) -> np.ndarray:
    return np.argmax(predict_logits(model, params, x), axis=-1)


def accuracy(model: Model, params, ds: SyntheticDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(model, params, ds.images) == ds.labels))


@dataclass
class EnsembleModel:
    members: tuple  # (vit Model, cnn Model)
    params: tuple  # matching parameter stores
    seed: int = 0

    def __post_init__(self):
        shapes = {m.graph[m.input].shape for m in self.members}
        classes = {m.graph[m.label].shape for m in self.members}
        if len(shapes) != 1 or len(classes) != 1:
            raise ValueError("ensemble members must share input shape and class count")

    def selection_rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


def choose_members(n: int, rng: np.random.Generator, members: int = 2) -> np.ndarray:
    return rng.integers(0, members, size=n)


def ensemble_predict(m: EnsembleModel, x, rng: np.random.Generator):
    """Random-selection ensemble: each sample is classified by one member drawn uniformly.

    ``x`` may be one image or a batch; returns a class index or an array of them.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(m.members[0].graph[m.members[0].input].shape)
    xb = x[None] if single else x
    pick = choose_members(len(xb), rng, len(m.members))
    preds = np.stack([predict(mem, p, xb) for mem, p in zip(m.members, m.params)])
    out = preds[pick, np.arange(len(xb))]
    return int(out[0]) if single else out


# --- training ------------------------------------------------------------------------

def train_sgd(model: Model, params, dataset: SyntheticDataset, lr: float, epochs: int,
              rng: np.random.Generator, batch_size: int = 32, momentum: float = 0.9,
              eval_data: SyntheticDataset | None = None):
    """Mini-batch SGD with heavy-ball momentum on the mean cross-entropy.

    Returns ``(params, clean_accuracy)`` where accuracy is measured on
    ``eval_data`` (the training set when omitted).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    g = model.graph
    pid = {name: g.id_of(name) for name in params}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(dataset)
    onehot = dataset.onehot()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            vals = forward(g, model.bindings(params, dataset.images[idx], onehot[idx]))
            loss = float(vals[g.loss])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss}")
            adj = backward(g, vals, wrt=list(pid.values()))
            for name, i in pid.items():
                vel[name] = momentum * vel[name] - lr * adj[i] / len(idx)
                params[name] = params[name] + vel[name]
    acc = accuracy(model, params, eval_data if eval_data is not None else dataset)
    return params, acc


# --- parameter store -----------------------------------------------------------------

def save_params(params, graph: Graph, out_dir) -> None:
    """One tensor container per parameter plus ``manifest.json`` binding names to node ids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in sorted(params.items()):
        fname = f"{name}.pelt"
        tensor.save(out / fname, arr)
        manifest[name] = {"node": graph.id_of(name), "file": fname}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_params(out_dir) -> dict:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return {name: np.array(tensor.load(out / entry["file"])) for name, entry in manifest.items()}
