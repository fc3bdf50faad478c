"""Random small graphs for property tests."""

import numpy as np

from gradshield.graph import LeafKind, build

UNARY = ("identity", "tanh", "square", "gelu", "scale", "softmax", "layernorm", "relu")
BINARY = ("add", "sub", "mul")


def random_graph(rng, max_nodes=8, width=3, params=True):
    """Vector-valued random DAG ending in ``sum``; returns ``(graph, bindings)``.

    Every node has shape ``(width,)`` except linear weights ``(width, width)``.
    """
    n_inputs = int(rng.integers(1, 3))
    n_params = int(rng.integers(0, 2)) if params else 0
    leaves, bind = [], {}
    for i in range(1, n_inputs + 1):
        leaves.append((i, LeafKind.INPUT, (width,)))
        bind[i] = rng.uniform(-1.5, 1.5, size=width)
    for i in range(n_inputs + 1, n_inputs + n_params + 1):
        leaves.append((i, LeafKind.PARAMETER, (width, width)))
        bind[i] = rng.normal(size=(width, width))
    l = len(leaves)
    vectors = list(range(1, n_inputs + 1))
    mats = list(range(n_inputs + 1, l + 1))
    n_transforms = int(rng.integers(1, max(2, max_nodes - l)))
    transforms = []
    nid = l
    for _ in range(n_transforms):
        nid += 1
        r = rng.random()
        if mats and r < 0.2:
            transforms.append((nid, "linear", [int(rng.choice(vectors)), int(rng.choice(mats))]))
        elif r < 0.55:
            a, b = (int(t) for t in rng.choice(vectors, size=2))
            transforms.append((nid, str(rng.choice(BINARY)), [a, b]))
        else:
            op = str(rng.choice(UNARY))
            attrs = {"c": float(rng.uniform(-2, 2))} if op == "scale" else {}
            transforms.append((nid, op, [int(rng.choice(vectors))], attrs))
        vectors.append(nid)
    transforms.append((nid + 1, "sum", [nid]))
    return build(leaves, transforms), bind


def random_structure(rng, max_nodes=10):
    """Random DAG for set-level shield checks; shapes are all ``(2,)``."""
    n = int(rng.integers(3, max_nodes + 1))
    l = int(rng.integers(1, n - 1))
    leaves = []
    for i in range(1, l + 1):
        kind = LeafKind.INPUT if (i == 1 or rng.random() < 0.4) else LeafKind.PARAMETER
        leaves.append((i, kind, (2,)))
    transforms = []
    for i in range(l + 1, n):
        k = int(rng.integers(1, min(3, i - 1) + 1))
        parents = sorted(int(p) for p in rng.choice(np.arange(1, i), size=k, replace=False))
        op = "identity" if k == 1 else "add" if k == 2 else "concat"
        if op == "concat":
            parents = parents[:2]
            op = "add"
        transforms.append((i, op, parents))
    transforms.append((n, "sum", [n - 1]))
    g = build(leaves, transforms)
    pool = np.arange(l + 1, n + 1)
    size = int(rng.integers(0, min(3, len(pool)) + 1))
    sel = frozenset(int(s) for s in rng.choice(pool, size=size, replace=False))
    return g, sel


def closure_oracle(g, selection):
    """Fixed point of the masking rules by repeated sweeps over all nodes."""
    masked = set(selection)
    changed = True
    while changed:
        changed = False
        for i in list(masked):
            nd = g[i]
            if nd.is_leaf:
                continue
            for p in nd.parents:
                if p not in masked:
                    masked.add(p)
                    changed = True
    values = {i for i in masked if g[i].kind is not LeafKind.INPUT}
    inputs = {i for i in masked if g[i].kind is LeafKind.INPUT}
    jacs = {(j, i) for i in masked if not g[i].is_leaf for j in g[i].parents
            if g[j].kind is LeafKind.INPUT}
    return values, inputs, jacs


# op name -> (leaf specs, attrs, output shape); leaf spec is (label, kind, shape)
OP_CASES = {
    "identity": ([("x", "input", (2, 3))], {}, (2, 3)),
    "relu": ([("x", "input", (2, 3))], {}, (2, 3)),
    "tanh": ([("x", "input", (2, 3))], {}, (2, 3)),
    "square": ([("x", "input", (2, 3))], {}, (2, 3)),
    "gelu": ([("x", "input", (2, 3))], {}, (2, 3)),
    "scale": ([("x", "input", (2, 3))], {"c": -1.7}, (2, 3)),
    "add": ([("x", "input", (2, 3)), ("b", "param", (3,))], {}, (2, 3)),
    "sub": ([("x", "input", (2, 3)), ("b", "param", (3,))], {}, (2, 3)),
    "mul": ([("x", "input", (2, 3)), ("b", "param", (3,))], {}, (2, 3)),
    "sum": ([("x", "input", (2, 3))], {}, ()),
    "linear": ([("x", "input", (2, 3)), ("W", "param", (3, 4))], {}, (2, 4)),
    "matmul": ([("x", "input", (2, 3)), ("b", "input", (3, 2))], {}, (2, 2)),
    "transpose": ([("x", "input", (2, 3))], {}, (3, 2)),
    "softmax": ([("x", "input", (2, 4))], {}, (2, 4)),
    "layernorm": ([("x", "input", (2, 4))], {"eps": 1e-5}, (2, 4)),
    "wstd": ([("x", "param", (3, 2, 2, 2))], {"eps": 1e-5}, (3, 2, 2, 2)),
    "slice": ([("x", "input", (2, 5))], {"start": 1, "stop": 4}, (2, 3)),
    "concat": ([("c", "param", (1, 3)), ("x", "input", (2, 3))], {"axis": -2}, (3, 3)),
    "select": ([("x", "input", (3, 4))], {"index": 1, "axis": -2}, (4,)),
    "reshape": ([("x", "input", (2, 6))], {"shape": (3, 4)}, (3, 4)),
    "patchify": ([("x", "input", (2, 4, 4))], {"patch": 2}, (4, 8)),
    "conv2d": ([("x", "input", (2, 5, 5)), ("w", "param", (3, 2, 2, 2))], {"stride": 2}, (3, 2, 2)),
    "maxpool2d": ([("x", "input", (2, 4, 4))], {"size": 2, "stride": 2}, (2, 2, 2)),
    "softmax_ce": ([("x", "input", (4,)), ("y", "input", (4,))], {}, ()),
}


def op_case(name, rng):
    """Small graph exercising op ``name`` closed by a random linear functional.

    Returns ``(graph, bindings)`` with bindings keyed by node name.
    """
    from gradshield.graph import GraphBuilder

    specs, attrs, out_shape = OP_CASES[name]
    gb = GraphBuilder()
    bind = {}
    for label, kind, shape in specs:
        (gb.input if kind == "input" else gb.param)(label, shape)
        bind[label] = rng.uniform(-1.5, 1.5, size=shape) if kind == "input" else rng.normal(size=shape)
    if name == "softmax_ce":
        bind["y"] = np.eye(4)[1]
    if not any(kind == "input" for _, kind, _ in specs):
        gb.input("unused", (1,))
        bind["unused"] = np.zeros(1)
    out = gb.op(name, *[label for label, _, _ in specs], name="out", **attrs)
    if out_shape != ():
        gb.param("probe", out_shape)
        bind["probe"] = rng.normal(size=out_shape)
        out = gb.op("sum", gb.op("mul", out, "probe"), name="loss")
    first_input = next((label for label, kind, _ in specs if kind == "input"), "unused")
    return gb.build(loss=out, attack_input=first_input), bind
