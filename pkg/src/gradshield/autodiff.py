"""Forward evaluation and reverse-mode differentiation over a :class:`Graph`.

Backward accumulates, for every node ``x``, the sum over its children ``j`` of
``J^{x->j}^T dL/du^j`` using each op's vector-Jacobian product. Dense local
Jacobians are only assembled on request.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .graph import Graph, GraphError, LeafKind


class BindingError(ValueError):
    pass


class ValueMap(dict):
    """Node id -> forward value. ``aux`` keeps per-op backward caches."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.aux: dict[int, object] = {}
        self.batch: tuple = ()


class AdjointMap(dict):
    """Node id -> dL/du for that node."""


def _resolve(g: Graph, key):
    return g.id_of(key) if isinstance(key, str) else int(key)


def forward(g: Graph, bindings) -> ValueMap:
    """Evaluate every node in id order.

    Parameter bindings must match their declared shape exactly. Input
    bindings may carry one extra leading batch axis, shared by all inputs;
    the loss then sums over the batch.
    """
    bound = {_resolve(g, k): v for k, v in bindings.items()}
    vals = ValueMap()
    batch = None
    for nd in g.leaves:
        if nd.id not in bound:
            raise BindingError(f"leaf {nd.id} ({nd.name or nd.kind.value}) is unbound")
        arr = np.asarray(bound[nd.id], dtype=np.float64)
        if nd.kind is LeafKind.PARAMETER or arr.shape == nd.shape:
            if arr.shape != nd.shape:
                raise BindingError(f"leaf {nd.id}: expected shape {nd.shape}, got {arr.shape}")
        else:
            lead = arr.shape[: arr.ndim - len(nd.shape)]
            if len(lead) != 1 or arr.shape[len(lead):] != nd.shape:
                raise BindingError(f"leaf {nd.id}: expected {nd.shape} or (B,)+{nd.shape}, got {arr.shape}")
            if batch is not None and lead != batch:
                raise BindingError(f"leaf {nd.id}: batch {lead} differs from {batch}")
            batch = lead
        vals[nd.id] = arr
    vals.batch = batch or ()
    for nd in g.transforms:
        op = ops.get(nd.op)
        args = [vals[j] for j in nd.parents]
        out, aux = op.forward(args, [g[j].shape for j in nd.parents], **nd.attrs)
        vals[nd.id] = out
        if aux is not None:
            vals.aux[nd.id] = aux
    return vals


def _needs_grad(g: Graph, wrt):
    need = {}
    wrt = set(wrt)
    for nd in g:
        need[nd.id] = nd.id in wrt if nd.is_leaf else any(need[p] for p in nd.parents)
    return need


def vjp_edge(g: Graph, v: ValueMap, i: int, k: int, adj_i):
    """Contribution of node ``i``'s adjoint to its ``k``-th argument."""
    nd = g[i]
    args = [v[j] for j in nd.parents]
    return ops.get(nd.op).vjp(k, adj_i, args, v[i], v.aux.get(i),
                              [g[j].shape for j in nd.parents], **nd.attrs)


def backward(g: Graph, v: ValueMap, wrt=None) -> AdjointMap:
    """Reverse pass from the loss node.

    ``wrt`` optionally restricts work to the leaves whose gradients are
    wanted; adjoints of every node are still present (zeros where unused).
    """
    loss_val = v[g.loss]
    if np.ndim(loss_val) != 0:
        raise GraphError("loss value is not scalar")
    need = _needs_grad(g, [nd.id for nd in g.leaves] if wrt is None else
                       [_resolve(g, w) for w in wrt])
    adj: dict[int, np.ndarray] = {g.loss: np.asarray(1.0)}
    for i in range(g.loss, g.l, -1):
        if i not in adj:
            continue
        for k, j in enumerate(g[i].parents):
            if not need[j]:
                continue
            contrib = vjp_edge(g, v, i, k, adj[i])
            adj[j] = contrib if j not in adj else adj[j] + contrib
    out = AdjointMap()
    for nd in g:
        out[nd.id] = adj[nd.id] if nd.id in adj else np.zeros(np.shape(v[nd.id]))
    return out


def local_jacobian(g: Graph, v: ValueMap, edge) -> np.ndarray:
    """Dense ``numel(u^i) x numel(u^j)`` Jacobian of node ``i`` w.r.t. parent ``j``.

    Assembled row by row from the VJP; values must be unbatched.
    """
    j, i = edge
    nd = g[i]
    if nd.is_leaf or j not in nd.parents:
        raise GraphError(f"edge ({j},{i}) is not in the graph")
    if v.batch:
        raise ValueError("local_jacobian needs an unbatched evaluation")
    positions = [k for k, p in enumerate(nd.parents) if p == j]
    m, n = nd.numel, g[j].numel
    jac = np.zeros((m, n))
    basis = np.zeros(m)
    for r in range(m):
        basis[r] = 1.0
        seed = basis.reshape(nd.shape)
        row = sum(vjp_edge(g, v, i, k, seed) for k in positions)
        jac[r] = np.ravel(row)
        basis[r] = 0.0
    return jac


def grad_input(g: Graph, v: ValueMap, a: AdjointMap) -> np.ndarray:
    if g.attack_input is None:
        raise GraphError("graph has no single designated input leaf")
    return a[g.attack_input]


def finite_diff(g: Graph, bindings, leaf, h: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of dL/d(leaf), element by element."""
    if h <= 0:
        raise ValueError("step must be positive")
    leaf = _resolve(g, leaf)
    bound = {_resolve(g, k): np.array(val, dtype=np.float64) for k, val in bindings.items()}
    base = bound[leaf]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(forward(g, bound)[g.loss])
        flat[idx] = orig - h
        down = float(forward(g, bound)[g.loss])
        flat[idx] = orig
        grad.reshape(-1)[idx] = (up - down) / (2 * h)
    return grad
