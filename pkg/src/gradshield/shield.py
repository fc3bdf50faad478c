"""Enclave shielding of the leftmost factors of the backprop chain rule.

The enclave is an access policy, not hardware: a masked quantity is simply
one the :class:`AttackerView` refuses to return. Defender computation never
changes.

Shielding starts from a selection of transform nodes and walks to the
parents: every visited transform and parameter value is masked, and for each
Input parent ``x`` of a visited node the local Jacobian ``J^{x->i}`` is masked
as well. Input values are the attacker's own sample and stay readable, but
their adjoints (the input gradient) do not.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import AdjointMap, ValueMap, local_jacobian, vjp_edge
from .graph import Graph, GraphError, LeafKind
from .tensor import ELEMENT_BYTES


class AccessDenied(PermissionError):
    pass


class ShieldNotCut(ValueError):
    """Some input-to-loss path avoids every masked node."""


@dataclass(frozen=True)
class Selection:
    nodes: frozenset = frozenset()


def select(g: Graph, frontier) -> Selection:
    ids = frozenset(g.id_of(f) if isinstance(f, str) else int(f) for f in frontier)
    for i in ids:
        if g[i].is_leaf:
            raise GraphError(f"node {i} is a leaf; only transforms (id > {g.l}) can be selected")
    return Selection(ids)


def jacobian_numel(g: Graph, edge) -> int:
    j, i = edge
    nd = g[i]
    k = nd.parents.index(j)
    return ops.get(nd.op).jacobian_numel(k, [g[p].shape for p in nd.parents], nd.shape, **nd.attrs)


@dataclass(frozen=True)
class Enclave:
    graph: Graph
    values: frozenset = frozenset()
    inputs: frozenset = frozenset()
    jacobians: frozenset = frozenset()
    stored: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def empty(self) -> bool:
        return not self.values

    def masks_value(self, i: int) -> bool:
        return i in self.values

    def masks_adjoint(self, i: int) -> bool:
        return i in self.values or i in self.inputs

    def masks_jacobian(self, edge) -> bool:
        j, i = edge
        return edge in self.jacobians or self.masks_adjoint(j) or self.masks_adjoint(i)

    @property
    def nbytes(self) -> int:
        numel = sum(self.graph[i].numel for i in self.values)
        numel += sum(jacobian_numel(self.graph, e) for e in self.jacobians)
        return numel * ELEMENT_BYTES


def shield(g: Graph, s: Selection, v: ValueMap | None = None, jacobian=local_jacobian) -> Enclave:
    """Mask ``s`` and everything it depends on.

    When an unbatched evaluation ``v`` is given the masked input Jacobians are
    materialized through ``jacobian(g, v, edge)`` and kept in ``stored``.
    """
    values, inputs, jacs = set(), set(), set()
    stored = {}
    visited = set()
    stack = sorted(s.nodes, reverse=True)
    while stack:
        i = stack.pop()
        if i in visited:
            continue
        visited.add(i)
        nd = g[i]
        if nd.is_leaf:
            (inputs if nd.kind is LeafKind.INPUT else values).add(i)
            continue
        values.add(i)
        for j in dict.fromkeys(nd.parents):
            if g[j].kind is LeafKind.INPUT:
                jacs.add((j, i))
                if v is not None:
                    stored[(j, i)] = jacobian(g, v, (j, i))
            if j not in visited:
                stack.append(j)
    return Enclave(g, frozenset(values), frozenset(inputs), frozenset(jacs), stored)


@dataclass(frozen=True)
class MaskFrontier:
    L: int  # rightmost masked transform on an input-to-loss path
    owner: int  # leftmost clear transform fed by the masked region
    crossing: tuple = ()  # every clear transform with a masked parent


def _reach(start, step, blocked=frozenset()):
    seen = {start}
    todo = deque([start])
    while todo:
        i = todo.popleft()
        for j in step(i):
            if j not in seen and j not in blocked:
                seen.add(j)
                todo.append(j)
    return seen


def mask_frontier(g: Graph, e: Enclave) -> MaskFrontier:
    x = g.attack_input
    if x is None:
        raise GraphError("graph has no designated attack input")
    if g.loss in _reach(x, g.children, blocked=e.values):
        raise ShieldNotCut("not fully cut: an input-to-loss path avoids the enclave")
    on_path = _reach(x, g.children) & _reach(g.loss, g.parents)
    masked = [i for i in e.values if i in on_path and not g[i].is_leaf]
    if not masked:
        raise ShieldNotCut("not fully cut: input does not reach the loss")
    crossing = sorted(i for i in on_path
                      if not g[i].is_leaf and i not in e.values
                      and any(p in e.values for p in g[i].parents))
    return MaskFrontier(max(masked), crossing[0], tuple(crossing))


class AttackerView:
    """Read access to one defender evaluation, filtered by the enclave.

    ``reads`` and ``denied`` count accessor calls so an attack trace can be
    audited afterwards.
    """

    def __init__(self, g: Graph, e: Enclave, values: ValueMap, adjoints: AdjointMap | None = None):
        self.graph = g
        self.enclave = e
        self._values = values
        self._adjoints = adjoints
        self.reads = 0
        self.denied = 0

    def _deny(self, what):
        self.denied += 1
        raise AccessDenied(f"{what} is inside the enclave")

    def value(self, i):
        i = self.graph.id_of(i) if isinstance(i, str) else i
        if self.enclave.masks_value(i):
            self._deny(f"value of node {i}")
        self.reads += 1
        return self._values[i]

    def adjoint(self, i):
        i = self.graph.id_of(i) if isinstance(i, str) else i
        if self.enclave.masks_adjoint(i):
            self._deny(f"adjoint of node {i}")
        if self._adjoints is None:
            raise ValueError("no backward pass attached to this view")
        self.reads += 1
        return self._adjoints[i]

    def jacobian(self, edge):
        edge = tuple(edge)
        if self.enclave.masks_jacobian(edge):
            self._deny(f"jacobian {edge}")
        self.reads += 1
        return local_jacobian(self.graph, self._values, edge)

    def logits(self, i):
        return self.value(i)


@dataclass(frozen=True)
class FullGradient:
    grad: np.ndarray


@dataclass(frozen=True)
class AdjointOnly:
    adjoint: np.ndarray
    owner: int
    frontier: MaskFrontier


def attacker_gradient(view: AttackerView):
    """Best gradient information the attacker can assemble from clear data.

    An empty enclave yields the true input gradient. A cut enclave leaves only
    the adjoint of the leftmost clear node. An enclave that fails to cut every
    path yields the input gradient summed over the clear children only.
    """
    g, e = view.graph, view.enclave
    x = g.attack_input
    if e.empty:
        return FullGradient(view.adjoint(x))
    try:
        frontier = mask_frontier(g, e)
    except ShieldNotCut:
        total = np.zeros(np.shape(view.value(x)))
        for c in g.children(x):
            if e.masks_value(c):
                continue
            adj_c = view.adjoint(c)
            for p in g[c].parents:
                view.value(p)
            for k, p in enumerate(g[c].parents):
                if p == x:
                    total = total + vjp_edge(g, view._values, c, k, adj_c)
        return FullGradient(total)
    return AdjointOnly(view.adjoint(frontier.owner), frontier.owner, frontier)


def memory_report(e: Enclave) -> dict:
    """Worst-case enclave footprint, nothing flushed after backprop.

    Counts every masked value, every masked Jacobian (compact form) and the
    adjoint of every masked node, at 4 bytes per element.
    """
    g = e.graph
    items = []
    for i in sorted(e.values):
        items.append({"node": i, "name": g[i].name, "kind": "value", "numel": g[i].numel})
    for edge in sorted(e.jacobians):
        items.append({"edge": list(edge), "kind": "jacobian", "numel": jacobian_numel(g, edge)})
    for i in sorted(e.values):
        items.append({"node": i, "name": g[i].name, "kind": "adjoint", "numel": g[i].numel})
    for it in items:
        it["bytes"] = it["numel"] * ELEMENT_BYTES
    return {"items": items, "total_bytes": sum(it["bytes"] for it in items)}
