"""Computational graphs: numbered leaves followed by transform nodes.

Leaves (inputs and parameters) take ids ``1..l`` and transforms ``l+1..n``;
every edge ``(j, i)`` satisfies ``j < i`` so ids are already a topological
order. Parent lists are ordered because op arguments are positional.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from . import ops
from .tensor import ShapeError


class GraphError(ValueError):
    pass


class LeafKind(enum.Enum):
    INPUT = "input"
    PARAMETER = "param"


@dataclass(frozen=True)
class Node:
    id: int
    shape: tuple
    kind: LeafKind | None = None  # None for transforms
    op: str | None = None
    parents: tuple = ()
    attrs: dict = field(default_factory=dict, compare=False)  # treat as read-only
    name: str = ""

    @property
    def is_leaf(self) -> bool:
        return self.kind is not None

    @property
    def numel(self) -> int:
        out = 1
        for s in self.shape:
            out *= s
        return out


class Graph:
    """Immutable, validated computational graph.

    ``loss`` is the scalar sink used by backward; ``attack_input`` designates
    the Input leaf treated as the attack surface (defaults to the only Input
    leaf when there is exactly one).
    """

    def __init__(self, nodes, loss: int, attack_input: int | None):
        self._nodes = tuple(nodes)
        self.n = len(self._nodes)
        self.l = sum(1 for nd in self._nodes if nd.is_leaf)
        self.loss = loss
        self.attack_input = attack_input
        kids: dict[int, list[int]] = {nd.id: [] for nd in self._nodes}
        for nd in self._nodes:
            for p in dict.fromkeys(nd.parents):
                kids[p].append(nd.id)
        self._children = {k: tuple(sorted(v)) for k, v in kids.items()}
        self.ids = {nd.name: nd.id for nd in self._nodes if nd.name}

    def __getitem__(self, i: int) -> Node:
        if not 1 <= i <= self.n:
            raise GraphError(f"unknown node id {i}")
        return self._nodes[i - 1]

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Graph(n={self.n}, l={self.l}, loss={self.loss})"

    @property
    def leaves(self):
        return self._nodes[: self.l]

    @property
    def transforms(self):
        return self._nodes[self.l:]

    def inputs(self):
        return [nd.id for nd in self.leaves if nd.kind is LeafKind.INPUT]

    def params(self):
        return [nd.id for nd in self.leaves if nd.kind is LeafKind.PARAMETER]

    def children(self, i: int) -> tuple:
        self[i]
        return self._children[i]

    def parents(self, i: int) -> tuple:
        return self[i].parents

    def edges(self):
        return [(j, nd.id) for nd in self.transforms for j in dict.fromkeys(nd.parents)]

    def id_of(self, name: str) -> int:
        try:
            return self.ids[name]
        except KeyError:
            raise GraphError(f"no node named {name!r}") from None


def build(leaves, transforms, loss: int | None = None, attack_input: int | None = None) -> Graph:
    """Validate declarations and infer every node's shape.

    ``leaves``: iterable of ``(id, LeafKind, shape)`` or ``(id, LeafKind, shape, name)``.
    ``transforms``: iterable of ``(id, op, parents)``, ``(id, op, parents, attrs)`` or
    ``(id, op, parents, attrs, name)``. ``loss`` defaults to the last node.
    """
    leaves = [tuple(d) for d in leaves]
    transforms = [tuple(d) for d in transforms]
    l, n = len(leaves), len(leaves) + len(transforms)
    if not 1 <= l < n:
        raise GraphError(f"need 1 <= l < n, got l={l}, n={n}")

    nodes: dict[int, Node] = {}
    for decl in leaves:
        i, kind, shape = decl[:3]
        name = decl[3] if len(decl) > 3 else ""
        if i in nodes:
            raise GraphError(f"duplicate node id {i}")
        kind = LeafKind(kind)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise GraphError(f"leaf {i}: extents must be positive, got {shape}")
        nodes[i] = Node(i, shape, kind=kind, name=name)
    if sorted(nodes) != list(range(1, l + 1)):
        raise GraphError(f"leaf ids must be exactly 1..{l}")

    for decl in sorted(transforms, key=lambda d: d[0]):
        i, opname, parents = decl[:3]
        attrs = dict(decl[3]) if len(decl) > 3 and decl[3] else {}
        name = decl[4] if len(decl) > 4 else ""
        if i in nodes:
            raise GraphError(f"duplicate node id {i}")
        if not l < i <= n:
            raise GraphError(f"transform id {i} outside {l + 1}..{n}")
        parents = tuple(int(j) for j in parents)
        for j in parents:
            if j >= i:
                raise GraphError(f"ordering violation: edge ({j},{i}) requires {j} < {i}")
            if j not in nodes:
                raise GraphError(f"dangling parent {j} of node {i}")
        op = ops.get(opname)
        try:
            op.check_arity(len(parents))
            shape = tuple(op.infer([nodes[j].shape for j in parents], **attrs))
        except (ShapeError, TypeError) as exc:
            raise GraphError(f"node {i} ({opname}): {exc}") from exc
        nodes[i] = Node(i, shape, op=opname, parents=parents,
                        attrs=attrs, name=name)

    names = [nd.name for nd in nodes.values() if nd.name]
    if len(names) != len(set(names)):
        raise GraphError("node names must be unique")

    loss = n if loss is None else loss
    if loss not in nodes or nodes[loss].is_leaf:
        raise GraphError(f"loss node {loss} is not a transform")
    if nodes[loss].shape != ():
        raise GraphError(f"loss node {loss} has non-scalar shape {nodes[loss].shape}")

    inputs = [i for i in range(1, l + 1) if nodes[i].kind is LeafKind.INPUT]
    if attack_input is None and len(inputs) == 1:
        attack_input = inputs[0]
    if attack_input is not None and attack_input not in inputs:
        raise GraphError(f"attack input {attack_input} is not an Input leaf")
    return Graph([nodes[i] for i in range(1, n + 1)], loss, attack_input)


class GraphBuilder:
    """Name-addressed construction helper; ids are assigned at :meth:`build`.

    >>> gb = GraphBuilder()
    >>> x = gb.input("x", (3,))
    >>> gb.op("sum", x, name="loss")
    'loss'
    >>> gb.build().n
    2
    """

    def __init__(self):
        self._leaves: list[tuple] = []
        self._transforms: list[tuple] = []
        self._names: set[str] = set()
        self._auto = 0

    def _fresh(self, name, prefix):
        if name is None:
            self._auto += 1
            name = f"{prefix}{self._auto}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        self._names.add(name)
        return name

    def input(self, name, shape):
        name = self._fresh(name, "in")
        self._leaves.append((LeafKind.INPUT, tuple(shape), name))
        return name

    def param(self, name, shape):
        name = self._fresh(name, "p")
        self._leaves.append((LeafKind.PARAMETER, tuple(shape), name))
        return name

    def op(self, opname, *parents, name=None, **attrs):
        for p in parents:
            if p not in self._names:
                raise GraphError(f"unknown parent {p!r}")
        name = self._fresh(name, opname)
        self._transforms.append((opname, tuple(parents), attrs, name))
        return name

    def build(self, loss=None, attack_input=None) -> Graph:
        ids = {}
        leaves = []
        for k, (kind, shape, name) in enumerate(self._leaves, start=1):
            ids[name] = k
            leaves.append((k, kind, shape, name))
        transforms = []
        for k, (opname, parents, attrs, name) in enumerate(self._transforms, start=len(leaves) + 1):
            ids[name] = k
            transforms.append((k, opname, [ids[p] for p in parents], attrs, name))
        return build(leaves, transforms,
                     loss=ids[loss] if loss is not None else None,
                     attack_input=ids[attack_input] if attack_input is not None else None)


# --- text serialization -----------------------------------------------------------

def _fmt_shape(shape):
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(tok):
    return () if tok == "scalar" else tuple(int(s) for s in tok.split("x"))


def dumps(g: Graph) -> str:
    """One line per node: ``id kind shape [parents] opkind attrs name``."""
    lines = [f"# loss={g.loss} attack_input={g.attack_input if g.attack_input is not None else '-'}"]
    for nd in g:
        kind = nd.kind.value if nd.is_leaf else "transform"
        parents = "[" + ",".join(str(p) for p in nd.parents) + "]"
        attrs = json.dumps(dict(nd.attrs), separators=(",", ":"), sort_keys=True)
        lines.append(f"{nd.id} {kind} {_fmt_shape(nd.shape)} {parents} {nd.op or '-'} {attrs} {nd.name or '-'}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Graph:
    loss = attack_input = None
    leaves, transforms = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "loss":
                    loss = int(val)
                elif key == "attack_input" and val != "-":
                    attack_input = int(val)
            continue
        try:
            i, kind, shape, parents, opkind, attrs, name = line.split(" ")
            i = int(i)
            name = "" if name == "-" else name
            if kind == "transform":
                plist = [int(p) for p in parents.strip("[]").split(",") if p]
                transforms.append((i, opkind, plist, json.loads(attrs), name))
            else:
                leaves.append((i, LeafKind(kind), _parse_shape(shape), name))
        except ValueError as exc:
            raise GraphError(f"line {lineno}: cannot parse {line!r}: {exc}") from exc
    return build(leaves, transforms, loss=loss, attack_input=attack_input)
