"""Transform vocabulary for computational graphs.

Each op knows how to infer its per-sample output shape, evaluate itself and
pull an output adjoint back to one of its arguments (vector-Jacobian product).
Runtime arrays may carry extra leading (batch) axes relative to the declared
per-sample shapes; parameters never do, so broadcast results are summed back
down in the VJP.

``jacobian_numel`` gives the element count of the compact representation of a
local Jacobian, used for enclave memory accounting: operators whose Jacobian
is a weight (linear, conv) cost that weight, index maps and elementwise ops
cost one entry per output, row-coupled ops (softmax, layernorm) cost a dense
block per row.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError

GELU_C = math.sqrt(2.0 / math.pi)


def _numel(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Op:
    name = ""
    arity: int | None = 1
    differentiable = True

    def check_arity(self, n):
        if self.arity is not None and n != self.arity:
            raise ShapeError(f"{self.name} takes {self.arity} argument(s), got {n}")
        if self.arity is None and n < 1:
            raise ShapeError(f"{self.name} needs at least one argument")

    def infer(self, shapes, **attrs):
        raise NotImplementedError

    def forward(self, args, shapes, **attrs):
        """Return ``(out, aux)``; ``aux`` is cached for the backward pass."""
        raise NotImplementedError

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        raise NotImplementedError

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(out_shape)


class Elementwise(Op):
    def infer(self, shapes, **attrs):
        return tuple(shapes[0])

    def forward(self, args, shapes, **attrs):
        return self.fn(args[0], **attrs), None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return g * self.deriv(args[0], out, **attrs)


class Identity(Elementwise):
    name = "identity"

    def fn(self, x):
        return x

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return g


class Scale(Elementwise):
    name = "scale"

    def fn(self, x, c):
        return x * c

    def vjp(self, k, g, args, out, aux, shapes, c):
        return g * c


class Relu(Elementwise):
    name = "relu"

    def fn(self, x):
        return np.maximum(x, 0.0)

    def deriv(self, x, out):
        return (x > 0).astype(x.dtype)


class Tanh(Elementwise):
    name = "tanh"

    def fn(self, x):
        return np.tanh(x)

    def deriv(self, x, out):
        return 1.0 - out * out


class Square(Elementwise):
    name = "square"

    def fn(self, x):
        return x * x

    def deriv(self, x, out):
        return 2.0 * x


class Gelu(Elementwise):
    name = "gelu"

    def fn(self, x):
        return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))

    def deriv(self, x, out):
        t = np.tanh(GELU_C * (x + 0.044715 * x**3))
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


class Binary(Op):
    arity = 2

    def infer(self, shapes, **attrs):
        try:
            return tuple(np.broadcast_shapes(tuple(shapes[0]), tuple(shapes[1])))
        except ValueError as exc:
            raise ShapeError(f"{self.name}: {shapes[0]} and {shapes[1]} do not broadcast") from exc


class Add(Binary):
    name = "add"

    def forward(self, args, shapes, **attrs):
        return args[0] + args[1], None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return unbroadcast(g, args[k].shape)


class Sub(Binary):
    name = "sub"

    def forward(self, args, shapes, **attrs):
        return args[0] - args[1], None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return unbroadcast(g if k == 0 else -g, args[k].shape)


class Mul(Binary):
    name = "mul"

    def forward(self, args, shapes, **attrs):
        return args[0] * args[1], None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return unbroadcast(g * args[1 - k], args[k].shape)


class Sum(Op):
    name = "sum"

    def infer(self, shapes, **attrs):
        return ()

    def forward(self, args, shapes, **attrs):
        return np.asarray(args[0].sum()), None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return np.full(args[0].shape, float(g))

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(shapes[0])


class Linear(Op):
    """``x @ W`` over the last axis of ``x``; ``W`` is (D, K)."""

    name = "linear"
    arity = 2

    def infer(self, shapes, **attrs):
        x, w = shapes
        if len(w) != 2 or len(x) < 1 or x[-1] != w[0]:
            raise ShapeError(f"linear: cannot apply weight {w} to {x}")
        return tuple(x[:-1]) + (w[1],)

    def forward(self, args, shapes, **attrs):
        return args[0] @ args[1], None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        x, w = args
        if k == 0:
            return g @ w.T
        return x.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(shapes[1 - k])


class Matmul(Op):
    """Matrix product over the last two axes, both operands activations."""

    name = "matmul"
    arity = 2

    def infer(self, shapes, **attrs):
        a, b = shapes
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise ShapeError(f"matmul: inner extents differ in {a} x {b}")
        lead = np.broadcast_shapes(tuple(a[:-2]), tuple(b[:-2]))
        return tuple(lead) + (a[-2], b[-1])

    def forward(self, args, shapes, **attrs):
        return np.matmul(args[0], args[1]), None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        a, b = args
        if k == 0:
            return unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        return unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(shapes[1 - k])


class Transpose(Op):
    name = "transpose"

    def infer(self, shapes, **attrs):
        s = tuple(shapes[0])
        if len(s) < 2:
            raise ShapeError("transpose needs rank >= 2")
        return s[:-2] + (s[-1], s[-2])

    def forward(self, args, shapes, **attrs):
        return np.swapaxes(args[0], -1, -2), None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return np.swapaxes(g, -1, -2)


class Softmax(Op):
    name = "softmax"

    def infer(self, shapes, **attrs):
        return tuple(shapes[0])

    def forward(self, args, shapes, **attrs):
        return T.softmax(args[0]), None

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        return out * (g - np.sum(g * out, axis=-1, keepdims=True))

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        n = out_shape[-1]
        return _numel(out_shape) // n * n * n


class LayerNorm(Op):
    """Normalise the last axis to zero mean and unit variance (no affine)."""

    name = "layernorm"

    def infer(self, shapes, **attrs):
        return tuple(shapes[0])

    def forward(self, args, shapes, eps=1e-5):
        x = args[0]
        mu = x.mean(axis=-1, keepdims=True)
        sigma = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        xhat = (x - mu) / sigma
        return xhat, sigma

    def vjp(self, k, g, args, out, aux, shapes, eps=1e-5):
        xhat, sigma = out, aux
        return (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / sigma

    jacobian_numel = Softmax.jacobian_numel


class WeightStandardize(Op):
    """Per-output-filter standardisation of a weight tensor (F, ...)."""

    name = "wstd"

    def infer(self, shapes, **attrs):
        s = tuple(shapes[0])
        if len(s) < 2:
            raise ShapeError("wstd expects a filter bank of rank >= 2")
        return s

    def forward(self, args, shapes, eps=1e-5):
        w = args[0]
        flat = w.reshape(w.shape[0], -1)
        mu = flat.mean(axis=1, keepdims=True)
        sigma = np.sqrt(flat.var(axis=1, keepdims=True) + eps)
        return ((flat - mu) / sigma).reshape(w.shape), sigma

    def vjp(self, k, g, args, out, aux, shapes, eps=1e-5):
        n = g.shape[0]
        g2 = g.reshape(n, -1)
        xhat = out.reshape(n, -1)
        d = (g2 - g2.mean(axis=1, keepdims=True)
             - xhat * (g2 * xhat).mean(axis=1, keepdims=True)) / aux
        return d.reshape(g.shape)

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        per = _numel(out_shape[1:])
        return out_shape[0] * per * per


class Slice(Op):
    """Columns ``start:stop`` of the last axis."""

    name = "slice"

    def infer(self, shapes, start, stop):
        s = tuple(shapes[0])
        if not 0 <= start < stop <= s[-1]:
            raise ShapeError(f"slice {start}:{stop} outside last extent {s[-1]}")
        return s[:-1] + (stop - start,)

    def forward(self, args, shapes, start, stop):
        return args[0][..., start:stop], None

    def vjp(self, k, g, args, out, aux, shapes, start, stop):
        full = np.zeros(args[0].shape)
        full[..., start:stop] = g
        return full


class Concat(Op):
    name = "concat"
    arity = None

    def infer(self, shapes, axis=-1):
        ranks = {len(s) for s in shapes}
        if len(ranks) != 1:
            raise ShapeError(f"concat: ranks differ in {shapes}")
        rank = ranks.pop()
        ax = axis % rank
        base = list(shapes[0])
        for s in shapes[1:]:
            if any(s[i] != base[i] for i in range(rank) if i != ax):
                raise ShapeError(f"concat: {shapes} disagree off axis {axis}")
        base[ax] = sum(s[ax] for s in shapes)
        return tuple(base)

    def forward(self, args, shapes, axis=-1):
        rank = len(shapes[0])
        lead = np.broadcast_shapes(*[a.shape[:a.ndim - rank] for a in args])
        parts = [np.broadcast_to(a, lead + a.shape[a.ndim - rank:]) for a in args]
        return np.concatenate(parts, axis=axis), None

    def vjp(self, k, g, args, out, aux, shapes, axis=-1):
        rank = len(shapes[0])
        ax = axis % rank - rank
        start = sum(s[ax] for s in shapes[:k])
        idx = [slice(None)] * g.ndim
        idx[ax] = slice(start, start + shapes[k][ax])
        return unbroadcast(g[tuple(idx)], args[k].shape)


class Select(Op):
    """Pick entry ``index`` along ``axis``, dropping that axis."""

    name = "select"

    def infer(self, shapes, index, axis=-2):
        s = tuple(shapes[0])
        ax = axis % len(s)
        if not 0 <= index < s[ax]:
            raise ShapeError(f"select index {index} outside extent {s[ax]}")
        return s[:ax] + s[ax + 1:]

    def forward(self, args, shapes, index, axis=-2):
        return np.take(args[0], index, axis=axis), None

    def vjp(self, k, g, args, out, aux, shapes, index, axis=-2):
        full = np.zeros(args[0].shape)
        idx = [slice(None)] * full.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return full


class Reshape(Op):
    name = "reshape"

    def infer(self, shapes, shape):
        shape = tuple(shape)
        if _numel(shape) != _numel(shapes[0]):
            raise ShapeError(f"cannot reshape {shapes[0]} to {shape}")
        return shape

    def forward(self, args, shapes, shape):
        a = args[0]
        lead = a.shape[:a.ndim - len(shapes[0])]
        return a.reshape(lead + tuple(shape)), None

    def vjp(self, k, g, args, out, aux, shapes, shape):
        return g.reshape(args[0].shape)


class Patchify(Op):
    """(C, H, W) image to (N, C*P*P) rows of non-overlapping P x P patches."""

    name = "patchify"

    def infer(self, shapes, patch):
        s = tuple(shapes[0])
        if len(s) != 3:
            raise ShapeError(f"patchify expects (C,H,W), got {s}")
        c, h, w = s
        if h % patch or w % patch:
            raise ShapeError(f"patch {patch} does not divide {h}x{w}")
        return ((h // patch) * (w // patch), c * patch * patch)

    def forward(self, args, shapes, patch):
        x = args[0]
        lead = x.shape[:-3]
        c, h, w = x.shape[-3:]
        nh, nw = h // patch, w // patch
        y = x.reshape(lead + (c, nh, patch, nw, patch))
        n = len(lead)
        y = y.transpose(tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
        return y.reshape(lead + (nh * nw, c * patch * patch)), None

    def vjp(self, k, g, args, out, aux, shapes, patch):
        lead = g.shape[:-2]
        c, h, w = shapes[0]
        nh, nw = h // patch, w // patch
        n = len(lead)
        y = g.reshape(lead + (nh, nw, c, patch, patch))
        y = y.transpose(tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4))
        return y.reshape(lead + (c, h, w))


class Conv2d(Op):
    name = "conv2d"
    arity = 2

    def infer(self, shapes, stride=1):
        x, w = (tuple(s) for s in shapes)
        if len(x) != 3 or len(w) != 4:
            raise ShapeError(f"conv2d expects (C,H,W) and (F,C,kh,kw), got {x}, {w}")
        if x[0] != w[1]:
            raise ShapeError(f"conv2d channel mismatch {x} vs {w}")
        return (w[0], T.conv_output_size(x[1], w[2], stride), T.conv_output_size(x[2], w[3], stride))

    def forward(self, args, shapes, stride=1):
        return T.conv2d(args[0], args[1], stride), None

    def vjp(self, k, g, args, out, aux, shapes, stride=1):
        x, w = args
        if k == 0:
            return T.conv2d_grad_input(g, w, x.shape[-2:], stride)
        return T.conv2d_grad_weight(g, x, w.shape, stride)

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(shapes[1 - k])


class MaxPool2d(Op):
    name = "maxpool2d"

    def infer(self, shapes, size, stride=None):
        s = tuple(shapes[0])
        stride = size if stride is None else stride
        if len(s) < 2:
            raise ShapeError("maxpool2d needs rank >= 2")
        return s[:-2] + (T.conv_output_size(s[-2], size, stride), T.conv_output_size(s[-1], size, stride))

    def forward(self, args, shapes, size, stride=None):
        return T.maxpool2d(args[0], size, stride)

    def vjp(self, k, g, args, out, aux, shapes, size, stride=None):
        stride = size if stride is None else stride
        return T.maxpool2d_grad(g, aux, args[0].shape[-2:], size, stride)


class SoftmaxCE(Op):
    """Cross-entropy of logits (..., K) against one-hot targets, summed over samples."""

    name = "softmax_ce"
    arity = 2

    def infer(self, shapes, **attrs):
        z, y = (tuple(s) for s in shapes)
        if z != y or len(z) < 1 or z[-1] < 2:
            raise ShapeError(f"softmax_ce needs matching (.., K>=2) shapes, got {z}, {y}")
        return ()

    def forward(self, args, shapes, **attrs):
        z, y = args
        logp = T.log_softmax(z)
        return np.asarray(-np.sum(y * logp)), logp

    def vjp(self, k, g, args, out, aux, shapes, **attrs):
        z, y = args
        logp = aux
        if k == 0:
            return g * (np.exp(logp) * y.sum(axis=-1, keepdims=True) - y)
        return -g * logp

    def jacobian_numel(self, k, shapes, out_shape, **attrs):
        return _numel(shapes[k])


OPS: dict[str, Op] = {op.name: op for op in (
    Identity(), Scale(), Relu(), Tanh(), Square(), Gelu(),
    Add(), Sub(), Mul(), Sum(), Linear(), Matmul(), Transpose(), Softmax(),
    LayerNorm(), WeightStandardize(), Slice(), Concat(), Select(), Reshape(),
    Patchify(), Conv2d(), MaxPool2d(), SoftmaxCE(),
)}


def get(name: str) -> Op:
    try:
        return OPS[name]
    except KeyError:
        raise KeyError(f"unknown op kind {name!r}") from None
