"""Dense numeric core.

Tensors are plain read-only ``numpy`` arrays of float64. Every kernel here
works on the trailing axes of its operands so the graph engine can carry an
optional leading batch axis through the same code.

Convolution is unpadded cross-correlation (no kernel flip). Max-pool ties go
to the first element in row-major window order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

ELEMENT_BYTES = 4  # accounting assumes fp32 storage
MAGIC = b"PELT"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


def as_tensor(data, shape=None) -> Tensor:
    """Validate and freeze ``data`` as a tensor.

    Raises ValueError on non-finite entries and ShapeError when ``shape`` is
    given and ``product(shape) != size``.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeError(f"{arr.size} elements do not fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def nbytes(shape) -> int:
    return int(np.prod(shape, dtype=np.int64)) * ELEMENT_BYTES


# --- matmul -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


# --- convolution --------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int) -> int:
    if k > size:
        raise ShapeError(f"window {k} exceeds input extent {size}")
    if stride < 1:
        raise ShapeError("stride must be positive")
    return (size - k) // stride + 1


def _windows(x: Tensor, kh: int, kw: int, stride: int) -> np.ndarray:
    # (..., C, Ho, Wo, kh, kw) view over the last two axes
    win = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` (..., C, H, W) with ``w`` (F, C, kh, kw)."""
    if x.ndim < 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (...,C,H,W) and (F,C,kh,kw), got {x.shape}, {w.shape}")
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[-3]}, kernel {w.shape[1]}")
    conv_output_size(x.shape[-2], w.shape[2], stride)
    conv_output_size(x.shape[-1], w.shape[3], stride)
    win = _windows(x, w.shape[2], w.shape[3], stride)
    return np.einsum("...chwij,fcij->...fhw", win, w, optimize=True)


def conv2d_grad_input(g: Tensor, w: Tensor, in_shape, stride: int) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input; ``in_shape`` is the input's (H, W)."""
    kh, kw = w.shape[2], w.shape[3]
    H, W = in_shape
    Ho, Wo = g.shape[-2], g.shape[-1]
    lead = g.shape[:-3]
    out = np.zeros(lead + (w.shape[1], H, W))
    # contributions per kernel offset: out[..., c, i*s+a, j*s+b] += sum_f g[f,i,j] w[f,c,a,b]
    for a in range(kh):
        for b in range(kw):
            contrib = np.einsum("...fhw,fc->...chw", g, w[:, :, a, b], optimize=True)
            out[..., a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride] += contrib
    return out


def conv2d_grad_weight(g: Tensor, x: Tensor, kshape, stride: int) -> Tensor:
    win = _windows(x, kshape[2], kshape[3], stride)
    return np.einsum("...fhw,...chwij->fcij", g, win, optimize=True)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Transposed convolution: ``x`` (..., Cin, h, w), ``w`` (Cin, Cout, kh, kw).

    Each input pixel scatters ``x[c,i,j] * w[c,:,:,:]`` into the output window
    anchored at ``(i*stride, j*stride)``. Output extent is ``(h-1)*stride + k``.
    """
    if x.ndim < 3 or w.ndim != 4 or x.shape[-3] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d shape mismatch: {x.shape}, {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    h, wd = x.shape[-2], x.shape[-1]
    Ho, Wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    out = np.zeros(x.shape[:-3] + (w.shape[1], Ho, Wo))
    for a in range(kh):
        for b in range(kw):
            contrib = np.einsum("...chw,co->...ohw", x, w[:, :, a, b], optimize=True)
            out[..., a:a + stride * (h - 1) + 1:stride, b:b + stride * (wd - 1) + 1:stride] += contrib
    return out


# --- max pooling ----------------------------------------------------------------

def maxpool2d(x: Tensor, k: int, stride: int | None = None):
    """Max over k x k windows of the last two axes.

    Returns ``(out, argmax)`` where ``argmax`` holds the flat in-window index
    (row-major) of the winning element; ties resolve to the first one.
    """
    stride = k if stride is None else stride
    if x.ndim < 2:
        raise ShapeError("maxpool2d needs at least two axes")
    conv_output_size(x.shape[-2], k, stride)
    conv_output_size(x.shape[-1], k, stride)
    win = _windows(x, k, k, stride)
    flat = win.reshape(win.shape[:-2] + (k * k,))
    arg = np.argmax(flat, axis=-1)  # numpy returns the first maximum
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_grad(g: Tensor, arg: np.ndarray, in_shape, k: int, stride: int) -> Tensor:
    out = np.zeros(g.shape[:-2] + tuple(in_shape))
    Ho, Wo = g.shape[-2], g.shape[-1]
    rows = (np.arange(Ho)[:, None] * stride + arg // k)
    cols = (np.arange(Wo)[None, :] * stride + arg % k)
    lead = np.indices(g.shape[:-2]) if g.ndim > 2 else ()
    idx = tuple(l[..., None, None] for l in lead) + (rows, cols)
    np.add.at(out, idx, g)
    return out


# --- softmax / cross-entropy -------------------------------------------------------

def log_softmax(z: Tensor) -> Tensor:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: Tensor) -> Tensor:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_ce(logits: Tensor, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError("softmax_ce needs a vector of at least two logits")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} outside [0, {logits.shape[0]})")
    return float(-log_softmax(logits)[label])


# --- binary container --------------------------------------------------------------

def dumps(t: Tensor) -> bytes:
    t = np.asarray(t)
    header = MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def loads(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    if buf[4] != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {buf[4]}")
    (rank,) = struct.unpack_from("<I", buf, 5)
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    offset = 9 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    payload = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    if offset + 4 * count != len(buf):
        raise ValueError("payload length does not match extents")
    return as_tensor(payload.astype(np.float64).reshape(shape))


def save(path, t: Tensor) -> None:
    Path(path).write_bytes(dumps(t))


def load(path) -> Tensor:
    return loads(Path(path).read_bytes())
