"""Minimal reverse-mode automatic differentiation over dense tensors.

Implements exactly the operator set the segmentation network and its
losses require: 3x3 convolutions (replicate-padded and stride-2
transposed), 2x2 pooling, sigmoid / relu / log, per-pixel channel
softmax, elementwise arithmetic, channel concatenation and full
reduction to a scalar. Graphs are define-by-run, single-use, and freed
after each backward pass. No broadcasting, no higher-order gradients.

Also provides a central finite-difference gradient checker and the
binary parameter-checkpoint format (magic ``EVAW1\\n``).
"""

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_UID = itertools.count()

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """An autodiff value: data, a same-shape gradient slot, provenance.

    Tensors built by operators carry a backward closure; leaves do not.
    Gradient accumulation across repeated backward passes is additive
    for leaves (zero them explicitly between optimizer steps).
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_uid")

    def __init__(self, data, dtype=None, parents=(), backward=None):
        a = np.asarray(data)
        if dtype is not None:
            a = a.astype(dtype, copy=False)
        elif a.dtype not in _FLOAT_DTYPES:
            a = a.astype(np.float64)
        if not (a.flags.c_contiguous and a.flags.writeable):
            a = a.copy()
        self.data = a
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._uid = next(_UID)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def sum(self):
        return sum_all(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))


def _check_same_shape(x, y):
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {y.data.shape}")
    if x.data.dtype != y.data.dtype:
        raise ValueError(f"dtype mismatch: {x.data.dtype} vs {y.data.dtype}")


def add(x, y):
    _check_same_shape(x, y)

    def bwd(g):
        x.grad += g
        y.grad += g

    return Tensor(x.data + y.data, parents=(x, y), backward=bwd)


def mul(x, y):
    """Elementwise product of same-shape tensors."""
    _check_same_shape(x, y)

    def bwd(g):
        x.grad += g * y.data
        y.grad += g * x.data

    return Tensor(x.data * y.data, parents=(x, y), backward=bwd)


def scale(x, s):
    s = x.data.dtype.type(s)

    def bwd(g):
        x.grad += g * s

    return Tensor(x.data * s, parents=(x,), backward=bwd)


def shift(x, s):
    def bwd(g):
        x.grad += g

    return Tensor(x.data + x.data.dtype.type(s), parents=(x,), backward=bwd)


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def bwd(g):
        x.grad += g * y * (1.0 - y)

    return Tensor(y, parents=(x,), backward=bwd)


def relu(x):
    mask = x.data > 0

    def bwd(g):
        x.grad += g * mask

    return Tensor(np.where(mask, x.data, 0), parents=(x,), backward=bwd)


def log(x):
    def bwd(g):
        x.grad += g / x.data

    return Tensor(np.log(x.data), parents=(x,), backward=bwd)


def sum_all(x):
    def bwd(g):
        x.grad += g

    return Tensor(x.data.sum(), parents=(x,), backward=bwd)


def softmax_channel(x):
    """Per-pixel softmax across the channel axis of a (C,H,W) tensor.

    Numerically stable (per-pixel max subtracted before exponentiation).
    """
    if x.data.ndim != 3:
        raise ValueError("softmax_channel expects a (C,H,W) tensor")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        x.grad += y * (g - (g * y).sum(axis=0, keepdims=True))

    return Tensor(y, parents=(x,), backward=bwd)


def concat_channel(x, y):
    if x.data.ndim != 3 or y.data.ndim != 3:
        raise ValueError("concat_channel expects (C,H,W) tensors")
    if x.data.shape[1:] != y.data.shape[1:]:
        raise ValueError("spatial dims differ")
    cx = x.data.shape[0]

    def bwd(g):
        x.grad += g[:cx]
        y.grad += g[cx:]

    return Tensor(
        np.concatenate([x.data, y.data], axis=0), parents=(x, y), backward=bwd
    )


@dataclass
class ConvParams:
    """Weights of one 3x3 convolution: kernel (out_ch, in_ch, 3, 3), bias (out_ch,)."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        k = self.kernel.data
        if k.ndim != 4 or k.shape[2:] != (3, 3):
            raise ValueError("kernel must have shape (out_ch, in_ch, 3, 3)")
        if self.bias.data.shape != (k.shape[0],):
            raise ValueError("bias must have shape (out_ch,)")

    @property
    def in_ch(self):
        return self.kernel.data.shape[1]

    @property
    def out_ch(self):
        return self.kernel.data.shape[0]


def conv2d_replicate(x, p):
    """3x3 stride-1 convolution with 1-pixel edge-replication padding."""
    if x.data.ndim != 3:
        raise ValueError("conv2d_replicate expects a (C,H,W) tensor")
    if x.data.shape[0] != p.in_ch:
        raise ValueError(
            f"channel mismatch: input has {x.data.shape[0]}, kernel expects {p.in_ch}"
        )
    k, b = p.kernel, p.bias
    y = kernels.conv2d_fwd(x.data, k.data, b.data)

    def bwd(g):
        gx, gk, gb = kernels.conv2d_bwd(x.data, k.data, np.ascontiguousarray(g))
        x.grad += gx
        k.grad += gk
        b.grad += gb

    return Tensor(y, parents=(x, k, b), backward=bwd)


def conv2d_transpose(x, p):
    """3x3 stride-2 transposed convolution; spatial dims exactly double."""
    if x.data.ndim != 3:
        raise ValueError("conv2d_transpose expects a (C,H,W) tensor")
    if x.data.shape[0] != p.in_ch:
        raise ValueError(
            f"channel mismatch: input has {x.data.shape[0]}, kernel expects {p.in_ch}"
        )
    k, b = p.kernel, p.bias
    y = kernels.conv2d_transpose_fwd(x.data, k.data, b.data)

    def bwd(g):
        gx, gk, gb = kernels.conv2d_transpose_bwd(
            x.data, k.data, np.ascontiguousarray(g)
        )
        x.grad += gx
        k.grad += gk
        b.grad += gb

    return Tensor(y, parents=(x, k, b), backward=bwd)


def conv1x1(x, w, b):
    """Pointwise (1x1) convolution: per-pixel linear map across channels.

    w has shape (out_ch, in_ch), b has shape (out_ch,).
    """
    if x.data.ndim != 3:
        raise ValueError("conv1x1 expects a (C,H,W) tensor")
    if w.data.ndim != 2 or x.data.shape[0] != w.data.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.data.shape[0]}, weight expects "
            f"{w.data.shape[1] if w.data.ndim == 2 else '?'}"
        )
    y = np.tensordot(w.data, x.data, axes=([1], [0])) + b.data[:, None, None]

    def bwd(g):
        x.grad += np.tensordot(w.data.T, g, axes=([1], [0]))
        w.grad += np.einsum("ohw,chw->oc", g, x.data)
        b.grad += g.sum(axis=(1, 2))

    return Tensor(np.ascontiguousarray(y), parents=(x, w, b), backward=bwd)


def _check_even_dims(x, op):
    if x.data.ndim != 3:
        raise ValueError(f"{op} expects a (C,H,W) tensor")
    if x.data.shape[1] % 2 or x.data.shape[2] % 2:
        raise ValueError(f"{op} needs even spatial dims, got {x.data.shape[1:]}")


def max_pool_2(x):
    """2x2 max pooling; gradient goes to the first max in row-major scan."""
    _check_even_dims(x, "max_pool_2")

    def bwd(g):
        x.grad += kernels.max_pool2_bwd(x.data, np.ascontiguousarray(g))

    return Tensor(kernels.max_pool2_fwd(x.data), parents=(x,), backward=bwd)


def avg_pool_2(x):
    """2x2 average pooling; gradient spreads equally over the window."""
    _check_even_dims(x, "avg_pool_2")

    def bwd(g):
        x.grad += kernels.avg_pool2_bwd(np.ascontiguousarray(g))

    return Tensor(kernels.avg_pool2_fwd(x.data), parents=(x,), backward=bwd)


def backward(root):
    """Propagate gradients from a scalar root to every reachable leaf.

    Interior gradients are freshly zeroed; leaf gradients accumulate
    across calls (first use allocates zeros). Nodes are visited in
    reverse construction order, so accumulation is deterministic. The
    graph is freed afterwards: a root cannot be backpropagated twice.
    """
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._uid, reverse=True)
    for t in nodes:
        if t._backward is not None or t.grad is None:
            t.grad = np.zeros_like(t.data)
    root.grad = np.ones_like(root.data)
    for t in nodes:
        if t._backward is not None:
            t._backward(t.grad)
            t._backward = None
            t._parents = ()


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float
    kinked: bool = False


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def checked(self):
        return [e for e in self.entries if not e.kinked]

    @property
    def skipped(self):
        return [e for e in self.entries if e.kinked]

    @property
    def max_rel_err(self):
        errs = [e.rel_err for e in self.checked]
        return max(errs) if errs else 0.0

    @property
    def passed(self):
        return all(e.rel_err <= self.tol for e in self.checked)

    def summary(self):
        return (
            f"{'PASS' if self.passed else 'FAIL'}: "
            f"{len(self.checked)} checked, {len(self.skipped)} skipped at kinks, "
            f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"
        )


def grad_check(build, params, eps=1e-3, tol=1e-4, samples=None, seed=0):
    """Compare analytic gradients against central finite differences.

    ``build`` reconstructs the scalar loss graph from the current
    parameter data; ``params`` is an iterable of (name, Tensor) pairs.
    Relative error per element is |ad - fd| / max(1e-8, |ad| + |fd|).
    Elements whose two one-sided differences disagree strongly sit on a
    kink (pool tie, relu zero, confidence branch switch) where the
    derivative is one-sided by design; they are flagged and skipped.

    ``samples`` caps the number of elements checked per parameter
    (seeded random choice); None checks every element.
    """
    params = list(dict(params).items())
    zero_grads([t for _, t in params])
    root = build()
    backward(root)
    analytic = {name: np.array(t.grad, copy=True) for name, t in params}
    f0 = root.item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, t in params:
        n = t.data.size
        if samples is not None and samples < n:
            idxs = np.sort(rng.choice(n, size=samples, replace=False))
        else:
            idxs = range(n)
        flat = t.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build().item()
            flat[i] = orig - eps
            f_minus = build().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            d_plus = (f_plus - f0) / eps
            d_minus = (f0 - f_minus) / eps
            kinked = abs(d_plus - d_minus) > 0.25 * max(
                abs(d_plus), abs(d_minus), 1e-6
            )
            ad = float(analytic[name].reshape(-1)[i])
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            report.entries.append(
                GradCheckEntry(name, int(i), ad, fd, rel, kinked)
            )
    return report


# ---------------------------------------------------------------------------
# parameter checkpoints

_PARAM_MAGIC = b"EVAW1\n"


def save_params(path, params):
    """Write named float32 tensors to a checkpoint file.

    Layout, little-endian: magic ``EVAW1\\n``, u32 tensor count, then per
    tensor u32 name length, name bytes (utf-8), u32 rank, u32 dims[rank],
    float32 payload. Round-trips bit-exactly.
    """
    items = [(name, np.asarray(a.data if isinstance(a, Tensor) else a)) for name, a in dict(params).items()]
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype=np.float32)
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_params(path):
    """Read a checkpoint back as an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_PARAM_MAGIC)] != _PARAM_MAGIC:
        raise ValueError(f"bad magic in checkpoint {path}")
    off = len(_PARAM_MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"truncated checkpoint {path}: short {what}")
        out = blob[off : off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4")
        out[name] = data.reshape(dims).copy()
    return out
