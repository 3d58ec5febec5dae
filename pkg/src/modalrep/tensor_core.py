"""Dense float tensors with tape-based reverse-mode autodiff.

Every operation computes its forward value eagerly on numpy buffers. When a
GradTape is active (entered as a context manager) the op also appends a node
holding per-parent gradient closures; ``backward`` replays the tape in
reverse and returns gradients for the trainable leaves only, so frozen
parameters never receive a gradient entry.

Numerics policy: float32 is the working precision for models, float64 is used
by the oracles and gradient checks. Binary ops require matching dtypes. All
buffers are C-contiguous (row-major) and results are bit-deterministic for
fixed inputs: nothing here consumes global RNG state.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPES = ("float32", "float64")


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated (dtype, scalarness, ranges)."""


class Tensor:
    """N-dimensional float array plus autodiff metadata.

    ``data`` is always a C-contiguous numpy array of float32 or float64, so
    its flat buffer is the row-major scalar sequence of length prod(shape).
    NaN/Inf are representable; ``is_finite`` is the explicit check.
    """

    __slots__ = ("data", "trainable", "name")

    def __init__(self, data, dtype: str | None = None, trainable: bool = False,
                 name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = "float64" if arr.dtype == np.dtype("float64") else "float32"
        if dtype not in DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}; expected one of {DTYPES}")
        buf = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        # ascontiguousarray promotes 0-d to 1-d; keep scalars scalar
        self.data = buf.reshape(()) if arr.ndim == 0 else buf
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return str(self.data.dtype)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype, trainable=self.trainable,
                      name=self.name)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data, dtype=dtype, trainable=self.trainable, name=self.name)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable}{tag})"


def zeros(shape, dtype: str = "float32", trainable: bool = False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.dtype(dtype)), dtype=dtype,
                  trainable=trainable, name=name)


def ones(shape, dtype: str = "float32", trainable: bool = False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.dtype(dtype)), dtype=dtype,
                  trainable=trainable, name=name)


def normal(rng: np.random.Generator, shape, std: float = 1.0, dtype: str = "float32",
           trainable: bool = False, name=None) -> Tensor:
    data = rng.standard_normal(shape) * std
    return Tensor(data, dtype=dtype, trainable=trainable, name=name)


# ---------------------------------------------------------------------------
# Tape


class TapeNode:
    """One recorded operation. ``grad_fns[i]`` maps the output gradient to the
    gradient w.r.t. ``parents[i]``; saved activations live in those closures.
    Leaves have no parents and keep a reference to their tensor."""

    __slots__ = ("op", "parents", "grad_fns", "needs_grad", "tensor")

    def __init__(self, op: str, parents: tuple[int, ...],
                 grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] | None,
                 needs_grad: bool, tensor: "Tensor | None"):
        self.op = op
        self.parents = parents
        self.grad_fns = grad_fns
        self.needs_grad = needs_grad
        self.tensor = tensor


class GradTape:
    """Flat record of one traced forward pass.

    Nodes are appended in execution order, so every parent id precedes its
    children and a single reverse sweep is a valid topological replay. After
    ``backward`` runs, ``gradients`` maps node id -> gradient Tensor for every
    node that received one.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.gradients: dict[int, Tensor] = {}
        self._node_ids: dict[int, int] = {}
        self._refs: list[Tensor] = []  # keep tensors alive so id() keys stay valid

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _ensure_node(self, t: Tensor) -> int:
        nid = self._node_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(TapeNode("leaf", (), None, t.trainable, t))
            self._node_ids[id(t)] = nid
            self._refs.append(t)
        return nid

    def _register_output(self, t: Tensor, node: TapeNode) -> None:
        self._node_ids[id(t)] = len(self.nodes)
        self.nodes.append(node)
        self._refs.append(t)

    def node_id(self, t: Tensor) -> int | None:
        return self._node_ids.get(id(t))

    def grad_of(self, t: Tensor) -> Tensor | None:
        """Gradient of the last ``backward`` loss w.r.t. ``t`` (None if absent)."""
        nid = self._node_ids.get(id(t))
        return None if nid is None else self.gradients.get(nid)


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
          grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    out = Tensor(out_data, dtype=str(out_data.dtype))
    tape = _active_tape()
    if tape is not None:
        pids = tuple(tape._ensure_node(p) for p in parents)
        needs = any(tape.nodes[pid].needs_grad for pid in pids)
        tape._register_output(out, TapeNode(op, pids, tuple(grad_fns), needs, None))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[str, Tensor]:
    """Reverse sweep from a scalar loss; gradients for trainable leaves only.

    Gradient arrays still flow *through* frozen layers (their outputs carry
    gradient so earlier trainable parameters can be reached), but a frozen
    leaf itself never appears in the returned map.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    lid = tape.node_id(loss)
    if lid is None:
        raise ContractError("loss tensor was not recorded on this tape")
    grads: dict[int, np.ndarray] = {lid: np.ones((), dtype=loss.data.dtype)}
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or not node.parents or not node.needs_grad:
            continue
        for pid, fn in zip(node.parents, node.grad_fns):
            if not tape.nodes[pid].needs_grad:
                continue
            pg = fn(g)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    tape.gradients = {nid: Tensor(g) for nid, g in grads.items()}
    out: dict[str, Tensor] = {}
    for nid, node in enumerate(tape.nodes):
        if node.op != "leaf" or not node.tensor.trainable:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        name = node.tensor.name if node.tensor.name else f"leaf:{nid}"
        out[name] = Tensor(g)
    return out


# ---------------------------------------------------------------------------
# Op helpers


def _check_dtypes(op: str, *tensors: Tensor) -> str:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"{op}: mixed dtypes {dt} vs {t.dtype}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# Elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit("add", a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit("sub", a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 (lambda g: _unbroadcast(g * bd, a.shape),
                  lambda g: _unbroadcast(g * ad, b.shape)))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    sv = np.asarray(s, dtype=a.data.dtype)
    return _emit("mul_scalar", a.data * sv, (a,), (lambda g: g * sv,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data
    return _emit("silu", xd * sig, (x,),
                 (lambda g: g * (sig * (1.0 + xd * (1.0 - sig))),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_x(g):
        return (g - (g * out).sum(axis=axis, keepdims=True)) * out

    return _emit("softmax", out, (x,), (grad_x,))


def group_norm(x: Tensor, weight: Tensor, bias: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization over (C/groups, H, W), then per-channel affine."""
    _check_dtypes("group_norm", x, weight, bias)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [B,C,H,W], got {x.shape}")
    b_, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ContractError(f"group_norm: groups={groups} must divide channels={c}")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {weight.shape}/{bias.shape} "
                         f"need ({c},)")
    m = (c // groups) * h * w
    xg = x.data.reshape(b_, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (xg - mu) * inv_std
    xhat4 = xhat.reshape(b_, c, h, w)
    wd, bd = weight.data, bias.data
    out = xhat4 * wd[None, :, None, None] + bd[None, :, None, None]

    def grad_x(g):
        dxhat = (g * wd[None, :, None, None]).reshape(b_, groups, m)
        term = dxhat - dxhat.mean(axis=2, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=2, keepdims=True)
        return (term * inv_std).reshape(b_, c, h, w)

    def grad_w(g):
        return (g * xhat4).sum(axis=(0, 2, 3))

    def grad_b(g):
        return g.sum(axis=(0, 2, 3))

    return _emit("group_norm", out, (x, weight, bias), (grad_x, grad_w, grad_b))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    _check_dtypes("mse", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = np.asarray(diff.size, dtype=a.data.dtype)
    out = np.asarray((diff * diff).sum() / n, dtype=a.data.dtype)
    return _emit("mse", out, (a, b),
                 (lambda g: g * (2.0 * diff / n),
                  lambda g: g * (-2.0 * diff / n)))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _emit("sum", out, (x,),
                 (lambda g: g * np.ones(x.shape, dtype=x.data.dtype),))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional broadcast leading (batch) dims."""
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def grad_a(g):
        return _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)

    return _emit("matmul", out, (a, b), (grad_a, grad_b))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map of a stack of rows: x[N,in] @ weight[out,in].T + bias[out]."""
    _check_dtypes("linear", x, weight, *([bias] if bias is not None else []))
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x{x.shape} incompatible with weight{weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias{bias.shape} needs ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _emit("linear", out, (x, weight),
                     (lambda g: g @ wd, lambda g: g.T @ xd))
    out = out + bias.data
    return _emit("linear", out, (x, weight, bias),
                 (lambda g: g @ wd, lambda g: g.T @ xd, lambda g: g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Convolution (zero padding, square stride, no dilation/groups)


def _conv_out_dim(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B, C*kh*kw, ho*wo] patch matrix."""
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # [B,C,ho,wo,kh,kw]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            padding: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output spatial dims are floor((n + 2*padding - k) / stride) + 1.
    """
    _check_dtypes("conv2d", x, kernel, *([bias] if bias is not None else []))
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias{bias.shape} needs ({cout},)")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"conv2d: padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output dims ({ho},{wo}) for "
                         f"input {x.shape} kernel {kernel.shape} stride={stride} pad={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)            # [B, CKK, L]
    w2d = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2d, cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_x(g):
        g2d = g.reshape(b, cout, ho * wo)
        dcols = np.matmul(w2d.T, g2d)
        return _col2im(dcols, x.shape, kh, kw, stride, padding, ho, wo)

    def grad_k(g):
        g2d = g.reshape(b, cout, ho * wo)
        dw = np.matmul(g2d, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw.reshape(cout, cin, kh, kw)

    def grad_b(g):
        return g.sum(axis=(0, 2, 3))

    parents: tuple = (x, kernel)
    fns: tuple = (grad_x, grad_k)
    if bias is not None:
        parents += (bias,)
        fns += (grad_b,)
    return _emit("conv2d", out, parents, fns)


# ---------------------------------------------------------------------------
# Shape movement


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _emit("reshape", x.data.reshape(shape), (x,),
                 (lambda g: g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 (lambda g: np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    _check_dtypes("concat", *parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make_fn(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _emit("concat", out, tuple(parts), tuple(make_fn(i) for i in range(len(parts))))


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit("upsample2x", out, (x,),
                 (lambda g: g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


def index_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids] along axis 0 with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"index_rows needs a 1-D integer index, got {ids.dtype} {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"index_rows: index out of range for table of {table.shape[0]} rows")

    def grad_t(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids, g)
        return out

    return _emit("index_rows", table.data[ids], (table,), (grad_t,))


# ---------------------------------------------------------------------------
# Gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x.

    Perturbs x.data in place coordinate by coordinate (restored afterwards),
    so f must read x rather than a stale copy. f must be deterministic.
    """
    if eps <= 0:
        raise ContractError(f"finite_diff_grad: eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if fp.shape != () or fm.shape != ():
            raise ContractError("finite_diff_grad: f must return a scalar tensor")
        grad[i] = (fp.item() - fm.item()) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape), dtype=x.dtype)
