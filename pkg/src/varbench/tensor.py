"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Graphs are built implicitly: every primitive returns a new ``Tensor`` that
remembers its parents and a closure computing the vector-Jacobian product.
There is no global tape, so independent graphs can be built concurrently.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform to the primitive's shape rules."""


class GradientError(RuntimeError):
    """Raised on misuse of ``backward`` (non-scalar loss, double backward)."""


class Tensor:
    """Dense n-d value with an optional gradient slot.

    ``requires_grad`` marks a leaf as something whose gradient we want
    (a parameter, or an input image during an attack).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @classmethod
    def view(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> Tensor:
        """Wrap an existing float64 array without copying (optimizers update it in place)."""
        if arr.dtype != DTYPE:
            raise TypeError(f"Tensor.view needs a float64 array, got {arr.dtype}")
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = requires_grad
        out.name = name
        out._parents = ()
        out._vjp = None
        out._consumed = False
        return out

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = None
        out._parents = parents if out.requires_grad else ()
        out._vjp = vjp if out.requires_grad else None
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------- graph


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None, accumulate: bool = False) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaves passed in ``leaves`` that the loss does not depend on receive a
    zero gradient. A second backward through the same graph, or into a leaf
    that still holds a gradient, raises unless ``accumulate`` is set.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed and not accumulate:
        raise GradientError("backward already called on this graph; rebuild it or pass accumulate=True")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached_leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                reached_leaves.append(node)
                grads[id(node)] = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if not accumulate:
        for leaf in reached_leaves:
            if leaf.grad is not None:
                raise GradientError(
                    f"leaf {leaf.name or leaf.shape} already holds a gradient; call zero_grad first"
                )
    for leaf in reached_leaves:
        g = grads[id(leaf)]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    loss._consumed = True


# ------------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ B.T if need_a else None), (A.T @ g if need_b else None)

    return Tensor._from_op(A @ B, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a per-channel bias (1-d, length ``a.shape[1]``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g

        return Tensor._from_op(a.data + b.data, (a, b), vjp)
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[1] == b.shape[0]:
        view = (1, -1) + (1,) * (a.data.ndim - 2)
        reduce_axes = (0,) + tuple(range(2, a.data.ndim))

        def vjp(g):
            return g, g.sum(axis=reduce_axes)

        return Tensor._from_op(a.data + b.data.reshape(view), (a, b), vjp)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return Tensor._from_op(a.data * factor, (a,), vjp)


def shift(a: Tensor, offset: float) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g,)

    return Tensor._from_op(a.data + float(offset), (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data

    def vjp(g):
        return g * B, g * A

    return Tensor._from_op(A * B, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def tensor_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum()), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # derivative at 0 is 0

    def vjp(g):
        return (g * mask,)

    # NaN inputs stay NaN rather than being masked to 0
    return Tensor._from_op(np.where(mask | np.isnan(a.data), a.data, 0.0), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), vjp)


def global_avg_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), mean over the spatial axes."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {a.shape}")
    n, c, h, w = a.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return Tensor._from_op(a.data.mean(axis=(2, 3)), (a,), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OIHW kernel, zero padded."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    K = kernel.data
    out = np.zeros((n, o, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            patch = xp[:, :, hs, ws]  # (n, c, ho, wo)
            out += np.einsum("nchw,oc->nohw", patch, K[:, :, i, j], optimize=True)

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def vjp(g):
        dxp = np.zeros_like(xp) if need_x else None
        dK = np.empty_like(K) if need_k else None
        for i in range(kh):
            for j in range(kw):
                hs = slice(i, i + stride * (ho - 1) + 1, stride)
                ws = slice(j, j + stride * (wo - 1) + 1, stride)
                if need_k:
                    dK[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[:, :, hs, ws], optimize=True)
                if need_x:
                    dxp[:, :, hs, ws] += np.einsum("nohw,oc->nchw", g, K[:, :, i, j], optimize=True)
        dx = None
        if need_x:
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dK

    return Tensor._from_op(out, (x, kernel), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer or one-hot labels."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, m) logits, got {logits.shape}")
    n, m = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, m):
            raise ShapeError(f"one-hot labels {labels.shape} do not match logits {logits.shape}")
        target = labels.astype(DTYPE)
    else:
        if labels.shape != (n,):
            raise ShapeError(f"labels {labels.shape} do not match batch size {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= m):
            raise ShapeError(f"labels must lie in [0, {m})")
        target = np.zeros((n, m), dtype=DTYPE)
        target[np.arange(n), labels.astype(int)] = 1.0
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    loss = -(target * log_probs).sum() / n
    probs = np.exp(log_probs)

    def vjp(g):
        return (g * (probs * target.sum(axis=1, keepdims=True) - target) / n,)

    return Tensor._from_op(np.asarray(loss), (logits,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    size = diff.size

    def vjp(g):
        d = g * 2.0 * diff / size
        return d, -d

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), vjp)


def l2_norm(a: Tensor) -> Tensor:
    a = as_tensor(a)
    norm = float(np.sqrt((a.data * a.data).sum()))

    def vjp(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return Tensor._from_op(np.asarray(norm), (a,), vjp)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=DTYPE)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


PRIMITIVES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "global_avg_pool": global_avg_pool,
    "add": add,
    "scale": scale,
    "sigmoid": sigmoid,
    "softmax_cross_entropy": softmax_cross_entropy,
    "mse": mse,
    "l2_norm": l2_norm,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads, strict=True):
            if p.shape != g.shape:
                raise ShapeError(f"sgd: param {p.shape} vs grad {g.shape}")
            p -= self.lr * g


class Adam:
    """Adam with bias correction; state is keyed by position in ``params``."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def reset(self) -> None:
        self.t = 0
        self.m = self.v = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeError("adam: params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"adam: param {p.shape} vs grad {g.shape}")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(kind: str, params, grads, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, state=None):
    """Functional front door: one update of ``params`` in place.

    For ``adam`` pass the returned state back in on the next call.
    """
    if kind == "sgd":
        opt = state or SGD(lr)
    elif kind == "adam":
        opt = state or Adam(lr, betas, eps)
    else:
        raise ValueError(f"unknown optimizer {kind!r}")
    opt.step(params, grads)
    return opt


# ------------------------------------------------------------------ init + I/O


def fan_in_uniform(rng: np.random.Generator, shape: Sequence[int], gain: float = 2.0, fan_in: int | None = None) -> np.ndarray:
    """U(-b, b) with b = sqrt(3 * gain / fan_in); gain 2 suits ReLU layers, 1 a linear head."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


CHECKPOINT_MAGIC = b"VBTC"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in the little-endian checkpoint layout.

    header: magic(4s) version(u32) count(u32)
    per tensor: name_len(u32) name(utf-8) rank(u32) dims(u64 * rank) data(f64 * prod(dims))
    """
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(DTYPE)
        off += 8 * size
        out[name] = data.reshape(dims)
    return out
