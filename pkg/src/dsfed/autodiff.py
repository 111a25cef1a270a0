"""Minimal dense-tensor reverse-mode autodiff on float64 numpy arrays.

Just enough machinery to train the two desk-scale segmentation nets and
differentiate every loss used in the simulator: elementwise arithmetic,
matmul, same-padded stride-1 convolution, 2x2 pooling, sigmoid/log/exp/clamp
and axis reductions. Tensors are immutable after construction except for
gradient accumulation and explicit optimizer steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-7  # probabilities are clamped to [PROB_FLOOR, 1-PROB_FLOOR] before any log


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- graph construction -------------------------------------------------

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward_fn, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grad on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_fn is None and not self._parents:
            raise GradientError("backward called on a tensor with no recorded history")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.float64(other))

    def _check_elementwise(self, other: "Tensor", op: str) -> None:
        # only same-shape or scalar broadcasting is supported
        if other.data.shape != self.data.shape and other.data.size != 1 and self.data.size != 1:
            raise ShapeError(f"{op}: incompatible shapes {self.data.shape} vs {other.data.shape}")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        if g.shape == shape:
            return g
        # only scalar broadcasting is supported, so the target holds one element
        return np.sum(g).reshape(shape)

    def __add__(self, other):
        o = self._coerce(other)
        self._check_elementwise(o, "add")

        def bwd(g):
            if self.requires_grad:
                self._accum(self._reduce_to(g, self.data.shape))
            if o.requires_grad:
                o._accum(self._reduce_to(g, o.data.shape))

        return Tensor._node(self.data + o.data, (self, o), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._node(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        o = self._coerce(other)
        self._check_elementwise(o, "mul")

        def bwd(g):
            if self.requires_grad:
                self._accum(self._reduce_to(g * o.data, self.data.shape))
            if o.requires_grad:
                o._accum(self._reduce_to(g * self.data, o.data.shape))

        return Tensor._node(self.data * o.data, (self, o), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        self._check_elementwise(o, "div")

        def bwd(g):
            if self.requires_grad:
                self._accum(self._reduce_to(g / o.data, self.data.shape))
            if o.requires_grad:
                o._accum(self._reduce_to(-g * self.data / (o.data * o.data), o.data.shape))

        return Tensor._node(self.data / o.data, (self, o), bwd, "div")

    # -- nonlinearities -----------------------------------------------------

    def sigmoid(self):
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * out * (1.0 - out))

        return Tensor._node(out, (self,), bwd, "sigmoid")

    def log(self):
        if np.any(self.data <= 0.0):
            raise NonFiniteError("log of non-positive input; clamp first")

        def bwd(g):
            if self.requires_grad:
                self._accum(g / self.data)

        return Tensor._node(np.log(self.data), (self,), bwd, "log")

    def exp(self):
        out = np.exp(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * out)

        return Tensor._node(out, (self,), bwd, "exp")

    def clamp(self, lo: float | None = None, hi: float | None = None):
        out = np.clip(self.data, lo, hi)
        mask = np.ones_like(self.data)
        if lo is not None:
            mask *= self.data >= lo
        if hi is not None:
            mask *= self.data <= hi

        def bwd(g):
            if self.requires_grad:
                self._accum(g * mask)

        return Tensor._node(out, (self,), bwd, "clamp")

    def relu(self):
        return self.clamp(lo=0.0)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(self.data.shape))

        return Tensor._node(out, (self,), bwd, "reshape")

    def segment(self, start: int, length: int, shape: tuple[int, ...]):
        """View of flat entries [start, start+length), reshaped; grads scatter back."""
        if self.data.ndim != 1:
            raise ShapeError(f"segment expects a flat tensor, got shape {self.data.shape}")
        if start < 0 or start + length > self.data.size:
            raise ShapeError(f"segment [{start}, {start + length}) out of range for size {self.data.size}")
        out = self.data[start:start + length].reshape(shape)

        def bwd(g):
            if self.requires_grad:
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                self.grad[start:start + length] += g.reshape(-1)

        return Tensor._node(out, (self,), bwd, "segment")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None):
        out = np.asarray(self.data.sum(axis=axis))

        def bwd(g):
            if self.requires_grad:
                if axis is None:
                    self._accum(np.broadcast_to(g, self.data.shape).copy())
                else:
                    self._accum(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        return Tensor._node(out, (self,), bwd, "sum")

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis) / float(n)

    # -- linear algebra ---------------------------------------------------------

    def matmul(self, other: "Tensor"):
        o = self._coerce(other)
        if self.data.ndim != 2 or o.data.ndim != 2 or self.data.shape[1] != o.data.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {self.data.shape} vs {o.data.shape}")

        def bwd(g):
            if self.requires_grad:
                self._accum(g @ o.data.T)
            if o.requires_grad:
                o._accum(self.data.T @ g)

        return Tensor._node(self.data @ o.data, (self, o), bwd, "matmul")

    __matmul__ = matmul

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


# -- convolution and pooling ---------------------------------------------------


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, C, k, k, H, W) sliding windows (a view)."""
    b, c, hp, wp = xp.shape
    h, w = hp - k + 1, wp - k + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(xp, (b, c, k, k, h, w), (sb, sc, sh, sw, sh, sw))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 convolution: (B,C,H,W) x (OC,C,k,k) -> (B,OC,H,W)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.data.shape} and {weight.data.shape}")
    oc, c, k, k2 = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.data.shape}")
    if x.data.shape[1] != c:
        raise ShapeError(f"conv2d: channel mismatch {x.data.shape} vs {weight.data.shape}")
    if bias.data.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({oc},)")
    b, _, h, w = x.data.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k)
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (OC, B, H, W)
    out = out.transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def bwd(g):
        gt = g.transpose(1, 0, 2, 3)  # (OC, B, H, W)
        if weight.requires_grad:
            weight._accum(np.tensordot(gt, cols, axes=([1, 2, 3], [0, 4, 5])))
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.tensordot(weight.data, gt, axes=([0], [0]))  # (C, k, k, B, H, W)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j].transpose(1, 0, 2, 3)
            self_g = dxp[:, :, p:p + h, p:p + w] if p else dxp
            x._accum(self_g)

    return Tensor._node(out, (x, weight, bias), bwd, "conv2d")


def _pool_view(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2: spatial dims must be even, got {x.shape}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2)


def meanpool2(x: Tensor) -> Tensor:
    r = _pool_view(x.data)
    out = r.mean(axis=(3, 5))

    def bwd(g):
        if x.requires_grad:
            x._accum(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0)

    return Tensor._node(out, (x,), bwd, "meanpool2")


def maxpool2(x: Tensor) -> Tensor:
    r = _pool_view(x.data)
    out = r.max(axis=(3, 5))

    def bwd(g):
        if x.requires_grad:
            # gradient routed to every argmax within a window (ties split the mass)
            mask = (r == out[:, :, :, None, :, None]).astype(np.float64)
            mask /= mask.sum(axis=(3, 5), keepdims=True)
            gexp = g[:, :, :, None, :, None] * mask
            x._accum(gexp.reshape(x.data.shape))

    return Tensor._node(out, (x,), bwd, "maxpool2")


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Classic SGD-with-momentum state for one flat parameter vector."""

    learning_rate: float
    momentum: float = 0.0
    velocity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: Tensor, state: OptimizerState) -> None:
    """velocity <- m*velocity + grad; params <- params - lr*velocity; grads cleared."""
    if params.grad is None:
        raise GradientError("sgd_step: params have no gradient")
    if state.velocity is None:
        state.velocity = np.zeros_like(params.data)
    if state.velocity.shape != params.data.shape:
        raise ShapeError(f"velocity shape {state.velocity.shape} != params shape {params.data.shape}")
    state.velocity *= state.momentum
    state.velocity += params.grad
    params.data -= state.learning_rate * state.velocity
    params.grad = None


# -- verification harness ------------------------------------------------------


def gradient_check(model_eval, params: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    model_eval maps a flat parameter Tensor to a scalar Tensor and must be
    deterministic (verified by double evaluation).
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must be in (0, 1e-2], got {step}")
    v1 = model_eval(Tensor(params.data.copy())).item()
    v2 = model_eval(Tensor(params.data.copy())).item()
    if v1 != v2:
        raise GradientError("model_eval is not deterministic")

    p = Tensor(params.data.copy(), requires_grad=True)
    loss = model_eval(p)
    loss.backward()
    auto = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    flat = params.data.reshape(-1)
    max_err = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        up = model_eval(Tensor(bumped.reshape(params.data.shape))).item()
        bumped[i] -= 2 * step
        dn = model_eval(Tensor(bumped.reshape(params.data.shape))).item()
        fd = (up - dn) / (2 * step)
        err = abs(auto.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        max_err = max(max_err, err)
    return max_err


# -- wire format ---------------------------------------------------------------


def params_to_bytes(values: np.ndarray) -> bytes:
    """Length-prefixed little-endian float64 stream: u64 count + raw values."""
    flat = np.ascontiguousarray(values, dtype="<f8").reshape(-1)
    return struct.pack("<Q", flat.size) + flat.tobytes()


def params_from_bytes(buf: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", buf, 0)
    expected = 8 + 8 * n
    if len(buf) != expected:
        raise ValueError(f"parameter stream length {len(buf)} != expected {expected}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=8).astype(np.float64)


def param_stream_bytes(n_params: int) -> int:
    """Exact serialized size of an n-parameter vector; feeds the comm ledger."""
    return 8 + 8 * n_params
