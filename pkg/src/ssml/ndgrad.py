"""Dense array primitives and a small reverse-mode tape.

Every primitive comes as a pure ``*_forward`` / ``*_backward`` pair working on
numpy arrays, so they can be used (and tested) without a tape. ``GradTape``
records applications of those primitives during a forward pass and replays
their vector-Jacobian products in reverse order.

Only the layer types the three backbones need are provided: dense layers,
valid stride-1 convolution, 1x2 max pooling, relu, row softmax and a left
channel-mixing product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with a primitive."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (e.g. backward before forward)."""


# ---------------------------------------------------------------------------
# pure primitives
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``out[..., j] = sum_k x[..., k] W[k, j] + b[j]`` (contraction over the last axis)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    out = x @ W
    if b is not None:
        out = out + b
    return out


def linear_backward(g: np.ndarray, x: np.ndarray, W: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dx = g @ W.T
    dW = x2.T @ g2
    db = g2.sum(axis=0)
    return dx, dW, db


def mix_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Left channel mixing: ``out[m, f, t] = sum_c W[f, c] x[m, c, t] + b[f]``."""
    if x.ndim != 3 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"mix: input shape {x.shape} incompatible with weight shape {W.shape}")
    out = np.matmul(W, x)
    if b is not None:
        out = out + b[:, None]
    return out


def mix_backward(g: np.ndarray, x: np.ndarray, W: np.ndarray):
    dx = np.matmul(W.T, g)
    dW = np.einsum("mft,mct->fc", g, x, optimize=True)
    db = g.sum(axis=(0, 2))
    return dx, dW, db


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a C x H x W array or a batch of them, got shape {x.shape}")


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid, stride-1 cross-correlation summed over input channels.

    ``x`` is ``C_in x H x W`` (or batched ``m x C_in x H x W``), ``kernels`` is
    ``C_out x C_in x kh x kw``.
    """
    xb, squeeze = _as_batch(x)
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be 4-d, got shape {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    _, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels, kernels {kernels.shape} expect {c_in}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kernels.shape} larger than input {x.shape}")
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))  # m, C, Ho, Wo, kh, kw
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # m, Ho, Wo, C_out
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(g: np.ndarray, x: np.ndarray, kernels: np.ndarray, need_dx: bool = True):
    xb, squeeze = _as_batch(x)
    gb = g[None] if squeeze else g
    _, _, kh, kw = kernels.shape
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    dK = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))  # C_out, C_in, kh, kw
    db = gb.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        ho, wo = gb.shape[2], gb.shape[3]
        cols = np.tensordot(gb, kernels, axes=([1], [0]))  # m, Ho, Wo, C_in, kh, kw
        dxb = np.zeros_like(xb)
        for i in range(kh):
            for j in range(kw):
                dxb[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxb[0] if squeeze else dxb
    return dx, dK, db


def maxpool_forward(x: np.ndarray, pool: tuple[int, int] = (1, 2)) -> np.ndarray:
    """Non-overlapping 1x2 max pooling along the last axis; an odd trailing column is dropped."""
    out, _ = _maxpool(x, pool)
    return out


def _maxpool(x: np.ndarray, pool: tuple[int, int], idx: np.ndarray | None = None):
    if tuple(pool) != (1, 2):
        raise ShapeError(f"maxpool: only 1x2 pooling is supported, got {pool}")
    w = x.shape[-1]
    if x.ndim < 1 or w < 2:
        raise ShapeError(f"maxpool: width must be >= 2, got shape {x.shape}")
    half = w // 2
    pairs = x[..., : 2 * half].reshape(*x.shape[:-1], half, 2)
    if idx is None:
        idx = pairs.argmax(axis=-1)
    out = np.take_along_axis(pairs, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(g: np.ndarray, x_shape: tuple[int, ...], idx: np.ndarray) -> np.ndarray:
    half = idx.shape[-1]
    pairs = np.zeros((*x_shape[:-1], half, 2), dtype=g.dtype)
    np.put_along_axis(pairs, idx[..., None], g[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=g.dtype)
    dx[..., : 2 * half] = pairs.reshape(*x_shape[:-1], 2 * half)
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def softmax_forward(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    """A value produced on a tape. ``name`` is set for parameter leaves."""

    value: np.ndarray
    requires_grad: bool = False
    name: str | None = None


@dataclass
class Record:
    op: str
    inputs: tuple[Node, ...]
    output: Node
    vjp: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]
    # activation pattern (relu masks, pool winners) used to detect kinks
    signature: np.ndarray | None = None


@dataclass
class GradTape:
    """Ordered log of primitive applications for one forward pass."""

    records: list[Record] = field(default_factory=list)
    leaves: list[Node] = field(default_factory=list)
    # activation patterns to impose instead of computing them (frozen-kink replay)
    replay: list[np.ndarray] | None = None
    _cursor: int = 0

    def param(self, value: np.ndarray, name: str) -> Node:
        node = Node(value, requires_grad=True, name=name)
        self.leaves.append(node)
        return node

    def const(self, value: np.ndarray) -> Node:
        return Node(value)

    def _record(self, op, inputs, value, vjp, signature=None) -> Node:
        out = Node(value, requires_grad=any(n.requires_grad for n in inputs))
        self.records.append(Record(op, tuple(inputs), out, vjp, signature))
        return out

    def _replayed(self, shape: tuple[int, ...]) -> np.ndarray | None:
        if self.replay is None:
            return None
        if self._cursor >= len(self.replay) or self.replay[self._cursor].shape != shape:
            raise TapeError("replayed activation pattern does not match this forward pass")
        self._cursor += 1
        return self.replay[self._cursor - 1]

    def signature(self) -> list[np.ndarray]:
        return [r.signature for r in self.records if r.signature is not None]

    # -- recorded primitives ------------------------------------------------

    def linear(self, x: Node, W: Node, b: Node) -> Node:
        xv, Wv = x.value, W.value

        def vjp(g, need):
            dx, dW, db = linear_backward(g, xv, Wv)
            return dx if need[0] else None, dW, db

        return self._record("linear", (x, W, b), linear_forward(xv, Wv, b.value), vjp)

    def mix(self, x: Node, W: Node, b: Node) -> Node:
        xv, Wv = x.value, W.value

        def vjp(g, need):
            dx, dW, db = mix_backward(g, xv, Wv)
            return dx if need[0] else None, dW, db

        return self._record("mix", (x, W, b), mix_forward(xv, Wv, b.value), vjp)

    def conv2d(self, x: Node, K: Node, b: Node) -> Node:
        xv, Kv = x.value, K.value

        def vjp(g, need):
            return conv2d_backward(g, xv, Kv, need_dx=need[0])

        return self._record("conv2d", (x, K, b), conv2d_forward(xv, Kv, b.value), vjp)

    def maxpool(self, x: Node) -> Node:
        shape = x.value.shape
        fixed = self._replayed((*shape[:-1], shape[-1] // 2))
        out, idx = _maxpool(x.value, (1, 2), None if fixed is None else fixed.astype(np.intp))

        def vjp(g, need):
            return (maxpool_backward(g, shape, idx),)

        return self._record("maxpool", (x,), out, vjp, signature=idx.astype(np.int8))

    def relu(self, x: Node) -> Node:
        xv = x.value
        mask = self._replayed(xv.shape)
        value = relu_forward(xv) if mask is None else xv * mask
        if mask is None:
            mask = xv > 0

        def vjp(g, need):
            return (g * mask,)

        return self._record("relu", (x,), value, vjp, signature=mask)

    def softmax(self, z: Node) -> Node:
        s = softmax_forward(z.value)

        def vjp(g, need):
            return (softmax_backward(g, s),)

        return self._record("softmax", (z,), s, vjp)

    def reshape(self, x: Node, shape: tuple[int, ...]) -> Node:
        src = x.value.shape

        def vjp(g, need):
            return (g.reshape(src),)

        return self._record("reshape", (x,), x.value.reshape(shape), vjp)

    def custom(self, op: str, inputs: Sequence[Node], value: np.ndarray, vjp) -> Node:
        """Record an externally defined primitive (used by the loss functions)."""
        return self._record(op, tuple(inputs), value, vjp)


def backward(tape: GradTape, loss: Node, loss_grad: float = 1.0) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss`` node; returns gradients of named leaves."""
    if not tape.records or tape.records[-1].output is not loss:
        raise TapeError("backward called before a forward pass produced this loss on the tape")
    if np.ndim(loss.value) != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(loss_grad, dtype=loss.value.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        need = tuple(n.requires_grad for n in rec.inputs)
        for node, dn, wanted in zip(rec.inputs, rec.vjp(g, need), need):
            if not wanted or dn is None:
                continue
            key = id(node)
            grads[key] = grads[key] + dn if key in grads else dn
    return {leaf.name: grads[id(leaf)] for leaf in tape.leaves if id(leaf) in grads}
