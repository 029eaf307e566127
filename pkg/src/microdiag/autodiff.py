"""Minimal reverse-mode automatic differentiation over numpy arrays.

Implements exactly the operations the encoders and diagnosis models need:
broadcast-aware arithmetic, matmul, valid causal 1-D convolution, reductions,
layer normalization, and a numerically stable softmax cross-entropy. All
tensors are float64. Gradients are accumulated by walking the tape in reverse
topological order.

`finite_difference` provides the independent oracle used by the tests: it
never touches the tape, only re-evaluates a closure under central
perturbations.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "reshape",
    "concat",
    "tsum",
    "tmean",
    "powc",
    "addc",
    "mulc",
    "conv1d_valid",
    "layer_norm",
    "dropout_mask",
    "apply_dropout",
    "cross_entropy",
    "backward",
    "finite_difference",
]


class Tensor:
    """A node in the computation graph wrapping an f64 ndarray."""

    __slots__ = ("data", "grad", "parents", "grad_fn", "requires_grad")

    def __init__(self, data, parents=(), grad_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple[Tensor, ...] = parents
        self.grad_fn: Optional[Callable[[np.ndarray], tuple]] = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast up from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out_data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor(out_data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor(out_data, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    out_data = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out_data, (a, b), grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = a.data * mask

    def grad_fn(g):
        return (g * mask,)

    return Tensor(out_data, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return Tensor(out_data, (a,), grad_fn)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, parts, grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out_data, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = tsum(a, axis=axis, keepdims=keepdims)
    return mulc(out, 1.0 / count)


def powc(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor(out_data, (a,), grad_fn)


def addc(a: Tensor, c: float) -> Tensor:
    out_data = a.data + c

    def grad_fn(g):
        return (g,)

    return Tensor(out_data, (a,), grad_fn)


def mulc(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def grad_fn(g):
        return (g * c,)

    return Tensor(out_data, (a,), grad_fn)


def conv1d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Causal valid convolution: out[.., f, o] = sum_{c,k} w[f,c,k] x[.., c, o+k].

    x: (B, C, T), w: (F, C, K), b: (F,). Output (B, F, T-K+1); position o sees
    only inputs at times <= o+K-1, so no future leakage and no padding.
    """
    B, C, T = x.data.shape
    F, Cw, K = w.data.shape
    if Cw != C:
        raise ValueError(f"conv channel mismatch: input {C}, kernel {Cw}")
    if T < K:
        raise ValueError(f"segment length {T} shorter than kernel width {K}")
    O = T - K + 1
    # channel-major layout turns each kernel tap into one contiguous GEMM
    # instead of B tiny broadcast matmuls; strided kernel slices would push
    # numpy off the BLAS path, so copy each tap once
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))  # (C, B, T)
    wk = [np.ascontiguousarray(w.data[:, :, k]) for k in range(K)]
    full = (wk[0] @ xt.reshape(C, B * T)).reshape(F, B, T)
    acc = full[:, :, 0:O].copy()
    for k in range(1, K):
        full = (wk[k] @ xt.reshape(C, B * T)).reshape(F, B, T)
        acc += full[:, :, k : k + O]
    out_data = np.ascontiguousarray(acc.transpose(1, 0, 2)) + b.data[:, None]

    def grad_fn(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(F, B * O)  # (F, B*O)
        gw = np.empty_like(w.data)
        gxt = np.zeros((C, B, T))
        for k in range(K):
            xk = np.ascontiguousarray(xt[:, :, k : k + O]).reshape(C, B * O)
            gw[:, :, k] = gt @ xk.T
            gxt[:, :, k : k + O] += (wk[k].T @ gt).reshape(C, B, O)
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2))
        gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return Tensor(out_data, (x, w, b), grad_fn)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; no learned affine."""
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    return mul(centered, powc(addc(var, eps), -0.5))


def dropout_mask(prng, rate: float, shape) -> np.ndarray:
    """Inverted-dropout mask: survivors scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = prng.uniform(size=shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return x
    return mul(x, constant(mask))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy via log-sum-exp; labels are class indices."""
    z = logits.data
    B = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    loss = (lse[:, 0] - z[np.arange(B), labels]).mean()

    def grad_fn(g):
        soft = np.exp(z - lse)
        soft[np.arange(B), labels] -= 1.0
        return (g * soft / B,)

    return Tensor(loss, (logits,), grad_fn)


def backward(out: Tensor) -> None:
    """Accumulate gradients of `out` (a scalar) into every reachable tensor."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node.grad_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.grad_fn(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def finite_difference(f: Callable[[], float], arrays: dict[str, np.ndarray],
                      step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of f() w.r.t. every entry of every array.

    Mutates each array in place around its original value, re-evaluating f;
    independent of the tape machinery by construction.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
