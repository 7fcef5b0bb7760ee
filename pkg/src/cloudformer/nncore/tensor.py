"""Dense float64 tensors with recorded reverse-mode differentiation.

Every operation on tensors that require gradients records its parents and a
vector-Jacobian closure on the result node; the linked nodes form the tape.
`backward(loss)` replays the record in reverse topological order and
accumulates gradients on every reachable leaf. Leaves that never entered
the graph simply keep a zero (None) gradient.

All values are 64-bit; any op producing NaN/Inf raises immediately unless
finiteness checks are switched off.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "set_finite_checks", "backward",
    "concat", "sigmoid", "relu", "swish", "log_cosh", "softmax", "tanh",
    "exp", "log", "broadcast_to", "linear", "layer_norm_fused",
    "prepend_token", "scale_add_const",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


# thread-local so concurrent workers can't toggle each other's modes
class _Modes(threading.local):
    def __init__(self):
        self.grad = True
        self.finite = True


_MODES = _Modes()


class no_grad:
    """Context manager disabling tape recording (forward values only)."""

    def __enter__(self):
        self._prev = _MODES.grad
        _MODES.grad = False
        return self

    def __exit__(self, *exc):
        _MODES.grad = self._prev
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf trapping; returns the previous setting."""
    prev = _MODES.finite
    _MODES.finite = enabled
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        return _node(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.data.shape),
                                _unbroadcast(g, other.data.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        return _node(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.data.shape),
                                _unbroadcast(-g, other.data.shape)))

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __mul__(self, other):
        other = _lift(other)
        return _node(self.data * other.data, (self, other),
                     lambda g: (_unbroadcast(g * other.data, self.data.shape),
                                _unbroadcast(g * self.data, other.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return _node(self.data / other.data, (self, other),
                     lambda g: (_unbroadcast(g / other.data, self.data.shape),
                                _unbroadcast(-g * self.data / other.data**2,
                                             other.data.shape)))

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = self.data**p
        return _node(out, (self,), lambda g: (g * p * self.data**(p - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dims")

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return _node(a @ b, (self, other), vjp)

    # shape ops -------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _node(self.data.reshape(shape), (self,),
                     lambda g: (g.reshape(old),))

    def swapaxes(self, a, b):
        return _node(np.swapaxes(self.data, a, b), (self,),
                     lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx):
        # basic indexing only; every output element maps to one input element
        shape = self.data.shape

        def vjp(g):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        return _node(self.data[idx], (self,), vjp)

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        n = self.data.size if axis is None else np.prod(
            [shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        inv = 1.0 / float(n)

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape) * inv,)

        return _node(self.data.mean(axis=axis, keepdims=keepdims), (self,), vjp)

    # activations / elementwise ----------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        return _node(np.log(self.data), (self,), lambda g: (g / self.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out**2),))

    def sigmoid(self):
        out = _stable_sigmoid(self.data)
        return _node(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        x = self.data
        return _node(np.maximum(x, 0.0), (self,),
                     lambda g: (g * (x > 0.0),))

    def log_cosh(self):
        # |x| + log1p(exp(-2|x|)) - log 2: overflow-safe form of log(cosh x)
        x = self.data
        ax = np.abs(x)
        out = ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
        return _node(out, (self,), lambda g: (g * np.tanh(x),))

    def softmax(self, axis: int = -1):
        x = self.data
        e = np.exp(x - np.maximum.reduce(x, axis=axis, keepdims=True))
        y = e / np.add.reduce(e, axis=axis, keepdims=True)

        def vjp(g):
            dot = np.add.reduce(g * y, axis=axis, keepdims=True)
            return ((g - dot) * y,)

        return _node(y, (self,), vjp)

    def backward(self):
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    if _MODES.finite and not np.all(np.isfinite(data)):
        ops = ", ".join(str(p.data.shape) for p in parents)
        raise NonFiniteError(f"non-finite result from op on shapes [{ops}]")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _MODES.grad and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # sigmoid(x) = exp(-softplus(-x)); stable for any |x| without branching
    return np.exp(-np.logaddexp(0.0, -x))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    The recorded graph is replayed in reverse topological order; the walk is
    iterative so long recurrent chains do not hit the recursion limit.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(node.grad)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg)  # own the buffer; vjps may hand out views
            else:
                parent.grad = parent.grad + pg


# module-level functional aliases ------------------------------------------

def exp(t: Tensor) -> Tensor:
    return _lift(t).exp()


def log(t: Tensor) -> Tensor:
    return _lift(t).log()


def tanh(t: Tensor) -> Tensor:
    return _lift(t).tanh()


def sigmoid(t: Tensor) -> Tensor:
    return _lift(t).sigmoid()


def relu(t: Tensor) -> Tensor:
    return _lift(t).relu()


def swish(t: Tensor) -> Tensor:
    t = _lift(t)
    x = t.data
    s = _stable_sigmoid(x)
    return _node(x * s, (t,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def log_cosh(t: Tensor) -> Tensor:
    return _lift(t).log_cosh()


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    return _lift(t).softmax(axis=axis)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    t = _lift(t)
    old = t.data.shape
    return _node(np.broadcast_to(t.data, shape), (t,),
                 lambda g: (_unbroadcast(g, old),))


# fused composites (single node per call keeps the hot path cheap) ----------

def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b with W of shape (d_in, d_out) and b of shape (d_out,)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    xd, wd = x.data, W.data
    d_in, d_out = wd.shape

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        gb = g.reshape(-1, d_out).sum(axis=0)
        return (gx, gw, gb)

    return _node(xd @ wd + b.data, (x, W, b), vjp)


def prepend_token(tokens: Tensor, tok: Tensor) -> Tensor:
    """Put a shared learnable token at position 0 of every sequence.

    tokens: (B, T, d), tok: (d,) -> (B, T+1, d).
    """
    tokens, tok = _lift(tokens), _lift(tok)
    B, T, d = tokens.data.shape
    out = np.empty((B, T + 1, d))
    out[:, 0, :] = tok.data
    out[:, 1:, :] = tokens.data

    def vjp(g):
        return (g[:, 1:, :], np.add.reduce(g[:, 0, :], axis=0))

    return _node(out, (tokens, tok), vjp)


def scale_add_const(t: Tensor, scale: float, shift: np.ndarray | float) -> Tensor:
    """t * scale + shift with non-learnable scale/shift (constant-slope node)."""
    t = _lift(t)
    return _node(t.data * scale + shift, (t,),
                 lambda g: (_unbroadcast(g * scale, t.data.shape),))


def layer_norm_fused(x: Tensor, gamma: Tensor, beta: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    xd = x.data
    d = xd.shape[-1]
    inv_d = 1.0 / d
    mu = np.add.reduce(xd, axis=-1, keepdims=True) * inv_d
    xc = xd - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv
    gd = gamma.data

    def vjp(g):
        gg = g * gd
        m1 = np.add.reduce(gg, axis=-1, keepdims=True) * inv_d
        m2 = np.add.reduce(gg * x_hat, axis=-1, keepdims=True) * inv_d
        gx = inv * (gg - m1 - x_hat * m2)
        ggamma = np.add.reduce((g * x_hat).reshape(-1, d), axis=0)
        gbeta = np.add.reduce(g.reshape(-1, d), axis=0)
        return (gx, ggamma, gbeta)

    return _node(x_hat * gd + beta.data, (x, gamma, beta), vjp)
