"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records primitive applications in execution order while it
is active; :meth:`Tape.backward` replays the records once, in reverse,
accumulating vector-Jacobian products into the gradients of the
``requires_grad`` leaves. Without an active tape every primitive is a plain
numpy computation, which is the inference fast path.

Design constraints baked in here:

* double precision everywhere (low-temperature quantile relaxations are
  numerically delicate);
* gradients never flow through integer index sets (top-k selections and
  sort permutations are constants of the forward pass; ``index_select``
  differentiates only through the gathered values);
* ``l2_normalize`` adds ``EPS_NORM`` inside the square root so an all-zero
  input is well defined.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from rarecp.errors import NumericError

EPS_NORM = 1e-12

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-primitive finiteness checks (slow; used by tests/CLI)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        # each record: (output tensor, input tensors, vjp callable)
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into every requires_grad leaf.

        Fan-out accumulates additively; records are visited exactly once in
        reverse execution order (which is a valid reverse topological order
        because an output cannot be consumed before it exists).
        """
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            partials = vjp(g)
            for t, p in zip(inputs, partials):
                if p is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + p
                else:
                    grads[key] = p
                    tensors[key] = t
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad and not t._produced:
                t.grad = g if t.grad is None else t.grad + g


_ACTIVE: list[Tape] = []


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError("primitive produced a non-finite value")
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        _ACTIVE[-1].records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = ta.data + tb.data
    return _finish(
        out,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.data.shape), _unbroadcast(g, tb.data.shape)),
    )


def mul(a, b) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    out = ta.data * tb.data
    return _finish(
        out,
        (ta, tb),
        lambda g: (
            _unbroadcast(g * tb.data, ta.data.shape),
            _unbroadcast(g * ta.data, tb.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    A, B = ta.data, tb.data
    if A.ndim == 2 and B.ndim == 1:
        out = A @ B

        def vjp(g):
            return np.outer(g, B), A.T @ g

    elif A.ndim == 2 and B.ndim == 2:
        out = A @ B

        def vjp(g):
            return g @ B.T, A.T @ g

    elif A.ndim == 1 and B.ndim == 2:
        out = A @ B

        def vjp(g):
            return B @ g, np.outer(A, g)

    else:
        raise ValueError(f"matmul: unsupported shapes {A.shape} @ {B.shape}")
    return _finish(out, (ta, tb), vjp)


def affine(weight: Tensor, x, bias: Tensor) -> Tensor:
    """``weight @ x + bias``; for a 2-D ``x`` the bias is added per column."""
    tw, tx, tb = as_tensor(weight), as_tensor(x), as_tensor(bias)
    W, X, b = tw.data, tx.data, tb.data
    if X.ndim == 1:
        out = W @ X + b

        def vjp(g):
            return np.outer(g, X), W.T @ g, g

    elif X.ndim == 2:
        out = W @ X + b[:, None]

        def vjp(g):
            return g @ X.T, W.T @ g, g.sum(axis=1)

    else:
        raise ValueError(f"affine: unsupported input shape {X.shape}")
    return _finish(out, (tw, tx, tb), vjp)


def reduce_sum(x) -> Tensor:
    tx = as_tensor(x)
    return _finish(
        np.asarray(tx.data.sum()),
        (tx,),
        lambda g: (np.broadcast_to(g, tx.data.shape).copy(),),
    )


def reduce_mean(x) -> Tensor:
    tx = as_tensor(x)
    n = tx.data.size
    return _finish(
        np.asarray(tx.data.mean()),
        (tx,),
        lambda g: (np.broadcast_to(g / n, tx.data.shape).copy(),),
    )


def l2_normalize(x) -> Tensor:
    """Normalize a vector (or each column of a matrix / 3-D batch) to unit length.

    ``u = x / sqrt(sum(x**2) + EPS_NORM)``, with the sum over the vector
    axis (axis 0 for 2-D, axis 1 for a batch of key matrices). The epsilon
    keeps the all-zero input well defined; away from zero it perturbs the
    norm by O(1e-12).
    """
    tx = as_tensor(x)
    X = tx.data
    if X.ndim == 1:
        inv = 1.0 / math.sqrt(float(np.dot(X, X)) + EPS_NORM)
        out = X * inv

        def vjp(g):
            return (g * inv - X * (float(np.dot(X, g)) * inv**3),)

    elif X.ndim == 2:
        inv = 1.0 / np.sqrt(np.einsum("ij,ij->j", X, X) + EPS_NORM)
        out = X * inv[None, :]

        def vjp(g):
            dots = np.einsum("ij,ij->j", X, g)
            return (g * inv[None, :] - X * (dots * inv**3)[None, :],)

    elif X.ndim == 3:
        inv = 1.0 / np.sqrt(np.einsum("jdi,jdi->ji", X, X) + EPS_NORM)
        out = X * inv[:, None, :]

        def vjp(g):
            dots = np.einsum("jdi,jdi->ji", X, g)
            return (g * inv[:, None, :] - X * (dots * inv**3)[:, None, :],)

    else:
        raise ValueError(f"l2_normalize: unsupported shape {X.shape}")
    return _finish(out, (tx,), vjp)


def softmax_with_temperature(x, temperature: float) -> Tensor:
    """Softmax of ``x / temperature`` with max-subtraction for stability."""
    if temperature <= 0.0:
        raise ValueError("softmax temperature must be positive")
    tx = as_tensor(x)
    z = tx.data / temperature
    z = z - z.max()
    e = np.exp(z)
    y = e / e.sum()

    def vjp(g):
        dot = float(np.dot(g, y))
        return ((y * (g - dot)) / temperature,)

    return _finish(y, (tx,), vjp)


def sigmoid(x) -> Tensor:
    tx = as_tensor(x)
    X = tx.data
    y = np.empty_like(X)
    pos = X >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _finish(y, (tx,), lambda g: (g * y * (1.0 - y),))


def softplus_with_temperature(x, tau: float) -> Tensor:
    """``tau * log(1 + exp(x / tau))``, computed in overflow-safe form."""
    if tau <= 0.0:
        raise ValueError("softplus temperature must be positive")
    tx = as_tensor(x)
    z = tx.data / tau
    out = tau * (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)
    return _finish(out, (tx,), lambda g: (g * s,))


def tanh(x) -> Tensor:
    tx = as_tensor(x)
    y = np.tanh(tx.data)
    return _finish(y, (tx,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    tx = as_tensor(x)
    mask = tx.data > 0
    return _finish(np.where(mask, tx.data, 0.0), (tx,), lambda g: (g * mask,))


def log(x) -> Tensor:
    tx = as_tensor(x)
    return _finish(np.log(tx.data), (tx,), lambda g: (g / tx.data,))


def exp(x) -> Tensor:
    tx = as_tensor(x)
    y = np.exp(tx.data)
    return _finish(y, (tx,), lambda g: (g * y,))


def square(x) -> Tensor:
    tx = as_tensor(x)
    return _finish(tx.data * tx.data, (tx,), lambda g: (g * 2.0 * tx.data,))


def sqrt(x) -> Tensor:
    tx = as_tensor(x)
    y = np.sqrt(tx.data)
    return _finish(y, (tx,), lambda g: (g / (2.0 * y),))


def concat(parts: Sequence) -> Tensor:
    tensors = [as_tensor(p) for p in parts]
    sizes = [t.data.size for t in tensors]
    out = np.concatenate([t.data.reshape(-1) for t in tensors])
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[offsets[i] : offsets[i + 1]].reshape(t.data.shape)
            for i, t in enumerate(tensors)
        )

    return _finish(out, tuple(tensors), vjp)


def index_select(x, indices) -> Tensor:
    """Gather ``x[indices]`` (1-D); backward scatter-adds into the source."""
    tx = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        z = np.zeros_like(tx.data)
        np.add.at(z, idx, g)
        return (z,)

    return _finish(tx.data[idx], (tx,), vjp)


def reshape(x, shape) -> Tensor:
    tx = as_tensor(x)
    orig = tx.data.shape
    return _finish(
        tx.data.reshape(shape), (tx,), lambda g: (g.reshape(orig),)
    )


def scale(x, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    tx = as_tensor(x)
    c = float(c)
    return _finish(tx.data * c, (tx,), lambda g: (g * c,))


def add_const(x, c) -> Tensor:
    """Add a constant array or scalar (no gradient to the constant)."""
    tx = as_tensor(x)
    return _finish(tx.data + np.asarray(c, dtype=np.float64), (tx,), lambda g: (g,))


def reciprocal(x) -> Tensor:
    """``1 / x`` for strictly positive ``x`` via exp(-log(x))."""
    return exp(scale(log(x), -1.0))


def transpose(x) -> Tensor:
    tx = as_tensor(x)
    if tx.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _finish(tx.data.T.copy(), (tx,), lambda g: (g.T.copy(),))


# ---------------------------------------------------------------------------
# batched primitives (episode-parallel training)
# ---------------------------------------------------------------------------


def emit_keys(out, contexts_t, latent_dim: int) -> Tensor:
    """Apply per-episode affine maps to a shared context block.

    ``out`` is a (latent_dim*(p+1), B) stack of flattened (A, b) maps, one
    column per episode; ``contexts_t`` is the constant (p, n) context
    block. Returns keys of shape (B, latent_dim, n):
    ``keys[j] = A_j @ contexts_t + b_j[:, None]``.
    """
    t_out = as_tensor(out)
    C = np.asarray(contexts_t, dtype=np.float64)
    p, n = C.shape
    d = int(latent_dim)
    D, B = t_out.data.shape
    if D != d * (p + 1):
        raise ValueError(f"emit_keys: output rows {D} != latent*(p+1) = {d * (p + 1)}")
    A_all = t_out.data[: d * p].T.reshape(B, d, p)
    b_all = t_out.data[d * p :].T
    keys = (A_all.reshape(B * d, p) @ C).reshape(B, d, n) + b_all[:, :, None]

    def vjp(g):
        dA = (g.reshape(B * d, n) @ C.T).reshape(B, d, p)
        db = g.sum(axis=2)
        grad = np.empty((D, B))
        grad[: d * p] = dA.reshape(B, d * p).T
        grad[d * p :] = db.T
        return (grad,)

    return _finish(keys, (t_out,), vjp)


def query_key_scores(normalized_keys, query_columns) -> Tensor:
    """Per-episode dot products of the query key against all keys.

    ``normalized_keys`` has shape (B, d, n); episode j's query key is its
    own column ``query_columns[j]``. Returns (B, n) cosine scores.
    """
    t_nk = as_tensor(normalized_keys)
    NK = t_nk.data
    B, d, n = NK.shape
    cols = np.asarray(query_columns, dtype=np.int64)
    rows = np.arange(B)
    Q = NK[rows, :, cols]  # (B, d)
    scores = np.einsum("jd,jdi->ji", Q, NK)

    def vjp(g):
        dNK = Q[:, :, None] * g[:, None, :]
        dQ = np.einsum("ji,jdi->jd", g, NK)
        # row/query-column pairs are unique, so fancy += accumulates safely
        dNK[rows, :, cols] += dQ
        return (dNK,)

    return _finish(scores, (t_nk,), vjp)


def gather_rows(x, indices) -> Tensor:
    """Row-wise gather: ``out[j, c] = x[j, indices[j, c]]``."""
    tx = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    B = tx.data.shape[0]
    rows = np.arange(B)[:, None]

    def vjp(g):
        z = np.zeros_like(tx.data)
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _finish(tx.data[rows, idx], (tx,), vjp)


def softmax_rows(x, temperature: float) -> Tensor:
    """Row-wise softmax of ``x / temperature`` with max-subtraction."""
    if temperature <= 0.0:
        raise ValueError("softmax temperature must be positive")
    tx = as_tensor(x)
    z = tx.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dots = np.einsum("ji,ji->j", g, y)
        return ((y * (g - dots[:, None])) / temperature,)

    return _finish(y, (tx,), vjp)


def batched_mix(weight_matrices, pi) -> Tensor:
    """Per-episode mixture: ``out[j, u] = sum_m V[j, u, m] * pi[j, m]``."""
    t_v, t_pi = as_tensor(weight_matrices), as_tensor(pi)
    V, P = t_v.data, t_pi.data
    out = np.einsum("jum,jm->ju", V, P)

    def vjp(g):
        dV = g[:, :, None] * P[:, None, :]
        dP = np.einsum("jum,ju->jm", V, g)
        return (dV, dP)

    return _finish(out, (t_v, t_pi), vjp)


# ---------------------------------------------------------------------------
# gradient checking and optimization
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients of ``f()`` and central differences.

    ``f`` must rebuild the computation from the current ``params`` data every
    call. Relative error uses a ``max(|a|, |b|, 1e-8)`` denominator.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(f().data)
            flat[i] = keep - h
            f_minus = float(f().data)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


class Adam:
    """Adam optimizer (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1**self._t
        b2t = 1.0 - self.beta2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
