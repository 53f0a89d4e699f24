"""Dense float tensors with taped reverse-mode differentiation.

Every floating-point operation in the package goes through the ops in this
module. Forwards are plain numpy; each op that participates in training
records a closure with a hand-derived backward rule on the active GradTape.
Default precision is float32; passing float64 arrays through the same ops
gives the widened pathway used by gradient checks.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense float array plus the hooks backward needs.

    `grad` is filled lazily during the backward sweep; for non-Parameter
    tensors it is released again as soon as the producing op consumed it.
    """

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, needs_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, needs_grad={self.needs_grad})"


class Parameter(Tensor):
    """A named learnable tensor; `grad` is a persistent buffer the optimizer zeroes."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, copy=True), needs_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_TAPES = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = _TAPES.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Records ops in execution order; backward replays them reversed, each once."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("GradTape exited out of order")
        return False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every reachable Parameter's .grad.

        The records already sit in topological order (ops only consume
        previously produced tensors), so one reversed sweep visits each op
        exactly once, after all its consumers have contributed gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            fn(g)
            if not isinstance(out, Parameter):
                out.grad = None
        self._records.clear()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _traced(*tensors: Tensor) -> "GradTape | None":
    tape = active_tape()
    if tape is None:
        return None
    if any(t.needs_grad for t in tensors):
        return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (the adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    tape = _traced(a, b)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            if a.needs_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        tape.record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    tape = _traced(a, b)
    if tape is not None:
        out.needs_grad = True
        ad, bd = a.data, b.data

        def bwd(g: np.ndarray) -> None:
            if a.needs_grad:
                _accum(a, _unbroadcast(g * bd, a.data.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(g * ad, b.data.shape))

        tape.record(out, bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            _accum(x, g * c)

        tape.record(out, bwd)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            _accum(x, g.reshape(old))

        tape.record(out, bwd)
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            _accum(x, np.transpose(g, inv))

        tape.record(out, bwd)
    return out


def gather_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[i] = x[ids[i]]; backward scatter-adds, so repeated ids accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(x.data[ids])
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, ids, g)

        tape.record(out, bwd)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather with bounds checking; the table is typically a Parameter."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.data.shape[0]
    bad = ids[(ids < 0) | (ids >= n_rows)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range [0, {n_rows})")
    return gather_rows(table, ids)


def take_row(x: Tensor, i: int) -> Tensor:
    out = Tensor(x.data[i])
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

        tape.record(out, bwd)
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix; backward hands row i of g to rows[i]."""
    if not rows:
        raise ValueError("stack_rows needs at least one row")
    out = Tensor(np.stack([r.data for r in rows]))
    tape = active_tape()
    if tape is not None and any(r.needs_grad for r in rows):
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            for i, r in enumerate(rows):
                if r.needs_grad:
                    _accum(r, g[i])

        tape.record(out, bwd)
    return out


def concat_rows(blocks: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along axis 0; backward slices g back apart."""
    if not blocks:
        raise ValueError("concat_rows needs at least one block")
    out = Tensor(np.concatenate([b.data for b in blocks], axis=0))
    tape = active_tape()
    if tape is not None and any(b.needs_grad for b in blocks):
        out.needs_grad = True
        sizes = [b.data.shape[0] for b in blocks]

        def bwd(g: np.ndarray) -> None:
            start = 0
            for b, n in zip(blocks, sizes):
                if b.needs_grad:
                    _accum(b, g[start : start + n])
                start += n

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = _traced(a, b)
    if tape is not None:
        out.needs_grad = True
        ad, bd = a.data, b.data

        def bwd(g: np.ndarray) -> None:
            if a.needs_grad:
                _accum(a, g @ bd.T)
            if b.needs_grad:
                _accum(b, ad.T @ g)

        tape.record(out, bwd)
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T, for scoring rows of `a` against rows of `b`."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch: {a.data.shape} @ {b.data.shape}.T")
    out = Tensor(a.data @ b.data.T)
    tape = _traced(a, b)
    if tape is not None:
        out.needs_grad = True
        ad, bd = a.data, b.data

        def bwd(g: np.ndarray) -> None:
            if a.needs_grad:
                _accum(a, g @ bd)
            if b.needs_grad:
                _accum(b, g.T @ ad)

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x). Backward is Phi(x) + x * phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = Tensor((xd * cdf).astype(xd.dtype, copy=False))
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            _accum(x, g * (cdf + xd * pdf))

        tape.record(out, bwd)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted for stability."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            _accum(x, p * (g - (p * g).sum(axis=-1, keepdims=True)))

        tape.record(out, bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine if given."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    if gamma is not None:
        out_data = y * gamma.data + (beta.data if beta is not None else 0.0)
    else:
        out_data = y
    out = Tensor(out_data.astype(xd.dtype, copy=False))
    watched = [t for t in (x, gamma, beta) if t is not None]
    tape = _traced(*watched)
    if tape is not None:
        out.needs_grad = True
        d = xd.shape[-1]

        def bwd(g: np.ndarray) -> None:
            if gamma is not None:
                if gamma.needs_grad:
                    _accum(gamma, _unbroadcast(g * y, gamma.data.shape))
                if beta is not None and beta.needs_grad:
                    _accum(beta, _unbroadcast(g, beta.data.shape))
                gy = g * gamma.data
            else:
                gy = g
            if x.needs_grad:
                # dx = inv * (gy - mean(gy) - y * mean(gy * y)) per row
                gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                            - y * (gy * y).mean(axis=-1, keepdims=True))
                _accum(x, gx)

        tape.record(out, bwd)
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm below eps map to zero-ish."""
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    n_eff = np.maximum(norms, eps)
    y = xd / n_eff
    out = Tensor(y)
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            # d(x/||x||) applied to g: (g - y (y.g)) / ||x||
            _accum(x, (g - y * (y * g).sum(axis=-1, keepdims=True)) / n_eff)

        tape.record(out, bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scaling at train time keeps expectations unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)
    tape = _traced(x)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            _accum(x, g * keep)

        tape.record(out, bwd)
    return out


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of integer targets over rows of logits."""
    t = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or t.ndim != 1 or t.shape[0] != ld.shape[0]:
        raise ValueError(f"cross_entropy_mean shapes: logits {ld.shape}, targets {t.shape}")
    n, c = ld.shape
    bad = t[(t < 0) | (t >= c)]
    if bad.size:
        raise IndexError(f"target class {int(bad.flat[0])} out of range [0, {c})")
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    rows = np.arange(n)
    losses = lse - ld[rows, t]
    out = Tensor(np.asarray(losses.mean(), dtype=ld.dtype))
    tape = _traced(logits)
    if tape is not None:
        out.needs_grad = True
        p = e / z

        def bwd(g: np.ndarray) -> None:
            dl = p.copy()
            dl[rows, t] -= 1.0
            _accum(logits, dl * (g / n))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# windowed attention


class PairCounter:
    """Counts attended (query, key) pairs so scaling behavior is observable."""

    def __init__(self):
        self.pairs = 0

    def add(self, n: int) -> None:
        self.pairs += int(n)

    def reset(self) -> None:
        self.pairs = 0


attention_pairs = PairCounter()


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, neighbor_idx: np.ndarray,
                       neighbor_valid: np.ndarray, global_idx: np.ndarray,
                       counter: PairCounter = attention_pairs) -> Tensor:
    """Sliding-window attention with a few rows that attend everywhere.

    q, k, v are (heads, len, d_head). neighbor_idx / neighbor_valid are
    (len, slots): for each query row the candidate key positions (its window
    plus any out-of-window global keys), invalid slots masked. Rows listed in
    global_idx ignore their window and attend densely; every row can attend
    the global rows, so the pattern is symmetric. Work is O(len * slots)
    plus O(len) per global row instead of O(len^2).

    The counter is incremented by the number of scored pairs summed over
    heads, which is what the linear-scaling checks measure.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape != kd.shape or qd.shape != vd.shape or qd.ndim != 3:
        raise ValueError(f"attention shapes must match: {qd.shape}, {kd.shape}, {vd.shape}")
    n_heads, length, d_head = qd.shape
    alpha = 1.0 / math.sqrt(d_head)
    global_idx = np.asarray(global_idx, dtype=np.int64)
    is_global = np.zeros(length, dtype=bool)
    is_global[global_idx] = True
    local_rows = (~is_global).astype(qd.dtype)[None, :, None]

    k_nb = kd[:, neighbor_idx, :]                       # (H, L, S, dh)
    v_nb = vd[:, neighbor_idx, :]
    s = np.einsum("hld,hlsd->hls", qd, k_nb) * alpha
    s = np.where(neighbor_valid[None, :, :], s, -np.inf)
    m = s.max(axis=-1, keepdims=True)                   # finite: self slot is valid
    e = np.exp(s - m)
    p = e / e.sum(axis=-1, keepdims=True)
    p = p * local_rows                                  # global rows use the dense path
    out_data = np.einsum("hls,hlsd->hld", p, v_nb)

    p_gl = None
    q_gl = None
    if global_idx.size:
        q_gl = qd[:, global_idx, :]                     # (H, G, dh)
        s_gl = np.einsum("hgd,hld->hgl", q_gl, kd) * alpha
        m_gl = s_gl.max(axis=-1, keepdims=True)
        e_gl = np.exp(s_gl - m_gl)
        p_gl = e_gl / e_gl.sum(axis=-1, keepdims=True)
        out_data[:, global_idx, :] = np.einsum("hgl,hld->hgd", p_gl, vd)

    n_local = int(neighbor_valid[~is_global].sum())
    counter.add(n_heads * (n_local + int(global_idx.size) * length))

    out = Tensor(out_data)
    tape = _traced(q, k, v)
    if tape is not None:
        out.needs_grad = True

        def bwd(g: np.ndarray) -> None:
            g_loc = g * local_rows
            dp = np.einsum("hld,hlsd->hls", g_loc, v_nb)
            ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True))
            dq = alpha * np.einsum("hls,hlsd->hld", ds, k_nb)
            dk = np.zeros_like(kd)
            dv = np.zeros_like(vd)
            np.add.at(dk, (slice(None), neighbor_idx), alpha * np.einsum("hls,hld->hlsd", ds, qd))
            np.add.at(dv, (slice(None), neighbor_idx), np.einsum("hls,hld->hlsd", p, g_loc))
            if global_idx.size:
                g_gl = g[:, global_idx, :]
                dp_gl = np.einsum("hgd,hld->hgl", g_gl, vd)
                ds_gl = p_gl * (dp_gl - (p_gl * dp_gl).sum(axis=-1, keepdims=True))
                dq[:, global_idx, :] += alpha * np.einsum("hgl,hld->hgd", ds_gl, kd)
                dk += alpha * np.einsum("hgl,hgd->hld", ds_gl, q_gl)
                dv += np.einsum("hgl,hgd->hld", p_gl, g_gl)
            if q.needs_grad:
                _accum(q, dq)
            if k.needs_grad:
                _accum(k, dk)
            if v.needs_grad:
                _accum(v, dv)

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction. step() consumes and zeroes the grads."""

    def __init__(self, params: Iterable[Parameter], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            g[...] = 0.0


def clip_global_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all grads by max_norm/norm when their joint L2 norm exceeds it."""
    params = list(params)
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...],
                     std: float = 0.02, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """N(0, std) redrawn until every sample lies within two deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x.astype(dtype)
