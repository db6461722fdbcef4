"""Dense tensors plus reverse-mode differentiation.

Storage is a NumPy array per tensor; every network operation here is written
against explicit shapes in the canonical feature order (channels, time,
height, width, with an optional leading batch extent). There is no implicit
broadcasting: binary elementwise ops demand identical shapes, and anything
that needs repetition does it explicitly inside its own forward/backward
rule.

Production paths run in float32; the verification path (``grad_check`` and
the loop oracles in the test suite) runs the same code in float64.
"""

from __future__ import annotations

import contextlib
import ctypes
import os
import sys
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError


def _tune_allocator() -> None:
    """Keep glibc from mmap-ing the large conv scratch buffers.

    The convolution paths allocate and free ~100-200 MB column matrices every
    step; with the default allocator each one is a fresh mmap/munmap cycle
    whose page faults dominate the runtime. Forcing brk-based reuse roughly
    halves the training step time on Linux. Opt out with
    MOTIONGAIT_NO_MALLOC_TUNING=1.
    """
    if os.environ.get("MOTIONGAIT_NO_MALLOC_TUNING") or not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(ctypes.c_int(-4), ctypes.c_int(0))   # M_MMAP_MAX = 0
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(-1))  # M_TRIM_THRESHOLD off
    except OSError:
        pass


_tune_allocator()

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense n-d array, optionally enrolled in a differentiation graph.

    ``grad`` is lazily allocated and accumulates additively across backward
    passes until ``zero_grad`` is called. Tensors are treated as immutable
    after construction; ops always allocate fresh outputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"zero or negative extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; leaf grads accumulate additively."""
        if self.data.size != 1:
            raise ContractError(
                f"backward root must be a scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # Fresh buffers per pass, merged into .grad afterwards, so repeated
        # backward calls add exact copies instead of compounding.
        buf: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = buf.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                buf[key] = pg if key not in buf else buf[key] + pg

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def tensor(data, dtype=np.float32, requires_grad: bool = False, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        return out
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for ax, (na, nb) in enumerate(zip(a.shape, b.shape)):
            if na != nb:
                raise DimensionError(
                    f"{op}: axis {ax} mismatch ({na} vs {nb}); "
                    f"shapes {a.shape} vs {b.shape}"
                )
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows in float32.
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _normalize_axis(axis: int, rank: int, op: str) -> int:
    if not -rank <= axis < rank:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def reduce_mean(a: Tensor, axis: int) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim, "reduce_mean")
    n = a.shape[axis]
    if n == 0:
        raise DomainError("reduce_mean over empty axis")
    out = np.mean(a.data, axis=axis)

    def vjp(g):
        ge = np.expand_dims(g, axis) / n
        return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=False),)

    return _result(out, (a,), vjp)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim, "reduce_max")
    if a.shape[axis] == 0:
        raise DomainError("reduce_max over empty axis")
    idx = np.argmax(a.data, axis=axis, keepdims=True)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis=axis)
        return (buf,)

    return _result(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def vjp(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _result(out, (a,), vjp)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

def split_h(a: Tensor, n: int) -> list[Tensor]:
    """Split along the height axis (second to last) into n equal bands."""
    h = a.shape[-2]
    if n < 1 or h % n != 0:
        raise ConfigError(f"split_h: {n} parts do not divide height {h}")
    step = h // n
    parts = []
    for k in range(n):
        lo = k * step

        def vjp(g, lo=lo):
            buf = np.zeros_like(a.data)
            buf[..., lo : lo + step, :] = g
            return (buf,)

        parts.append(_result(a.data[..., lo : lo + step, :].copy(), (a,), vjp))
    return parts


def concat_h(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_h of empty list")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise DimensionError(
                f"concat_h: part {i} shape {p.shape} incompatible with {ref}"
            )
    heights = [p.shape[-2] for p in parts]
    offsets = np.cumsum([0] + heights)
    out = np.concatenate([p.data for p in parts], axis=-2)

    def vjp(g):
        return tuple(
            g[..., offsets[k] : offsets[k + 1], :] for k in range(len(parts))
        )

    return _result(out, tuple(parts), vjp)


def stack(tensors: list[Tensor]) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shape {t.shape} differs from {ref}")
    out = np.stack([t.data for t in tensors], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result(out, tuple(tensors), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swap_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError("swap_last2 needs rank >= 2")
    out = np.swapaxes(a.data, -1, -2).copy()
    return _result(out, (a,), lambda g: (np.swapaxes(g, -1, -2).copy(),))


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------

def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _gather_cols(xp: np.ndarray, kdims, strides, odims) -> np.ndarray:
    """(..., c, sp, hp, wp) -> (c*kt*kh*kw, M) column matrix.

    M flattens (lead..., so, ho, wo) in C order. Row k holds the input value
    each output position sees through kernel tap k, so the whole convolution
    is one GEMM against the flattened kernel. Writing row by row keeps the
    destination contiguous, which is what makes this path fast.
    """
    kt, kh, kw = kdims
    st, sh, sw = strides
    so, ho, wo = odims
    c = xp.shape[-4]
    lead = xp.shape[:-4]
    m = int(np.prod(lead + (so, ho, wo), dtype=np.int64))
    cols = np.empty((c * kt * kh * kw, m), dtype=xp.dtype)
    k = 0
    for ci in range(c):
        for a in range(kt):
            for b in range(kh):
                for cc in range(kw):
                    sl = xp[..., ci, a : a + st * so : st, b : b + sh * ho : sh,
                            cc : cc + sw * wo : sw]
                    cols[k] = sl.reshape(-1)
                    k += 1
    return cols


def conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (1, 1, 1),
) -> Tensor:
    """Cross-correlation over (time, height, width).

    ``x`` is (c_in, s, h, w) or (batch, c_in, s, h, w); ``kernel`` is
    (c_out, c_in, kt, kh, kw); ``bias`` is (c_out,). Output extents follow
    floor((n + 2p - k)/stride) + 1 per axis.
    """
    if x.data.ndim not in (4, 5):
        raise DimensionError(f"conv3d: input rank must be 4 or 5, got {x.data.ndim}")
    if kernel.data.ndim != 5:
        raise DimensionError(f"conv3d: kernel rank must be 5, got {kernel.data.ndim}")
    c_out, c_in, kt, kh, kw = kernel.shape
    if x.shape[-4] != c_in:
        raise DimensionError(
            f"conv3d: channel axis mismatch, input has {x.shape[-4]} channels "
            f"but kernel expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    if any(s < 1 for s in stride):
        raise DimensionError(f"conv3d: strides must be >= 1, got {stride}")
    st, sh, sw = stride
    pt, ph, pw = padding
    s_in, h_in, w_in = x.shape[-3:]
    for name, n, k, p in (("time", s_in, kt, pt), ("height", h_in, kh, ph),
                          ("width", w_in, kw, pw)):
        if n + 2 * p < k:
            raise DimensionError(
                f"conv3d: kernel extent {k} exceeds padded input on {name} axis"
            )
    odims = (
        _conv_extent(s_in, kt, st, pt),
        _conv_extent(h_in, kh, sh, ph),
        _conv_extent(w_in, kw, sw, pw),
    )
    batched = x.data.ndim == 5
    pad_spec = [(0, 0)] * (x.data.ndim - 3) + [(pt, pt), (ph, ph), (pw, pw)]
    lead = (x.shape[0],) if batched else ()
    xp = np.pad(x.data, pad_spec)
    xp_shape = xp.shape
    # the columns are reused by the backward rule (dW needs them anyway)
    cols = _gather_cols(xp, (kt, kh, kw), stride, odims)
    del xp
    w2 = kernel.data.reshape(c_out, -1)
    out_mat = w2 @ cols + bias.data[:, None]
    out = out_mat.reshape((c_out,) + lead + odims)
    if batched:
        out = np.ascontiguousarray(np.moveaxis(out, 0, 1))
    if not (_GRAD_ENABLED and (x.requires_grad or kernel.requires_grad
                               or bias.requires_grad)):
        cols = None  # nothing will consume them; release the buffer now

    def vjp(g):
        so, ho, wo = odims
        # channel axis to the front, matching the (K, M) column layout
        g_t = np.moveaxis(g, -4, 0).reshape(c_out, -1)
        d_bias = g_t.sum(axis=1)
        d_w = (g_t @ cols.T).reshape(kernel.shape)
        d_cols = w2.T @ g_t
        dxp = np.zeros(xp_shape, dtype=x.dtype)
        k = 0
        for ci in range(c_in):
            for a in range(kt):
                for b in range(kh):
                    for cc in range(kw):
                        dxp[..., ci, a : a + st * so : st, b : b + sh * ho : sh,
                            cc : cc + sw * wo : sw] += d_cols[k].reshape(
                                lead + odims
                            )
                        k += 1
        d_x = dxp[..., pt : pt + s_in, ph : ph + h_in, pw : pw + w_in]
        if any(padding):
            d_x = d_x.copy()
        return (d_x, d_w.astype(kernel.dtype, copy=False), d_bias)

    return _result(out.astype(x.dtype, copy=False), (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner extents differ ({a.shape[1]} vs {b.shape[0]})"
        )
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def strip_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Independent matrix per strip: (b, strips, c) x (strips, c, d) -> (b, strips, d)."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError("strip_matmul expects rank-3 tensors")
    if x.shape[1] != w.shape[0] or x.shape[2] != w.shape[1]:
        raise DimensionError(
            f"strip_matmul: {x.shape} incompatible with weights {w.shape}"
        )
    out = np.einsum("bsc,scd->bsd", x.data, w.data)

    def vjp(g):
        dx = np.einsum("bsd,scd->bsc", g, w.data)
        dw = np.einsum("bsc,bsd->scd", x.data, g)
        return (dx.astype(x.dtype, copy=False), dw.astype(w.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x, w), vjp)


# ---------------------------------------------------------------------------
# pooling and heads
# ---------------------------------------------------------------------------

def gem_pool(x: Tensor, p: Tensor | float, eps: float = 1e-6) -> Tensor:
    """Generalized-mean pool over the width (last) axis.

    Values are clamped at zero before the power so gradients stay defined;
    eps keeps the p-power away from its singularity at exactly zero. The
    exponent may be a learnable scalar tensor. Powers are computed on values
    normalized by the per-row maximum, which keeps large activations from
    overflowing at big p.
    """
    p_t = p if isinstance(p, Tensor) else None
    p_val = float(p_t.data.reshape(())) if p_t is not None else float(p)
    if p_val <= 0:
        raise ConfigError(f"gem_pool exponent must be positive, got {p_val}")
    w = x.shape[-1]
    u = np.maximum(x.data, 0) + x.dtype.type(eps)
    umax = u.max(axis=-1, keepdims=True)
    r = u / umax
    rp = r**p_val
    m = rp.mean(axis=-1)  # in (0, 1]; m >= 1/w since max(r) == 1
    out = umax[..., 0] * m ** (1.0 / p_val)

    def vjp(g):
        # dy/du_j = M_u^(1/p - 1) * u_j^(p-1) / w in normalized form
        dy_du = (m ** (1.0 / p_val - 1.0))[..., None] * r ** (p_val - 1.0) / w
        dx = g[..., None] * dy_du * (x.data > 0)
        if p_t is None:
            return (dx.astype(x.dtype, copy=False), None)
        log_m = np.log(m)
        d_m_dp = (rp * np.log(r)).mean(axis=-1)
        dy_dp = out * (-log_m / p_val**2 + d_m_dp / (p_val * m))
        dp = np.asarray((g * dy_dp).sum(), dtype=p_t.dtype).reshape(p_t.shape)
        return (dx.astype(x.dtype, copy=False), dp)

    if p_t is None:
        return _result(out.astype(x.dtype, copy=False), (x,),
                       lambda g: (vjp(g)[0],))
    return _result(out.astype(x.dtype, copy=False), (x, p_t), vjp)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm instance."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=np.float32):
        return cls(np.zeros(dim, dtype), np.ones(dim, dtype), momentum, eps)


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Normalize (batch, features) per feature, then scale and shift.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running stats in ``state``; inference mode uses the running
    stats only, so outputs are independent of batch composition.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm expects (batch, features), got {x.shape}")
    dim = x.shape[1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError("batch_norm: gamma/beta must match the feature extent")
    eps = x.dtype.type(state.eps)
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * var
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def vjp(g):
        d_beta = g.sum(axis=0)
        d_gamma = (g * xhat).sum(axis=0)
        if training:
            n = x.shape[0]
            gx = g * gamma.data
            dx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).sum(axis=0) / n)
        else:
            dx = g * gamma.data * inv_std
        return (dx.astype(x.dtype, copy=False),
                d_gamma.astype(gamma.dtype, copy=False),
                d_beta.astype(beta.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax at the true class."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects rank 2, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError(
            f"class label out of range [0, {k}): {labels.min()}..{labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = z - np.log(expz.sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g * d / n).astype(logits.dtype, copy=False),)

    return _result(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    input_index: int
    max_rel_err: float
    worst_element: tuple[int, ...]
    analytic: float
    numeric: float
    passed: bool = False


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "PASS" if e.passed else "FAIL"
            out.append(
                f"  input {e.input_index}: max_rel={e.max_rel_err:.3e} at "
                f"{e.worst_element} (analytic={e.analytic:.6e}, "
                f"numeric={e.numeric:.6e}) {status}"
            )
        return out


def grad_check(
    fn,
    inputs: list[Tensor],
    tolerance: float = 1e-5,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are contracted with a fixed random projection so the
    full vector-Jacobian product is exercised. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1). Inputs should be
    float64; float32 finite differences are unreliable.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    if out.size == 1:
        proj = None
        loss = out
    else:
        proj = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
        loss = sum_all(mul(out, proj))
    for t in inputs:
        t.zero_grad()
    loss.backward()

    def scalar_loss() -> float:
        with no_grad():
            o = fn(*inputs)
        v = o.data if proj is None else o.data * proj.data
        return float(np.sum(np.asarray(v, dtype=np.float64)))

    entries = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, np.float64)
        numeric = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.flat
        num_flat = numeric.flat
        for j in range(t.data.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = scalar_loss()
            flat[j] = orig - step
            lo = scalar_loss()
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        rel = np.abs(analytic - numeric) / denom
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        entry = GradCheckEntry(
            input_index=i,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            worst_element=tuple(int(w) for w in worst),
            analytic=float(analytic[worst]) if rel.size else 0.0,
            numeric=float(numeric[worst]) if rel.size else 0.0,
        )
        entry.passed = entry.max_rel_err < tolerance
        entries.append(entry)
    return GradCheckReport(entries=entries, tolerance=tolerance)
