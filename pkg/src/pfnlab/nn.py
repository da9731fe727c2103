"""Dense kernels with hand-derived backward passes.

Every forward kernel works on numpy arrays of any float dtype and keeps
that dtype, so the same code serves the 32-bit model path and the 64-bit
verification path.  Leading axes are treated as batch axes; the last two
axes are the matrix rows and columns.

Backward kernels take the upstream gradient first, followed by whatever
forward inputs/outputs they need, and return gradients in the order of
the forward arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Additive bias for disallowed attention keys.  After max-subtraction the
# exponent is below -1e8, which underflows to exactly 0.0 in both float32
# and float64, so masked keys get exactly zero weight.
MASK_BIAS = -1e9

# Constants of the tanh approximation:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite value in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes.

    Single-row products are padded to two rows so that BLAS always takes
    its gemm path.  A row's result then does not depend on how many other
    rows share the call, which keeps query outputs bit-stable when the
    query set changes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    if a.shape[-2] == 1:
        padded = np.concatenate([a, np.zeros_like(a)], axis=-2)
        return np.matmul(padded, b)[..., :1, :]
    return np.matmul(a, b)


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``a @ b`` with respect to ``a`` and ``b``.

    Batch axes that ``b`` broadcast over are summed out of its gradient.
    """
    ga = matmul(grad, np.swapaxes(b, -1, -2))
    gb = matmul(np.swapaxes(a, -1, -2), grad)
    while gb.ndim > b.ndim:
        gb = gb.sum(axis=0)
    return ga, gb


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    _check_finite(m, "softmax input")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def layer_norm_forward(m: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Returns ``(output, (xhat, inv_std))``; the cache feeds ``layer_norm_backward``."""
    if gain.shape != (m.shape[-1],) or bias.shape != (m.shape[-1],):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} for width {m.shape[-1]}"
        )
    _check_finite(m, "layer_norm input")
    xc = m - m.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm(m: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-row standardization (population variance) followed by gain and bias."""
    return layer_norm_forward(m, gain, bias, eps)[0]


def layer_norm_backward(grad, m, gain, eps: float = 1e-5, cache=None):
    """Returns ``(d_m, d_gain, d_bias)``.

    Row statistics are recomputed from ``m`` unless the forward ``cache``
    is supplied.
    """
    xhat, inv = cache if cache is not None else layer_norm_forward(m, gain, np.zeros_like(gain), eps)[1]
    axes = tuple(range(m.ndim - 1))
    d_gain = (grad * xhat).sum(axis=axes)
    d_bias = grad.sum(axis=axes)
    dxhat = grad * gain
    d_m = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return d_m, d_gain, d_bias


def gelu_forward(m: np.ndarray):
    """Returns ``(output, tanh_term)``; the tanh term feeds ``gelu_backward``."""
    _check_finite(m, "gelu input")
    t = np.tanh(GELU_C * (m + GELU_A * (m * m * m)))
    return 0.5 * m * (1.0 + t), t


def gelu(m: np.ndarray) -> np.ndarray:
    """Element-wise GELU, tanh approximation (see ``GELU_C``/``GELU_A``)."""
    return gelu_forward(m)[0]


def gelu_backward(grad: np.ndarray, m: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(GELU_C * (m + GELU_A * (m * m * m)))
    m2 = m * m
    dt = (1.0 - t * t) * (GELU_C * (1.0 + 3.0 * GELU_A * m2))
    return grad * (0.5 * (1.0 + t) + 0.5 * m * dt)


def _attention_bias(mask: np.ndarray, dtype) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask has a row with no allowed key")
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def masked_attention_forward(q, k, v, mask):
    """Scaled dot-product attention; returns ``(output, weights)``.

    ``mask`` is boolean and broadcastable to ``(..., q_rows, k_rows)``;
    True marks an allowed key.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != k.shape[-2] or (mask.shape[-2] not in (1, q.shape[-2])):
        raise DimensionError(f"mask shape {mask.shape} for q{q.shape} k{k.shape}")
    for name, x in (("q", q), ("k", k), ("v", v)):
        _check_finite(x, f"attention {name}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, np.swapaxes(k, -1, -2)) * q.dtype.type(scale)
    p = softmax_rows(scores + _attention_bias(mask, q.dtype))
    return matmul(p, v), p


def masked_attention(q, k, v, mask) -> np.ndarray:
    return masked_attention_forward(q, k, v, mask)[0]


def masked_attention_backward(grad, q, k, v, p):
    """Returns ``(d_q, d_k, d_v)`` given the forward attention weights ``p``."""
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    d_p, d_v = matmul_backward(grad, p, v)
    d_s = softmax_backward(d_p, p) * scale
    d_q = matmul(d_s, k)
    d_k = matmul(np.swapaxes(d_s, -1, -2), q)
    return d_q, d_k, d_v


def cross_entropy(logits: np.ndarray, targets, weights=None) -> float:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax.

    ``weights`` (optional, one per row) turns the mean into a weighted sum;
    the trainer uses it to skip padding rows and to average per task.
    """
    return cross_entropy_forward(logits, targets, weights)[0]


def cross_entropy_forward(logits, targets, weights=None):
    """Returns ``(loss, probabilities)``."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects a 2-D logit matrix")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise DimensionError("one target per logit row required")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("target class out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    _check_finite(z, "cross_entropy logits")
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(targets)), targets]
    if weights is None:
        loss = float(nll.astype(np.float64).mean())
    else:
        loss = float((nll.astype(np.float64) * np.asarray(weights, dtype=np.float64)).sum())
    if not math.isfinite(loss):
        raise NumericError("cross_entropy produced a non-finite loss")
    return loss, np.exp(z - lse[:, None])


def cross_entropy_backward(probs, targets, weights=None):
    g = probs.copy()
    g[np.arange(len(targets)), targets] -= 1.0
    if weights is None:
        return g / probs.dtype.type(len(targets))
    return g * np.asarray(weights, dtype=probs.dtype)[:, None]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"f is not finite around coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> dict:
    """Bias-corrected Adam update of ``params`` in place.

    ``params`` and ``grads`` map names to arrays of equal shapes; moment
    buffers are created on first use.  ``lr`` overrides ``state.lr`` for
    this step (used by learning-rate schedules).
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} for parameter {name}{p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"Adam state shape mismatch for {name}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params
