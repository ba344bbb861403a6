"""Dense float64 kernels with multiply-accumulate (MAC) instrumentation.

Matrices are plain 2-D numpy arrays. Every kernel is pure; the only piece
of state is the MacCounter a caller threads through matmul, which is what
the cost model in `bench` is checked against. Counted MACs cover matrix
products only; softmax / layer-norm / GELU scalar work is not counted.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class MacCounter:
    """Cumulative multiply-accumulate counter.

    Deterministic: identical call sequences produce identical counts.
    One counter per execution context; never share across workers.
    """

    __slots__ = ("count", "enabled")

    def __init__(self, enabled: bool = True):
        self.count = 0
        self.enabled = enabled

    def add(self, macs: int) -> None:
        if self.enabled:
            if macs < 0:
                raise ContractError("MAC increment must be non-negative")
            self.count += int(macs)

    def __repr__(self):
        return f"MacCounter(count={self.count}, enabled={self.enabled})"


def matmul(a: Matrix, b: Matrix, counter: MacCounter | None = None) -> Matrix:
    """Dense product a @ b, counting a.rows * a.cols * b.cols MACs."""
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def softmax_rows(m: Matrix, mask: Matrix | None = None) -> Matrix:
    """Row-wise softmax with max-subtraction; masked entries come out exactly 0.

    mask is a boolean matrix of m's shape, True = keep. A fully masked row
    has no valid distribution and raises ContractError.
    """
    if mask is not None:
        if mask.shape != m.shape:
            raise ContractError(f"mask shape {mask.shape} != logits shape {m.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("softmax_rows: fully masked row")
        m = np.where(mask, m, -np.inf)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    if not np.isfinite(out).all():
        raise ContractError("softmax_rows produced non-finite values")
    return out


def layer_norm(m: Matrix, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12) -> Matrix:
    """Per-row normalization to mean 0 / variance 1, then affine gamma/beta."""
    if gamma.shape != (m.shape[1],) or beta.shape != (m.shape[1],):
        raise ContractError("layer_norm: gamma/beta length must equal column count")
    mean = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    normed = (m - mean) / np.sqrt(var + eps)
    return normed * gamma + beta


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(m: Matrix) -> Matrix:
    """Elementwise x * Phi(x), tanh approximation."""
    return 0.5 * m * (1.0 + np.tanh(_GELU_C * (m + 0.044715 * (m * m * m))))


def gelu_grad(m: Matrix, tanh_u: Matrix | None = None) -> Matrix:
    """d gelu / dx at m; pass tanh of the inner term if already computed."""
    if tanh_u is None:
        tanh_u = np.tanh(_GELU_C * (m + 0.044715 * (m * m * m)))
    du = _GELU_C * (1.0 + 3 * 0.044715 * (m * m))
    return 0.5 * (1.0 + tanh_u) + 0.5 * m * (1.0 - tanh_u * tanh_u) * du
