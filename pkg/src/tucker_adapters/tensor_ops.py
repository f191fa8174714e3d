"""Dense tensor arithmetic: mode products, Tucker reconstruction, and the
fused adapter contraction used in every forward pass.

Tensors are plain float64 ``numpy.ndarray`` objects in C (row-major) order;
matrices are 2-D arrays. A mode-n product contracts the n-th axis of a
tensor against the columns of a matrix, replacing that axis's size by the
matrix's row count.
"""

from __future__ import annotations

import numpy as np

# Rows with Euclidean norm below this are left untouched by row_normalize
# and excluded from orthogonality Gram products.
EPS_NORM = 1e-12


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Contract ``t``'s axis ``mode`` against the columns of matrix ``m``.

    Result shape equals ``t.shape`` with ``shape[mode]`` replaced by
    ``m.shape[0]``:  ``out[..., i, ...] = sum_j m[i, j] * t[..., j, ...]``.
    """
    t = _as_f64(t)
    m = _as_f64(m)
    if m.ndim != 2:
        raise ValueError(f"mode-{mode} factor must be 2-D, got {m.ndim}-D")
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for a {t.ndim}-D tensor")
    if m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"mode-{mode} size mismatch: factor has {m.shape[1]} columns, "
            f"tensor axis has size {t.shape[mode]}"
        )
    # tensordot puts the new axis first; move it back to `mode`.
    out = np.tensordot(m, t, axes=(1, mode))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def tucker_reconstruct(core: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    """Expand a Tucker core by applying one factor matrix per mode in order."""
    core = _as_f64(core)
    if len(factors) != core.ndim:
        raise ValueError(
            f"need {core.ndim} factors for a {core.ndim}-D core, got {len(factors)}"
        )
    out = core
    for mode, factor in enumerate(factors):
        out = mode_n_product(out, factor, mode)
    return out


def contract_adapter(
    core: np.ndarray,
    u1: np.ndarray,
    u2: np.ndarray,
    u3_row: np.ndarray,
    u4_row: np.ndarray,
) -> np.ndarray:
    """Fused extraction of one adapter weight from a 4-D core.

    Computes ``u1 @ (core x_3 u3_row x_4 u4_row) @ u2.T`` where the two row
    vectors contract modes 2 and 3 away (a 1 x r factor followed by a
    squeeze), yielding an ``a x b`` matrix. This is the inner loop of every
    adapted forward pass; the generic mode-product path above is kept as its
    cross-check oracle.
    """
    core = _as_f64(core)
    u1, u2 = _as_f64(u1), _as_f64(u2)
    u3_row, u4_row = _as_f64(u3_row).ravel(), _as_f64(u4_row).ravel()
    if core.ndim != 4:
        raise ValueError(f"adapter core must be 4-D, got {core.ndim}-D")
    r1, r2, r3, r4 = core.shape
    if u1.shape[1] != r1:
        raise ValueError(f"u1 has {u1.shape[1]} columns, core mode 0 is {r1}")
    if u2.shape[1] != r2:
        raise ValueError(f"u2 has {u2.shape[1]} columns, core mode 1 is {r2}")
    if u3_row.size != r3:
        raise ValueError(f"u3 row length {u3_row.size}, core mode 2 is {r3}")
    if u4_row.size != r4:
        raise ValueError(f"u4 row length {u4_row.size}, core mode 3 is {r4}")
    mid = np.einsum("ijkl,k,l->ij", core, u3_row, u4_row)
    return u1 @ mid @ u2.T


def row_normalize(m: np.ndarray, eps: float = EPS_NORM) -> np.ndarray:
    """Scale each row to unit Euclidean norm; rows with norm < eps pass through."""
    m = _as_f64(m)
    if m.ndim != 2:
        raise ValueError(f"row_normalize expects a matrix, got {m.ndim}-D")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms < eps, 1.0, norms)
    return np.where(norms < eps, m, m / safe)


def frobenius_norm_sq(t: np.ndarray) -> float:
    """Sum of squared entries."""
    t = np.asarray(t, dtype=np.float64)
    return float(np.sum(t * t))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; shapes must match exactly."""
    a, b = _as_f64(a), _as_f64(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b
