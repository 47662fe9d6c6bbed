"""Dense float64 array kernels backing the rest of the package.

Everything operates on C-contiguous ``numpy.float64`` arrays in row-major
layout; 4-D tensors are (batch, channel, height, width).  All functions are
pure and never mutate their inputs, so they are safe to call from any number
of threads.  The SVD is a hand-rolled one-sided Jacobi chosen for bitwise
determinism on the small matrices the similarity analysis needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class NumericError(ArithmeticError):
    """An operation encountered or would produce non-finite values."""


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce `values` to a finite, C-contiguous float64 array.

    Parameters
    ----------
    values : array-like
        Nested sequence or ndarray.
    shape : sequence of int, optional
        If given, `values` is interpreted as flat row-major data and
        reshaped; the element count must match exactly.
    """
    a = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise DimensionError(f"shape must be positive, got {shape}")
        if a.size != int(np.prod(shape)):
            raise DimensionError(
                f"{a.size} values cannot fill shape {shape} "
                f"({int(np.prod(shape))} elements)"
            )
        a = a.reshape(shape)
    check_finite(a)
    return a


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"{what} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) and b (k, n)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray, axes=None) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(np.asarray(a, dtype=np.float64), axes))


def mean(a: np.ndarray, axis: int) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).mean(axis=axis)


def variance(a: np.ndarray, axis: int) -> np.ndarray:
    """Population (biased) variance along `axis`."""
    return np.asarray(a, dtype=np.float64).var(axis=axis)


# ---------------------------------------------------------------------------
# Singular value decomposition
# ---------------------------------------------------------------------------

#: relative threshold on column inner products that counts as "orthogonal"
_SVD_TOL = 1e-12
_SVD_MAX_SWEEPS = 100


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with k = min(m, n).

    `u` is (m, k) with orthonormal columns, `s` non-increasing and
    non-negative, `vt` (k, n) with orthonormal rows.  The sign of each
    column of `u` is fixed so its largest-magnitude entry is positive.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def svd(a: np.ndarray) -> SvdResult:
    """One-sided Jacobi SVD with a fixed cyclic sweep order.

    Deterministic: identical input bits produce identical output bits.
    Columns are orthogonalized pairwise in row-major pair order until the
    largest relative inner product falls below 1e-12 (at most 100 sweeps).
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"svd needs a non-empty 2-D matrix, got shape {a.shape}")
    check_finite(a, "svd input")

    m, n = a.shape
    if n > m:
        inner = _jacobi_svd(a.T.copy())
        u, s, vt = inner.vt.T.copy(), inner.s, inner.u.T.copy()
        u, vt = _fix_signs(u, vt)
        return SvdResult(u, s, vt)
    return _jacobi_svd(a.copy())


def _jacobi_svd(a: np.ndarray) -> SvdResult:
    # a is tall or square (m >= n) and owned by us.
    m, n = a.shape
    v = np.eye(n)

    for _ in range(_SVD_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= _SVD_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = c * t
                a[:, p], a[:, q] = c * ap - s_ * aq, s_ * ap + c * aq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s_ * v[:, q]
                v[:, q] = s_ * vp + c * v[:, q]
        if not rotated:
            break

    norms = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-norms, kind="stable")
    a = a[:, order]
    v = v[:, order]
    s = norms[order]

    # Columns with numerically-zero norm get sigma = 0 and an orthonormal
    # filler direction so u keeps orthonormal columns for rank-deficient
    # inputs (reconstruction is unaffected: the filler is multiplied by 0).
    cutoff = s[0] * max(m, n) * np.finfo(np.float64).eps if s[0] > 0 else 0.0
    u = np.zeros((m, n))
    kept = []
    for j in range(n):
        if s[j] > cutoff:
            u[:, j] = a[:, j] / s[j]
            kept.append(j)
        else:
            s[j] = 0.0
    for j in range(n):
        if s[j] == 0.0:
            u[:, j] = _orthonormal_filler(u, kept)
            kept.append(j)

    u, vt = _fix_signs(u, v.T.copy())
    return SvdResult(u, s, vt)


def _orthonormal_filler(u: np.ndarray, kept: list[int]) -> np.ndarray:
    # First canonical basis vector with a large component outside span(u).
    m = u.shape[0]
    basis = u[:, kept]
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        if kept:
            e -= basis @ (basis.T @ e)
            # repeat once for numerical hygiene
            e -= basis @ (basis.T @ e)
        norm = np.sqrt(e @ e)
        if norm > 0.5:
            return e / norm
    raise NumericError("could not complete an orthonormal basis")


def _fix_signs(u: np.ndarray, vt: np.ndarray):
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return u, vt


# ---------------------------------------------------------------------------
# Convolution and pooling kernels
# ---------------------------------------------------------------------------


def conv2d_out_shape(h: int, w: int, kernel: int, stride: int, pad: int):
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv kernel {kernel} (stride {stride}, pad {pad}) does not fit "
            f"input {h}x{w}"
        )
    return oh, ow


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Extract conv patches of x (N,C,H,W) as a (N*OH*OW, C*k*k) matrix."""
    n, c, h, w = x.shape
    oh, ow = conv2d_out_shape(h, w, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, OH, OW, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kernel * kernel
    )


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch columns back to an image; adjoint of `im2col`."""
    n, c, h, w = x_shape
    oh, ow = conv2d_out_shape(h, w, kernel, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j]
            )
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w].copy()
    return xp


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Cross-correlation of x (N,C,H,W) with filters w (F,C,k,k), plus bias."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs filters {w.shape}")
    n = x.shape[0]
    f, _, k, _ = w.shape
    oh, ow = conv2d_out_shape(x.shape[2], x.shape[3], k, stride, pad)
    cols = im2col(x, k, stride, pad)
    out = cols @ w.reshape(f, -1).T + np.asarray(b, dtype=np.float64)
    return np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0
):
    """Gradients of conv2d_forward: returns (dx, dw, db)."""
    n = x.shape[0]
    f = w.shape[0]
    if dy.shape[:2] != (n, f):
        raise DimensionError(f"dy shape {dy.shape} inconsistent with conv output")
    cols = im2col(x, w.shape[2], stride, pad)
    dx, dw, db = conv2d_backward_cols(dy, cols, x.shape, w, stride, pad)
    return dx, dw, db


def conv2d_backward_cols(
    dy: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray, stride: int, pad: int,
    need_dx: bool = True,
):
    """conv2d gradients from pre-extracted patch columns (forward's im2col)."""
    f, c, k, _ = w.shape
    dyc = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, f)
    dw = (dyc.T @ cols).reshape(f, c, k, k)
    db = dyc.sum(axis=0)
    dx = None
    if need_dx:
        dx = col2im(dyc @ w.reshape(f, -1), x_shape, k, stride, pad)
    return dx, dw, db


def maxpool_forward(x: np.ndarray, kernel: int, stride: int | None = None):
    """Max pooling over (N,C,H,W); returns (y, switches).

    `switches` holds the flat within-window argmax (first maximum wins, so
    ties are deterministic) and is consumed by `maxpool_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"maxpool needs a 4-D input, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = conv2d_out_shape(h, w, kernel, stride, 0)
    if kernel == 2 and stride == 2:
        return _maxpool2_forward(x, oh, ow)
    if stride == kernel:
        trimmed = x[:, :, : oh * kernel, : ow * kernel]
        win = trimmed.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, oh, ow, kernel * kernel)
    else:
        win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(n, c, oh, ow, kernel * kernel)
    switches = win.argmax(axis=-1)
    y = np.take_along_axis(win, switches[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), switches


def _maxpool2_forward(x: np.ndarray, oh: int, ow: int):
    # 2x2/stride-2 fast path; switch values match argmax (first max wins)
    a = x[:, :, 0 : oh * 2 : 2, 0 : ow * 2 : 2]
    b = x[:, :, 0 : oh * 2 : 2, 1 : ow * 2 : 2]
    c = x[:, :, 1 : oh * 2 : 2, 0 : ow * 2 : 2]
    d = x[:, :, 1 : oh * 2 : 2, 1 : ow * 2 : 2]
    ab = a >= b
    m_ab = np.where(ab, a, b)
    s_ab = np.where(ab, 0, 1)
    cd = c >= d
    m_cd = np.where(cd, c, d)
    s_cd = np.where(cd, 2, 3)
    top = m_ab >= m_cd
    y = np.where(top, m_ab, m_cd)
    switches = np.where(top, s_ab, s_cd)
    return y, switches


def maxpool_backward(
    dy: np.ndarray, switches: np.ndarray, x_shape, kernel: int, stride: int | None = None
) -> np.ndarray:
    """Route dy back to the argmax positions recorded by the forward pass."""
    stride = kernel if stride is None else stride
    n, c, h, w = x_shape
    oh, ow = switches.shape[2], switches.shape[3]
    if dy.shape != switches.shape:
        raise DimensionError(f"dy shape {dy.shape} vs switches {switches.shape}")
    if kernel == 2 and stride == 2:
        dx = np.zeros((n, c, h, w))
        dx[:, :, 0 : oh * 2 : 2, 0 : ow * 2 : 2] = np.where(switches == 0, dy, 0.0)
        dx[:, :, 0 : oh * 2 : 2, 1 : ow * 2 : 2] = np.where(switches == 1, dy, 0.0)
        dx[:, :, 1 : oh * 2 : 2, 0 : ow * 2 : 2] = np.where(switches == 2, dy, 0.0)
        dx[:, :, 1 : oh * 2 : 2, 1 : ow * 2 : 2] = np.where(switches == 3, dy, 0.0)
        return dx
    if stride == kernel:
        # non-overlapping windows: scatter into the tiled block directly
        scattered = np.zeros((n, c, oh, ow, kernel * kernel))
        np.put_along_axis(scattered, switches[..., None], dy[..., None], axis=-1)
        block = scattered.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : oh * kernel, : ow * kernel] = block.reshape(n, c, oh * kernel, ow * kernel)
        return dx
    ni, ci, ohi, owi = np.indices((n, c, oh, ow))
    hi = ohi * stride + switches // kernel
    wi = owi * stride + switches % kernel
    dx = np.zeros((n, c, h, w))
    np.add.at(dx, (ni, ci, hi, wi), dy)
    return dx
