"""Deterministic numeric primitives shared by every other module.

Everything here is pure 64-bit float math on plain numpy arrays. Feature
matrices are ``(n_samples, n_features)`` arrays; image/activation grids are
channels-first ``(channels, height, width)``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

from .errors import DomainError, NotPositiveDefiniteError, ShapeMismatchError

_MASK64 = (1 << 64) - 1


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Seedable, splittable randomness handle.

    The same ``(seed, stream_id)`` pair yields the same draw sequence on any
    platform (PCG64 under the hood). A stream is single-owner: parallel work
    must use :meth:`derive`-d child streams rather than share one generator.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, int) or not 0 <= value <= _MASK64:
                raise DomainError(f"{name} must be a 64-bit unsigned integer, got {value!r}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, key: int) -> "RngStream":
        # splitmix64-style mixing keeps sibling streams decorrelated
        x = (self.stream_id ^ ((key + 1) * 0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
        return RngStream(self.seed, x ^ (x >> 31))


def as_feature_matrix(X) -> np.ndarray:
    """Validate and return ``X`` as a float64 ``(n, d)`` matrix."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeMismatchError(f"feature matrix must be 2-D, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ShapeMismatchError(f"feature matrix must be at least 1x1, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError("feature matrix contains NaN or Inf")
    return X


def quantile(sorted_data, q: float) -> float:
    """Type-7 quantile: linear interpolation at rank ``q * (n - 1)``.

    ``sorted_data`` must already be ascending (not re-checked here).
    """
    data = np.asarray(sorted_data, dtype=float)
    if data.ndim != 1 or data.size == 0:
        raise DomainError("quantile needs a non-empty 1-D sequence")
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    rank = q * (data.size - 1)
    lo = int(np.floor(rank))
    hi = int(np.ceil(rank))
    frac = rank - lo
    return float(data[lo] * (1.0 - frac) + data[hi] * frac)


@dataclasses.dataclass(frozen=True)
class QuantileSummary:
    """First/third quartile with the usual 1.5 IQR whisker fences."""

    q1: float
    q3: float
    iqr: float
    lower_fence: float
    upper_fence: float

    @classmethod
    def from_data(cls, values) -> "QuantileSummary":
        data = np.sort(np.asarray(values, dtype=float))
        q1 = quantile(data, 0.25)
        q3 = quantile(data, 0.75)
        iqr = q3 - q1
        return cls(q1=q1, q3=q3, iqr=iqr,
                   lower_fence=q1 - 1.5 * iqr, upper_fence=q3 + 1.5 * iqr)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.lower_fence) & (x <= self.upper_fence)


def solve_spd(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` via Cholesky."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatchError(f"A must be square, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ShapeMismatchError(f"b has length {b.shape[0]}, expected {A.shape[0]}")
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise DomainError("solve_spd inputs contain NaN or Inf")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10:
        raise DomainError("matrix is not symmetric within 1e-10")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def knn_distances(X, query_index: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and Euclidean distances of the ``k`` nearest neighbors.

    The query point is excluded from its own neighborhood; distance ties are
    broken toward the lower sample index.
    """
    X = as_feature_matrix(X)
    n = X.shape[0]
    if not 0 <= query_index < n:
        raise DomainError(f"query_index {query_index} out of range for n={n}")
    if not 1 <= k <= n - 1:
        raise DomainError(f"k must satisfy 1 <= k <= n-1, got k={k} with n={n}")
    diffs = X - X[query_index]
    dist = np.sqrt((diffs * diffs).sum(axis=1))
    dist[query_index] = np.inf
    order = np.lexsort((np.arange(n), dist))
    idx = order[:k]
    return idx, dist[idx]


# ---------------------------------------------------------------------------
# direct 2-D cross-correlation and its adjoints


def _pad_amounts(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DomainError("same padding requires odd kernel sides")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise DomainError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d_batch(x, kernel, padding: str = "same") -> np.ndarray:
    """Cross-correlate ``(N, C, H, W)`` inputs with a ``(C', C, kh, kw)`` kernel."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(kernel, dtype=float)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(
            f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = _pad_amounts(kh, kw, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError("kernel larger than (padded) input")
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for u in range(kh):
        for v in range(kw):
            out += np.einsum("oc,nchw->nohw", w[:, :, u, v],
                             xp[:, :, u:u + ho, v:v + wo])
    return out


def conv2d_batch_input_grad(grad_out, kernel, input_hw, padding: str = "same") -> np.ndarray:
    """Adjoint of :func:`conv2d_batch` with respect to the input."""
    g = np.asarray(grad_out, dtype=float)
    w = np.asarray(kernel, dtype=float)
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = _pad_amounts(kh, kw, padding)
    h, wd = input_hw
    ho, wo = g.shape[2], g.shape[3]
    xp_grad = np.zeros((g.shape[0], w.shape[1], h + 2 * ph, wd + 2 * pw))
    for u in range(kh):
        for v in range(kw):
            xp_grad[:, :, u:u + ho, v:v + wo] += np.einsum(
                "oc,nohw->nchw", w[:, :, u, v], g)
    return xp_grad[:, :, ph:ph + h, pw:pw + wd]


def conv2d_batch_kernel_grad(grad_out, x, kernel_shape, padding: str = "same") -> np.ndarray:
    """Adjoint of :func:`conv2d_batch` with respect to the kernel."""
    g = np.asarray(grad_out, dtype=float)
    x = np.asarray(x, dtype=float)
    _, _, kh, kw = kernel_shape
    ph, pw = _pad_amounts(kh, kw, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = g.shape[2], g.shape[3]
    grad_w = np.zeros(kernel_shape)
    for u in range(kh):
        for v in range(kw):
            grad_w[:, :, u, v] = np.einsum(
                "nohw,nchw->oc", g, xp[:, :, u:u + ho, v:v + wo])
    return grad_w


def conv2d(image, kernel, padding: str = "same") -> np.ndarray:
    """Direct cross-correlation of a ``(C, H, W)`` grid with a ``(C', C, kh, kw)`` kernel.

    ``same`` zero-pads so height/width are preserved (odd kernels only);
    ``valid`` keeps only fully overlapping positions.
    """
    x = np.asarray(image, dtype=float)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input grid must be (C, H, W), got shape {x.shape}")
    return conv2d_batch(x[None], kernel, padding)[0]


def conv2d_input_grad(grad_out, kernel, input_hw, padding: str = "same") -> np.ndarray:
    return conv2d_batch_input_grad(np.asarray(grad_out, dtype=float)[None],
                                   kernel, input_hw, padding)[0]


def conv2d_kernel_grad(grad_out, image, kernel_shape, padding: str = "same") -> np.ndarray:
    return conv2d_batch_kernel_grad(np.asarray(grad_out, dtype=float)[None],
                                    np.asarray(image, dtype=float)[None],
                                    kernel_shape, padding)
