"""Five outlier detectors over a shared feature matrix, fused by majority vote.

A sample is declared an outlier when at least three of the five detectors
(IQR fences, local outlier factor, one-class SVM, isolation forest, elliptic
envelope) flag it. Every detector is deterministic for a fixed config, emits
scores where higher means more anomalous, and — apart from the fence-based
IQR rule — is thresholded through one shared contamination level so the vote
stays auditable.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .errors import (ConfigError, ConvergenceError, DegenerateDataError,
                     DomainError, ShapeMismatchError)
from .numeric import QuantileSummary, RngStream, as_feature_matrix

EULER_MASCHERONI = 0.5772156649

VOTE_THRESHOLD = 3

_LRD_GUARD = 1e-10


class DetectorKind(enum.Enum):
    IQR = "iqr"
    LOF = "lof"
    OCSVM = "ocsvm"
    ISOLATION_FOREST = "iforest"
    ELLIPTIC_ENVELOPE = "elliptic"


# fixed sub-stream key per detector so parallel fits stay decorrelated
_STREAM_KEY = {
    DetectorKind.OCSVM: 2,
    DetectorKind.ISOLATION_FOREST: 3,
    DetectorKind.ELLIPTIC_ENVELOPE: 4,
}


@dataclasses.dataclass
class DetectorConfig:
    """Hyperparameters for the five detectors plus the shared vote threshold.

    ``contamination`` is the expected outlier fraction; the default 0.108
    matches the removal rate the cleaning pipeline targets. ``ocsvm_nu``
    defaults to ``contamination`` and ``ocsvm_gamma`` to ``1 / (d * var)``
    when left unset; ``mcd_h`` defaults to ``ceil((n + d + 1) / 2)``.
    """

    contamination: float = 0.108
    lof_k: int = 20
    iforest_trees: int = 100
    iforest_subsample: int = 256
    ocsvm_nu: float | None = None
    ocsvm_gamma: float | None = None
    ocsvm_tol: float = 1e-4
    ocsvm_max_iter: int = 200_000
    ocsvm_max_fit: int = 4096       # SMO fit subsample cap; scoring covers all rows
    mcd_h: int | None = None
    mcd_restarts: int = 50
    mcd_max_csteps: int = 100
    seed: RngStream = RngStream(0)

    def __post_init__(self):
        if not 0.0 < self.contamination <= 0.5:
            raise DomainError(f"contamination must lie in (0, 0.5], got {self.contamination}")
        for name in ("lof_k", "iforest_trees", "ocsvm_max_iter", "ocsvm_max_fit",
                     "mcd_restarts", "mcd_max_csteps"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.iforest_subsample < 2:
            raise DomainError("iforest_subsample must be at least 2")
        if self.ocsvm_nu is not None and not 0.0 < self.ocsvm_nu <= 1.0:
            raise DomainError(f"ocsvm_nu must lie in (0, 1], got {self.ocsvm_nu}")
        if self.ocsvm_gamma is not None and self.ocsvm_gamma <= 0:
            raise DomainError("ocsvm_gamma must be positive")
        if self.ocsvm_tol <= 0:
            raise DomainError("ocsvm_tol must be positive")
        if self.mcd_h is not None and self.mcd_h < 1:
            raise DomainError("mcd_h must be positive")

    @property
    def resolved_nu(self) -> float:
        return self.contamination if self.ocsvm_nu is None else self.ocsvm_nu


@dataclasses.dataclass(frozen=True)
class OutlierVerdict:
    """Per-sample vote vector of the five detectors plus the fused decision."""

    sample_id: object
    votes: Mapping[DetectorKind, bool]
    vote_count: int
    is_outlier: bool


def _sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, accumulated feature by feature."""
    out = np.zeros((A.shape[0], B.shape[0]))
    for f in range(A.shape[1]):
        diff = A[:, f, None] - B[None, :, f]
        out += diff * diff
    return out


# ---------------------------------------------------------------------------
# IQR fences


def iqr_detect(X) -> np.ndarray:
    """Flag rows where any feature falls strictly outside its 1.5 IQR fences."""
    X = as_feature_matrix(X)
    n, d = X.shape
    if n < 4:
        raise DomainError(f"insufficient data: IQR fences need at least 4 samples, got {n}")
    flags = np.zeros(n, dtype=bool)
    for j in range(d):
        summary = QuantileSummary.from_data(X[:, j])
        flags |= ~summary.contains(X[:, j])
    return flags


# ---------------------------------------------------------------------------
# local outlier factor


def lof_scores(X, k: int) -> np.ndarray:
    """Local outlier factor of every row (higher = more isolated).

    Classic definition: a point's score is the mean ratio between the local
    reachability density of its k-distance neighbors and its own density.
    Neighborhoods include distance ties, so they may hold more than ``k``
    points; coincident groups larger than ``k`` have zero reachability and
    score exactly 1 through the guarded density.
    """
    X = as_feature_matrix(X)
    n = X.shape[0]
    if not 1 <= k <= n - 1:
        raise DomainError(f"lof needs 1 <= k <= n-1, got k={k} with n={n}")

    neighbor_idx: list[np.ndarray] = []
    neighbor_dist: list[np.ndarray] = []
    kdist = np.empty(n)
    block = max(1, (1 << 24) // n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        dist = np.sqrt(_sq_distances(X[start:stop], X))
        for i in range(start, stop):
            row = dist[i - start]
            row[i] = np.inf
            kd = np.partition(row, k - 1)[k - 1]
            nb = np.flatnonzero(row <= kd)
            neighbor_idx.append(nb)
            neighbor_dist.append(row[nb].copy())
            kdist[i] = kd

    lrd = np.empty(n)
    for i in range(n):
        reach = np.maximum(kdist[neighbor_idx[i]], neighbor_dist[i])
        lrd[i] = 1.0 / (np.mean(reach) + _LRD_GUARD)
    scores = np.empty(n)
    for i in range(n):
        scores[i] = np.mean(lrd[neighbor_idx[i]]) / lrd[i]
    return scores


# ---------------------------------------------------------------------------
# isolation forest


def expected_path_length(m: int) -> float:
    """Average unsuccessful-search depth c(m) of a random binary search tree."""
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    harmonic = math.log(m - 1) + EULER_MASCHERONI
    return 2.0 * harmonic - 2.0 * (m - 1) / m


def anomaly_score_from_depth(avg_depth: float, subsample: int) -> float:
    """Isolation-forest score ``2 ** (-E[h] / c(psi))``; 0.5 at the average depth."""
    return float(2.0 ** (-avg_depth / expected_path_length(subsample)))


def _grow_itree(points: np.ndarray, height_limit: int, gen: np.random.Generator,
                depth: int = 0):
    # leaf: (size,); internal: (feature, threshold, left, right)
    n = points.shape[0]
    if n <= 1 or depth >= height_limit:
        return (n,)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return (n,)
    q = int(splittable[gen.integers(splittable.size)])
    p = float(gen.uniform(lo[q], hi[q]))
    mask = points[:, q] < p
    return (q, p,
            _grow_itree(points[mask], height_limit, gen, depth + 1),
            _grow_itree(points[~mask], height_limit, gen, depth + 1))


def _itree_depth(tree, x: np.ndarray) -> float:
    depth = 0
    while len(tree) == 4:
        q, p, left, right = tree
        tree = left if x[q] < p else right
        depth += 1
    return depth + expected_path_length(tree[0])


def iforest_scores(X, cfg: DetectorConfig) -> np.ndarray:
    """Isolation-forest anomaly scores in (0, 1); higher = easier to isolate."""
    X = as_feature_matrix(X)
    n = X.shape[0]
    if n < 2:
        raise DomainError("isolation forest needs at least 2 samples")
    psi = cfg.iforest_subsample
    if psi > n:
        warnings.warn(f"isolation-forest subsample {psi} clamped to n={n}")
        psi = n
    height_limit = math.ceil(math.log2(psi))
    root = cfg.seed.derive(_STREAM_KEY[DetectorKind.ISOLATION_FOREST])
    depth_sum = np.zeros(n)
    for t in range(cfg.iforest_trees):
        gen = root.derive(t).generator()
        sample = X[gen.choice(n, size=psi, replace=False)]
        tree = _grow_itree(sample, height_limit, gen)
        depth_sum += [_itree_depth(tree, x) for x in X]
    avg_depth = depth_sum / cfg.iforest_trees
    c = expected_path_length(psi)
    return 2.0 ** (-avg_depth / c)


# ---------------------------------------------------------------------------
# one-class SVM


def _smo_one_class(K: np.ndarray, nu: float, tol: float, max_iter: int):
    """Solve min 1/2 a'Ka s.t. 0 <= a_i <= 1/(nu*m), sum a = 1 by pairwise SMO.

    Each step picks the maximal KKT-violating pair (the cheapest-to-raise and
    costliest-to-hold coordinates) and moves mass between them. Returns
    ``(alpha, gradient, violation, iterations)``.
    """
    m = K.shape[0]
    C = 1.0 / (nu * m)
    alpha = np.zeros(m)
    n_bound = int(np.floor(nu * m))
    alpha[:n_bound] = C
    if n_bound < m:
        alpha[n_bound] = 1.0 - n_bound * C
    g = K @ alpha
    snap = 1e-12 * C
    indices = np.arange(m)
    for it in range(max_iter):
        up = alpha < C
        low = alpha > 0.0
        i = indices[up][np.argmin(g[up])]
        j = indices[low][np.argmax(g[low])]
        violation = g[j] - g[i]
        if violation <= tol:
            return alpha, g, float(violation), it
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        step = violation / max(quad, 1e-12)
        step = min(step, C - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        if alpha[i] > C - snap:
            alpha[i] = C
        if alpha[j] < snap:
            alpha[j] = 0.0
        g += step * (K[:, i] - K[:, j])
    up = alpha < C
    low = alpha > 0.0
    violation = float(np.max(g[low]) - np.min(g[up]))
    raise ConvergenceError(
        f"one-class SVM did not converge after {max_iter} iterations "
        f"(KKT violation {violation:.3e} > tol {tol:.1e})",
        kkt_violation=violation)


def _ocsvm_rho(alpha: np.ndarray, g: np.ndarray, C: float) -> float:
    free = (alpha > 0.0) & (alpha < C)
    if free.any():
        return float(g[free].mean())
    lo = float(g[alpha == C].max()) if (alpha == C).any() else None
    hi = float(g[alpha == 0.0].min()) if (alpha == 0.0).any() else None
    if lo is not None and hi is not None:
        return 0.5 * (lo + hi)
    return lo if lo is not None else hi


def ocsvm_fit_score(X, cfg: DetectorConfig) -> np.ndarray:
    """nu-parameterized one-class SVM scores via SMO on the RBF-kernel dual.

    The score of a point is ``rho - sum_j alpha_j K(x_j, x)``: positive
    outside the learned boundary, and at most a ``nu`` fraction of the
    training rows can end up there. Fitting uses at most ``ocsvm_max_fit``
    rows (deterministic subsample); scoring always covers every row.
    """
    X = as_feature_matrix(X)
    n, d = X.shape
    if n < 2:
        raise DomainError("one-class SVM needs at least 2 samples")
    nu = cfg.resolved_nu
    var = float(X.var())
    if cfg.ocsvm_gamma is not None:
        gamma = cfg.ocsvm_gamma
    else:
        gamma = 1.0 / (d * var) if var > 0 else 1.0

    root = cfg.seed.derive(_STREAM_KEY[DetectorKind.OCSVM])
    if n > cfg.ocsvm_max_fit:
        fit_idx = np.sort(root.generator().choice(n, size=cfg.ocsvm_max_fit, replace=False))
    else:
        fit_idx = np.arange(n)
    Xf = X[fit_idx]
    K = np.exp(-gamma * _sq_distances(Xf, Xf))
    alpha, g, _, _ = _smo_one_class(K, nu, cfg.ocsvm_tol, cfg.ocsvm_max_iter)
    C = 1.0 / (nu * Xf.shape[0])
    rho = _ocsvm_rho(alpha, g, C)

    sv = alpha > 0.0
    weights = alpha[sv]
    support = Xf[sv]
    scores = np.empty(n)
    block = max(1, (1 << 22) // max(support.shape[0], 1))
    for start in range(0, n, block):
        stop = min(start + block, n)
        kb = np.exp(-gamma * _sq_distances(X[start:stop], support))
        scores[start:stop] = rho - kb @ weights
    return scores


# ---------------------------------------------------------------------------
# elliptic envelope (FastMCD)


def _sample_cov(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    return (Xc.T @ Xc) / (X.shape[0] - 1)


def _mahalanobis_sq(X: np.ndarray, loc: np.ndarray, cov: np.ndarray) -> np.ndarray | None:
    """Squared Mahalanobis distances, or None when ``cov`` is not PD."""
    try:
        factor = scipy.linalg.cho_factor(cov, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    centered = X - loc
    solved = scipy.linalg.cho_solve(factor, centered.T, check_finite=False)
    return np.einsum("ij,ji->i", centered, solved)


def _c_step_run(X: np.ndarray, h: int, gen: np.random.Generator, max_csteps: int):
    """One FastMCD restart: random elemental start, then concentration steps."""
    n, d = X.shape
    perm = gen.permutation(n)
    size = d + 1
    loc = X[perm[:size]].mean(axis=0)
    cov = _sample_cov(X[perm[:size]])
    d2 = _mahalanobis_sq(X, loc, cov)
    while d2 is None and size < n:
        size += 1
        loc = X[perm[:size]].mean(axis=0)
        cov = _sample_cov(X[perm[:size]])
        d2 = _mahalanobis_sq(X, loc, cov)
    if d2 is None:
        return None

    support = None
    order_index = np.arange(n)
    for _ in range(max_csteps):
        new_support = np.sort(np.lexsort((order_index, d2))[:h])
        if support is not None and np.array_equal(new_support, support):
            break
        support = new_support
        loc = X[support].mean(axis=0)
        cov = _sample_cov(X[support])
        d2 = _mahalanobis_sq(X, loc, cov)
        if d2 is None:
            return None
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return None
    return logdet, loc, cov


def mcd_fit_score(X, cfg: DetectorConfig) -> np.ndarray:
    """Mahalanobis distances to a FastMCD robust mean/covariance.

    Runs ``mcd_restarts`` random elemental starts, refines each with
    concentration steps, keeps the lowest-determinant estimate, rescales it
    with the median-chi2 consistency factor and reweights at the 0.975
    quantile. With ``mcd_h == n`` there is nothing to trim and the classical
    sample mean/covariance is used as-is.
    """
    X = as_feature_matrix(X)
    n, d = X.shape
    if n <= d:
        raise DomainError(f"FastMCD needs n > d, got n={n}, d={d}")
    h_default = math.ceil((n + d + 1) / 2)
    h = cfg.mcd_h if cfg.mcd_h is not None else h_default
    if not h_default <= h <= n:
        raise DomainError(f"mcd_h must lie in [{h_default}, {n}], got {h}")

    if h == n:
        loc = X.mean(axis=0)
        cov = _sample_cov(X)
        d2 = _mahalanobis_sq(X, loc, cov)
        if d2 is None:
            raise DegenerateDataError("sample covariance is singular")
        return np.sqrt(d2)

    root = cfg.seed.derive(_STREAM_KEY[DetectorKind.ELLIPTIC_ENVELOPE])
    best = None
    for r in range(cfg.mcd_restarts):
        result = _c_step_run(X, h, root.derive(r).generator(), cfg.mcd_max_csteps)
        if result is None:
            continue
        if best is None or result[0] < best[0]:
            best = result
    if best is None:
        raise DegenerateDataError("degenerate data: covariance singular in every restart")
    _, loc, cov = best

    # consistency factor for the h-subset trimming, then one reweighting pass
    d2 = _mahalanobis_sq(X, loc, cov)
    cov = cov * (np.median(d2) / chi2.ppf(0.5, d))
    d2 = _mahalanobis_sq(X, loc, cov)
    keep = d2 <= chi2.ppf(0.975, d)
    if keep.sum() <= d:
        raise DegenerateDataError("degenerate data: reweighting kept too few samples")
    loc = X[keep].mean(axis=0)
    cov = _sample_cov(X[keep])
    cov = cov / (chi2.cdf(chi2.ppf(0.975, d), d + 2) / 0.975)
    d2 = _mahalanobis_sq(X, loc, cov)
    if d2 is None:
        raise DegenerateDataError("degenerate data: reweighted covariance is singular")
    return np.sqrt(d2)


# ---------------------------------------------------------------------------
# thresholding and fusion


def threshold_by_contamination(scores, contamination: float) -> np.ndarray:
    """Flag exactly ``floor(contamination * n)`` highest-scoring samples.

    Ties at the cutoff are resolved toward the lower sample index.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1:
        raise ShapeMismatchError("scores must be 1-D")
    if not np.isfinite(scores).all():
        raise DomainError("scores contain NaN or Inf")
    if not 0.0 <= contamination <= 0.5:
        raise DomainError(f"contamination must lie in [0, 0.5], got {contamination}")
    n = scores.shape[0]
    m = math.floor(contamination * n)
    flags = np.zeros(n, dtype=bool)
    if m > 0:
        order = np.lexsort((np.arange(n), -scores))
        flags[order[:m]] = True
    return flags


def fuse_votes(votes: Mapping[DetectorKind, Sequence],
               sample_ids: Sequence | None = None) -> list[OutlierVerdict]:
    """Fuse the five per-detector vote vectors into per-sample verdicts.

    A sample is an outlier when at least ``VOTE_THRESHOLD`` (= 3) detectors
    voted for it. Verdicts preserve the input sample order.
    """
    missing = [k for k in DetectorKind if k not in votes]
    if missing:
        raise ShapeMismatchError(f"missing votes for detectors: {[m.value for m in missing]}")
    arrays = {k: np.asarray(votes[k], dtype=bool) for k in DetectorKind}
    lengths = {a.shape for a in arrays.values()}
    if len(lengths) != 1 or any(a.ndim != 1 for a in arrays.values()):
        raise ShapeMismatchError(f"vote vectors must be 1-D with equal length, got {lengths}")
    n = next(iter(arrays.values())).shape[0]
    if sample_ids is None:
        sample_ids = list(range(n))
    elif len(sample_ids) != n:
        raise ShapeMismatchError(f"{len(sample_ids)} sample ids for {n} votes")

    counts = np.zeros(n, dtype=int)
    for a in arrays.values():
        counts += a
    verdicts = []
    for i in range(n):
        verdicts.append(OutlierVerdict(
            sample_id=sample_ids[i],
            votes={k: bool(arrays[k][i]) for k in DetectorKind},
            vote_count=int(counts[i]),
            is_outlier=bool(counts[i] >= VOTE_THRESHOLD)))
    return verdicts


@dataclasses.dataclass
class DetectionResult:
    scores: dict[DetectorKind, np.ndarray]
    votes: dict[DetectorKind, np.ndarray]
    verdicts: list[OutlierVerdict]

    @property
    def outlier_mask(self) -> np.ndarray:
        return np.array([v.is_outlier for v in self.verdicts], dtype=bool)


def thread_cap() -> int:
    """Worker cap from OUTLIER_FUSION_THREADS (0 or unset = auto)."""
    raw = os.environ.get("OUTLIER_FUSION_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"OUTLIER_FUSION_THREADS must be a non-negative integer, got {raw!r}")
    if cap < 0:
        raise ConfigError(f"OUTLIER_FUSION_THREADS must be non-negative, got {cap}")
    if cap == 0:
        return min(5, os.cpu_count() or 1)
    return min(5, cap)


def detect_outliers(X, cfg: DetectorConfig,
                    sample_ids: Sequence | None = None) -> DetectionResult:
    """Run all five detectors, threshold their scores, and fuse the votes.

    Detector fits are independent and may run on a small thread pool
    (capped by OUTLIER_FUSION_THREADS); results are merged in fixed
    detector order, so the outcome does not depend on completion order.
    """
    X = as_feature_matrix(X)
    jobs = {
        DetectorKind.IQR: lambda: iqr_detect(X),
        DetectorKind.LOF: lambda: lof_scores(X, cfg.lof_k),
        DetectorKind.OCSVM: lambda: ocsvm_fit_score(X, cfg),
        DetectorKind.ISOLATION_FOREST: lambda: iforest_scores(X, cfg),
        DetectorKind.ELLIPTIC_ENVELOPE: lambda: mcd_fit_score(X, cfg),
    }
    workers = thread_cap()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {kind: pool.submit(job) for kind, job in jobs.items()}
            raw = {kind: futures[kind].result() for kind in DetectorKind}
    else:
        raw = {kind: job() for kind, job in jobs.items()}

    scores = {kind: raw[kind] for kind in DetectorKind if kind is not DetectorKind.IQR}
    votes = {DetectorKind.IQR: raw[DetectorKind.IQR]}
    for kind, s in scores.items():
        votes[kind] = threshold_by_contamination(s, cfg.contamination)
    verdicts = fuse_votes(votes, sample_ids)
    return DetectionResult(scores=scores, votes=votes, verdicts=verdicts)


VERDICT_COLUMNS = ("sample_id", "vote_iqr", "vote_lof", "vote_ocsvm",
                   "vote_iforest", "vote_elliptic", "vote_count", "is_outlier")


def write_verdicts_csv(verdicts: Sequence[OutlierVerdict], path) -> None:
    """Verdict export with booleans as 0/1, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            writer.writerow([
                v.sample_id,
                *(int(v.votes[k]) for k in DetectorKind),
                v.vote_count,
                int(v.is_outlier),
            ])
