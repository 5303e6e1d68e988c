"""Generalized max-pooling over an activation volume.

A ``(d, h, w)`` volume is read as n = h*w local depth-d embeddings (the
columns of Phi). Pooling solves ``(K + lambda*I) alpha = 1`` with
``K = Phi' Phi`` and returns the descriptor ``xi = Phi alpha``. At
``lambda = 0`` every embedding contributes equally (``<phi_i, xi> = 1``);
as ``lambda -> inf`` the descriptor degrades to ``(1/lambda) * sum phi_i``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DomainError, NotPositiveDefiniteError, ShapeMismatchError, SingularGramError
from .numeric import solve_spd


@dataclasses.dataclass
class DgmpSolution:
    """Pooling weights alpha, descriptor xi, regularizer and Gram matrix."""

    alpha: np.ndarray   # (n,)
    xi: np.ndarray      # (d,)
    lam: float
    gram: np.ndarray    # (n, n)


def volume_to_embeddings(vol) -> np.ndarray:
    """View a ``(d, h, w)`` volume as the ``(d, n)`` embedding matrix Phi."""
    vol = np.asarray(vol, dtype=float)
    if vol.ndim != 3:
        raise ShapeMismatchError(f"activation volume must be (d, h, w), got {vol.shape}")
    if min(vol.shape) < 1:
        raise ShapeMismatchError(f"activation volume has empty axis: {vol.shape}")
    if not np.isfinite(vol).all():
        raise DomainError("activation volume contains NaN or Inf")
    return vol.reshape(vol.shape[0], -1)


def dgmp_forward(vol, lam: float) -> DgmpSolution:
    """Solve the pooling system for one volume."""
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    phi = volume_to_embeddings(vol)
    n = phi.shape[1]
    gram = phi.T @ phi
    try:
        alpha = solve_spd(gram + lam * np.eye(n), np.ones(n))
    except NotPositiveDefiniteError as exc:
        raise SingularGramError(
            "singular Gram matrix at lambda=0; use a positive lambda") from exc
    return DgmpSolution(alpha=alpha, xi=phi @ alpha, lam=lam, gram=gram)


def dgmp_backward(vol, lam: float, upstream_grad) -> np.ndarray:
    """Gradient of ``<upstream_grad, xi>`` with respect to every volume entry.

    Implicit differentiation of ``(K + lambda I) alpha = 1``: with
    ``beta = (K + lambda I)^-1 Phi' u`` the gradient w.r.t. Phi is
    ``u alpha' - xi beta' - (Phi beta) alpha'``.
    """
    vol = np.asarray(vol, dtype=float)
    u = np.asarray(upstream_grad, dtype=float)
    sol = dgmp_forward(vol, lam)
    phi = volume_to_embeddings(vol)
    if u.shape != (phi.shape[0],):
        raise ShapeMismatchError(
            f"upstream gradient must have shape ({phi.shape[0]},), got {u.shape}")
    return _dgmp_phi_grad(phi, sol, u).reshape(vol.shape)


def _dgmp_phi_grad(phi: np.ndarray, sol: DgmpSolution, u: np.ndarray) -> np.ndarray:
    n = phi.shape[1]
    beta = solve_spd(sol.gram + sol.lam * np.eye(n), phi.T @ u)
    return (np.outer(u, sol.alpha)
            - np.outer(sol.xi, beta)
            - np.outer(phi @ beta, sol.alpha))
