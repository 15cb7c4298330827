"""Exact Euclidean projection onto a small polyhedron by active-set enumeration.

This is a verification instrument: it walks every subset of inequality rows
(``O(2^M)``), so it is capped at :data:`MAX_ROWS` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import CapacityError, DimensionMismatchError, InfeasibleSystemError

__all__ = ["KktSolution", "closest_point", "kkt_residuals", "MAX_ROWS", "KKT_TOL"]

MAX_ROWS = 20
KKT_TOL = 1e-9
DUAL_TOL = 1e-12


@dataclass(frozen=True)
class KktSolution:
    point: np.ndarray
    multipliers: np.ndarray
    active_set: tuple


def kkt_residuals(cs, query, point, multipliers):
    """Worst violation of each KKT block as a dict of nonnegative floats."""
    A, b = cs.normals, cs.offsets
    res = A @ point - b
    ineq = ~cs.equality_mask
    primal = np.where(cs.equality_mask, np.abs(res), np.maximum(res, 0.0))
    return {
        "stationarity": float(np.abs(point - query + multipliers @ A).max()),
        "primal": float(primal.max(initial=0.0)),
        "dual": float(np.maximum(-multipliers[ineq], 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(multipliers * res).max(initial=0.0)),
    }


def _solve_active(A_S, b_S, query):
    """Minimizer of ``|x - q|^2`` on ``{A_S x = b_S}`` and its multipliers.

    Multipliers are the minimum-norm least-squares solution, which also
    covers rank-deficient active sets.
    """
    rhs = A_S @ query - b_S
    lam, *_ = np.linalg.lstsq(A_S @ A_S.T, rhs, rcond=None)
    return query - lam @ A_S, lam


def closest_point(cs, query, tol=KKT_TOL):
    """Solve ``min 1/2 |x - query|^2`` subject to the rows of ``cs``.

    Equality rows are kept in every candidate active set with free-sign
    multipliers. Subsets of inequality rows are tried by increasing size;
    the first size that yields a KKT point wins, and within that size the
    candidate closest to ``query`` is returned (first found on ties).
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (cs.dim,):
        raise DimensionMismatchError(f"query must have shape ({cs.dim},), got {query.shape}")
    eq_rows = np.flatnonzero(cs.equality_mask)
    ineq_rows = np.flatnonzero(~cs.equality_mask)
    if len(ineq_rows) > MAX_ROWS:
        raise CapacityError(
            f"{len(ineq_rows)} inequality rows exceed the enumeration cap of {MAX_ROWS}"
        )
    A, b = cs.normals, cs.offsets
    M = cs.n_rows

    for size in range(len(ineq_rows) + 1):
        best = None
        for subset in combinations(ineq_rows, size):
            rows = np.concatenate([eq_rows, np.array(subset, dtype=int)]).astype(int)
            lam = np.zeros(M)
            if rows.size:
                x, lam_S = _solve_active(A[rows], b[rows], query)
                lam[rows] = lam_S
            else:
                x = query.copy()
            res = A @ x - b
            if rows.size and np.abs(res[rows]).max() > tol:
                continue  # inconsistent active system
            if np.any(res[ineq_rows] > tol):
                continue
            if size and np.any(lam[list(subset)] < -DUAL_TOL):
                continue
            dist = float(np.linalg.norm(x - query))
            if best is None or dist < best[0]:
                best = (dist, x, lam, tuple(int(j) for j in sorted(rows)))
        if best is not None:
            _, x, lam, active = best
            return KktSolution(point=x, multipliers=lam, active_set=active)

    raise InfeasibleSystemError("no active set yields a KKT point; the constraint set is empty")
