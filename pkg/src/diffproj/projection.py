"""Differentiable projection onto linear constraint sets.

Two routes:

* :func:`project_equality` is the closed-form orthogonal projection onto an
  affine set ``{y : A y = b}`` with full-row-rank ``A``.
* :func:`project` stacks relaxed projection steps onto the surrogate
  hyperplane ``pi^T (A y - b) = 0`` that aggregates the currently violated
  rows. Each step is piecewise linear in ``y``; :func:`project_vjp` gives the
  exact vector-Jacobian product of the active piece.

All functions accept a single point ``(m,)`` or a batch ``(B, m)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .constraints import LinearConstraintSet, WeightMode, weights_from_residuals
from .exceptions import DimensionMismatchError, InfeasibleSystemError, RankDeficientError

__all__ = [
    "StepRule",
    "ProjectionConfig",
    "ProjectionTrace",
    "project_equality",
    "project_step",
    "project",
    "project_vjp",
    "RANK_RTOL",
]

RANK_RTOL = 1e-10


class StepRule(str, enum.Enum):
    """``surrogate``: one relaxed projection onto the aggregated hyperplane.
    ``sum``: weighted sum of per-row relaxed projections."""

    SURROGATE = "surrogate"
    SUM = "sum"


@dataclass(frozen=True)
class ProjectionConfig:
    lam: float = 1.0
    layers: int = 3
    epsilon: float = 1e-8
    weight_mode: WeightMode = WeightMode.ONE_OVER_M
    step_rule: StepRule = StepRule.SURROGATE

    def __post_init__(self):
        if not 0.0 < self.lam < 2.0:
            raise ValueError(f"relaxation lam must lie in (0, 2), got {self.lam}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.layers) != self.layers or self.layers < 0:
            raise ValueError(f"layers must be a nonnegative integer, got {self.layers}")
        object.__setattr__(self, "layers", int(self.layers))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ProjectionConfig(**fields)

    def to_dict(self):
        return {
            "lambda": self.lam,
            "layers": self.layers,
            "epsilon": self.epsilon,
            "weight_mode": self.weight_mode.value,
            "step_rule": self.step_rule.value,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        allowed = set(cls.__dataclass_fields__)
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown projection config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class ProjectionTrace:
    """Iterates ``y^0 .. y^T`` of a projection stack.

    ``iterates`` has shape ``(T + 1, m)`` or ``(T + 1, B, m)``;
    ``violations`` holds the max violation of each iterate and ``active``
    the boolean violated-row mask (rows of the inequality form).
    ``steps_taken`` counts the steps actually computed before every point
    became feasible; later iterates repeat the fixed point.
    """

    iterates: np.ndarray
    violations: np.ndarray
    active: np.ndarray
    steps_taken: int

    @property
    def layers(self):
        return self.iterates.shape[0] - 1

    @property
    def output(self):
        return self.iterates[-1]

    @property
    def active_sets(self):
        if self.active.ndim != 2:
            raise ValueError("active_sets is only defined for single-point traces")
        return [tuple(int(j) for j in np.flatnonzero(row)) for row in self.active]


def _as_points(cs, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2) or y.shape[-1] != cs.dim:
        raise DimensionMismatchError(
            f"expected points of dimension {cs.dim}, got array of shape {y.shape}"
        )
    return y


def project_equality(cs, y):
    """Closest point of ``{y : A y = b}`` to ``y`` (``A`` full row rank)."""
    if not isinstance(cs, LinearConstraintSet):
        raise TypeError("cs must be a LinearConstraintSet")
    if not cs.is_equality_only:
        raise ValueError("project_equality needs a constraint set of equality rows only")
    y = _as_points(cs, y)
    A, b = cs.normals, cs.offsets
    M, m = A.shape
    if M > m:
        raise InfeasibleSystemError(
            f"{M} equality rows in dimension {m}: the system is overdetermined"
        )
    sv = np.linalg.svd(A, compute_uv=False)
    tol = RANK_RTOL * sv[0]
    if sv[-1] <= tol:
        raise RankDeficientError(
            f"equality normals are rank deficient (smallest singular value {sv[-1]:.3e} "
            f"<= tolerance {tol:.3e} = {RANK_RTOL:g} * largest)",
            tolerance=tol,
        )
    # y - A^T (A A^T)^{-1} (A y - b) via A^T = QR, which avoids squaring cond(A)
    Q, R = np.linalg.qr(A.T)
    c = np.linalg.solve(R.T, b)
    return y - (y @ Q - c) @ Q.T


def _step(normals, offsets, row_norm2, Y, cfg):
    """One projection step on a batch ``Y`` of shape ``(B, m)``.

    Returns ``(Y_next, active_mask, direction, scale)`` where the step's
    Jacobian is ``I - scale * direction direction^T`` (surrogate rule).
    """
    res = Y @ normals.T - offsets
    pi = weights_from_residuals(res, cfg.weight_mode)
    active = res > 0
    if cfg.step_rule is StepRule.SURROGATE:
        u = pi @ normals
        gap = np.einsum("bj,bj->b", pi, res)
        scale = cfg.lam / (np.einsum("bi,bi->b", u, u) + cfg.epsilon)
        Y_next = Y - (scale * gap)[:, None] * u
        return Y_next, active, u, scale
    coef = pi * res / row_norm2
    Y_next = Y - cfg.lam * (coef @ normals)
    return Y_next, active, pi, None


def project_step(cs, y, cfg=None):
    """One relaxed surrogate-hyperplane projection; feasible points are fixed."""
    cfg = cfg or ProjectionConfig()
    y = _as_points(cs, y)
    normals, offsets = cs.inequality_form
    Y = np.atleast_2d(y)
    out = _step(normals, offsets, np.einsum("ji,ji->j", normals, normals), Y, cfg)[0]
    return out[0] if y.ndim == 1 else out


def project(cs, y, cfg=None):
    """Apply ``cfg.layers`` projection steps and record every iterate."""
    cfg = cfg or ProjectionConfig()
    y = _as_points(cs, y)
    normals, offsets = cs.inequality_form
    row_norm2 = np.einsum("ji,ji->j", normals, normals)
    Y = np.atleast_2d(y)
    T = cfg.layers

    iterates = np.empty((T + 1,) + Y.shape)
    active = np.zeros((T + 1, Y.shape[0], normals.shape[0]), dtype=bool)
    iterates[0] = Y
    steps = 0
    for t in range(T):
        Y_next, act, _, _ = _step(normals, offsets, row_norm2, iterates[t], cfg)
        active[t] = act
        if not act.any():
            # every point is feasible: the remaining iterates are the fixed point
            iterates[t + 1 :] = iterates[t]
            break
        iterates[t + 1] = Y_next
        steps += 1
    else:
        active[T] = (iterates[T] @ normals.T - offsets) > 0
    violations = np.maximum(iterates @ normals.T - offsets, 0.0).max(axis=-1)

    if y.ndim == 1:
        iterates, active, violations = iterates[:, 0], active[:, 0], violations[:, 0]
    return ProjectionTrace(iterates=iterates, violations=violations, active=active, steps_taken=steps)


def project_vjp(cs, trace, cfg, cotangent):
    """Pull ``cotangent`` (w.r.t. the last iterate) back to the first iterate.

    The surrogate weights are held at their values along ``trace``, so each
    step contributes the symmetric Jacobian ``I - c_t u_t u_t^T`` with
    ``u_t = A^T pi_t`` and ``c_t = lam / (|u_t|^2 + eps)``.
    """
    cfg = cfg or ProjectionConfig()
    iterates = np.asarray(trace.iterates)
    if iterates.shape[0] != cfg.layers + 1:
        raise ValueError(
            f"trace has {iterates.shape[0] - 1} steps but config has {cfg.layers} layers"
        )
    if iterates.shape[-1] != cs.dim:
        raise DimensionMismatchError("trace dimension does not match the constraint set")
    g = np.array(cotangent, dtype=np.float64)
    if g.shape != iterates.shape[1:]:
        raise DimensionMismatchError(
            f"cotangent shape {g.shape} does not match iterate shape {iterates.shape[1:]}"
        )
    single = g.ndim == 1
    G = np.atleast_2d(g)
    normals, offsets = cs.inequality_form
    row_norm2 = np.einsum("ji,ji->j", normals, normals)
    for t in range(trace.steps_taken - 1, -1, -1):
        Y = np.atleast_2d(iterates[t])
        res = Y @ normals.T - offsets
        pi = weights_from_residuals(res, cfg.weight_mode)
        if cfg.step_rule is StepRule.SURROGATE:
            u = pi @ normals
            scale = cfg.lam / (np.einsum("bi,bi->b", u, u) + cfg.epsilon)
            G = G - (scale * np.einsum("bi,bi->b", u, G))[:, None] * u
        else:
            coef = pi * (G @ normals.T) / row_norm2
            G = G - cfg.lam * (coef @ normals)
    return G[0] if single else G
