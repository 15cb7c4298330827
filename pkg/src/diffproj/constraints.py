"""Linear constraint systems ``a_j^T y <= b_j`` (optionally ``= b_j``).

A :class:`LinearConstraintSet` stores one normal per row, so ``normals`` has
shape ``(M, m)`` and ``normals @ y - offsets`` is the residual vector.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import DimensionMismatchError

__all__ = [
    "Kind",
    "WeightMode",
    "LinearConstraintSet",
    "ViolationReport",
    "evaluate",
    "residuals",
    "surrogate_weights",
    "weights_from_residuals",
    "build_random_feasible",
    "build_segmentation_constraints",
    "SEGMENTATION_FAMILIES",
]


class Kind(str, enum.Enum):
    INEQUALITY = "inequality"
    EQUALITY = "equality"


class WeightMode(str, enum.Enum):
    """How violated rows are weighted when aggregated into one hyperplane."""

    ONE_OVER_M = "one_over_m"
    ONE_OVER_VIOLATED = "one_over_violated"


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LinearConstraintSet:
    normals: np.ndarray
    offsets: np.ndarray
    kinds: tuple = None
    anchor: np.ndarray | None = None
    labels: tuple = field(default=None, repr=False)

    def __post_init__(self):
        normals = _frozen(self.normals)
        if normals.ndim == 1:
            normals = _frozen(normals[None, :])
        if normals.ndim != 2 or normals.shape[0] == 0 or normals.shape[1] == 0:
            raise ValueError(f"normals must be a non-empty (M, m) matrix, got shape {normals.shape}")
        offsets = _frozen(np.atleast_1d(self.offsets))
        if offsets.shape != (normals.shape[0],):
            raise ValueError(
                f"offsets length {offsets.shape} does not match {normals.shape[0]} rows"
            )
        if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(offsets))):
            raise ValueError("constraint coefficients must be finite")
        if np.any(np.linalg.norm(normals, axis=1) == 0.0):
            raise ValueError("every constraint normal must be nonzero")

        kinds = self.kinds
        if kinds is None:
            kinds = (Kind.INEQUALITY,) * normals.shape[0]
        kinds = tuple(Kind(k) for k in kinds)
        if len(kinds) != normals.shape[0]:
            raise ValueError("kinds must have one entry per row")

        labels = self.labels
        if labels is not None:
            labels = tuple(str(s) for s in labels)
            if len(labels) != normals.shape[0]:
                raise ValueError("labels must have one entry per row")

        anchor = self.anchor
        if anchor is not None:
            anchor = _frozen(anchor)
            if anchor.shape != (normals.shape[1],):
                raise DimensionMismatchError("anchor dimension does not match constraint dimension")

        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "anchor", anchor)

    @property
    def dim(self):
        """Dimension ``m`` of the constrained variable."""
        return self.normals.shape[1]

    @property
    def n_rows(self):
        return self.normals.shape[0]

    @cached_property
    def equality_mask(self):
        mask = np.array([k is Kind.EQUALITY for k in self.kinds], dtype=bool)
        mask.setflags(write=False)
        return mask

    @property
    def has_equalities(self):
        return bool(self.equality_mask.any())

    @property
    def is_equality_only(self):
        return bool(self.equality_mask.all())

    @cached_property
    def inequality_form(self):
        """``(normals, offsets)`` with every equality row split into two inequalities."""
        eq = self.equality_mask
        if not eq.any():
            return self.normals, self.offsets
        normals = np.vstack([self.normals, -self.normals[eq]])
        offsets = np.concatenate([self.offsets, -self.offsets[eq]])
        normals.setflags(write=False)
        offsets.setflags(write=False)
        return normals, offsets

    def as_inequalities(self):
        normals, offsets = self.inequality_form
        return LinearConstraintSet(normals, offsets)

    def subset(self, rows):
        rows = list(rows)
        return LinearConstraintSet(
            self.normals[rows],
            self.offsets[rows],
            tuple(self.kinds[j] for j in rows),
            labels=None if self.labels is None else tuple(self.labels[j] for j in rows),
        )

    def __eq__(self, other):
        if not isinstance(other, LinearConstraintSet):
            return NotImplemented
        return (
            self.kinds == other.kinds
            and np.array_equal(self.normals, other.normals)
            and np.array_equal(self.offsets, other.offsets)
        )

    __hash__ = None

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        doc = {
            "m": self.dim,
            "M": self.n_rows,
            "rows": [
                {"a": [float(v) for v in a], "b": float(b), "kind": k.value}
                for a, b, k in zip(self.normals, self.offsets, self.kinds)
            ],
        }
        if self.labels is not None:
            for row, label in zip(doc["rows"], self.labels):
                row["label"] = label
        if self.anchor is not None:
            doc["anchor"] = [float(v) for v in self.anchor]
        return doc

    @classmethod
    def from_dict(cls, doc):
        rows = doc["rows"]
        if not rows:
            raise ValueError("constraint document has no rows")
        if "M" in doc and doc["M"] != len(rows):
            raise ValueError(f"M={doc['M']} but {len(rows)} rows given")
        normals = np.array([r["a"] for r in rows], dtype=np.float64)
        if "m" in doc and normals.shape[1] != doc["m"]:
            raise DimensionMismatchError(f"m={doc['m']} but rows have {normals.shape[1]} entries")
        labels = None
        if all("label" in r for r in rows):
            labels = tuple(r["label"] for r in rows)
        return cls(
            normals,
            np.array([r["b"] for r in rows], dtype=np.float64),
            tuple(r.get("kind", "inequality") for r in rows),
            anchor=doc.get("anchor"),
            labels=labels,
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), allow_nan=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        if isinstance(text_or_path, Path) or not str(text_or_path).lstrip().startswith("{"):
            text_or_path = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text_or_path))


@dataclass(frozen=True)
class ViolationReport:
    residuals: np.ndarray
    violated: tuple
    max_violation: float
    sum_violation: float

    @property
    def n_rows(self):
        return self.residuals.shape[0]

    @property
    def feasible(self):
        return not self.violated


def _check_point(cs, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != (cs.dim,):
        raise DimensionMismatchError(
            f"point has dimension {y.shape[-1] if y.ndim else 0}, constraints expect {cs.dim}"
        )
    return y


def residuals(cs, y):
    """``a_j^T y - b_j`` for a point ``(m,)`` or a batch ``(B, m)``."""
    y = _check_point(cs, y)
    return y @ cs.normals.T - cs.offsets


def evaluate(cs, y):
    """Residuals and violated rows of ``cs`` at a single point ``y``."""
    y = _check_point(cs, y)
    if y.ndim != 1:
        raise DimensionMismatchError("evaluate expects a single point; use residuals() for batches")
    res = residuals(cs, y)
    viol = np.where(cs.equality_mask, np.abs(res), res)
    # boundary (residual exactly 0) is satisfied
    violated = tuple(int(j) for j in np.flatnonzero(viol > 0))
    pos = np.maximum(viol, 0.0)
    return ViolationReport(
        residuals=res,
        violated=violated,
        max_violation=float(pos.max(initial=0.0)),
        sum_violation=float(pos.sum()),
    )


def weights_from_residuals(res, mode=WeightMode.ONE_OVER_M):
    """Surrogate weights for a residual array ``(..., M)``.

    The subgradient of ``max(l, 0)`` at ``l = 0`` is taken as 0.
    """
    mode = WeightMode(mode)
    res = np.asarray(res, dtype=np.float64)
    active = (res > 0).astype(np.float64)
    if mode is WeightMode.ONE_OVER_M:
        return active / res.shape[-1]
    count = active.sum(axis=-1, keepdims=True)
    return np.divide(active, count, out=np.zeros_like(active), where=count > 0)


def surrogate_weights(report, mode=WeightMode.ONE_OVER_M):
    """Weights over the rows of ``report``; zero outside the violated set."""
    mask = np.zeros(report.n_rows)
    mask[list(report.violated)] = 1.0
    return weights_from_residuals(mask, mode)


def build_random_feasible(m, M, seed=None, margin=0.1, kind=Kind.INEQUALITY):
    """Random unit-normal halfspaces that all contain a Gaussian anchor point.

    Returns ``(constraints, anchor)`` with ``b_j = a_j^T anchor + margin``.
    With ``kind="equality"`` the rows are hyperplanes through the anchor and
    ``margin`` must be 0.
    """
    kind = Kind(kind)
    if kind is Kind.EQUALITY and margin != 0:
        raise ValueError("equality constraints through the anchor need margin=0")
    if m < 1 or M < 1:
        raise ValueError("need m >= 1 and M >= 1")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((M, m))
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    # a zero Gaussian row has probability 0; redraw defensively
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        normals[bad] = rng.standard_normal((int(bad.sum()), m))
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / norms
    anchor = rng.standard_normal(m)
    offsets = normals @ anchor + margin
    cs = LinearConstraintSet(normals, offsets, (kind,) * M, anchor=anchor)
    return cs, cs.anchor


SEGMENTATION_FAMILIES = ("suppression", "foreground", "background")


def build_segmentation_constraints(n_pixels, n_classes, present_labels):
    """Image-level label constraints on a flattened per-pixel score field.

    The variable is ``p`` of length ``n_pixels * n_classes`` laid out
    pixel-major (``p[i * n_classes + l]`` is the score of class ``l`` at pixel
    ``i``); class 0 is background. Rows, in order: one suppression row per
    absent class, one foreground row per present class (at least 5% of the
    pixels), then the background lower and upper bounds (30% / 70%).
    """
    if n_pixels < 1 or n_classes < 2:
        raise ValueError("need n_pixels >= 1 and n_classes >= 2")
    present = sorted({int(l) for l in present_labels})
    for label in present:
        if label == 0:
            raise ValueError("present_labels must not contain the background class 0")
        if not 0 < label < n_classes:
            raise ValueError(f"label {label} is outside 1..{n_classes - 1}")
    absent = [l for l in range(1, n_classes) if l not in present]

    m = n_pixels * n_classes

    def class_sum(label):
        row = np.zeros(m)
        row[label::n_classes] = 1.0
        return row

    rows, offsets, labels = [], [], []
    for label in absent:
        rows.append(class_sum(label))
        offsets.append(0.0)
        labels.append(f"suppression:{label}")
    for label in present:
        rows.append(0.0 - class_sum(label))
        offsets.append(-0.05 * n_pixels)
        labels.append(f"foreground:{label}")
    rows.append(0.0 - class_sum(0))
    offsets.append(-0.3 * n_pixels)
    labels.append("background:lower")
    rows.append(class_sum(0))
    offsets.append(0.7 * n_pixels)
    labels.append("background:upper")
    return LinearConstraintSet(np.array(rows), np.array(offsets), labels=tuple(labels))
