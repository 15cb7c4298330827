"""Experiment runners for the synthetic comparisons, ablations and the toy
segmentation demo.

Every runner returns a :class:`RunResult` whose rows are ordered by
``(method, param, seed)``; results are written as CSV (tables) and JSON
(summaries and per-epoch traces). Wall-clock timings are logged, never
written, so outputs are byte-reproducible from the echoed config.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .constraints import Kind, LinearConstraintSet, build_random_feasible, build_segmentation_constraints
from .estimators import PolyhedralProjection, ProjectedMLPRegressor
from .neural import LR_SCHEDULES, LossSpec
from .projection import ProjectionConfig, project
from .segmentation import family_violations, make_toy_images, score_field, train_pixel_classifier
from .synth import N_OUTPUTS, generate

__all__ = [
    "DatasetParams",
    "TrainParams",
    "SegParams",
    "ExperimentSpec",
    "RunResult",
    "build_constraints",
    "build_dataset",
    "run_compare",
    "run_layer_ablation",
    "run_alpha_ablation",
    "run_constraint_sweep",
    "run_seg_demo",
    "run",
    "CSV_VERSION",
]

logger = logging.getLogger(__name__)

CSV_VERSION = 1
TRAIN_COLUMNS = (
    "csv_version",
    "experiment",
    "method",
    "param_name",
    "param_value",
    "seed",
    "test_mse",
    "raw_violation",
    "output_violation",
)
SEG_COLUMNS = (
    "csv_version",
    "experiment",
    "image",
    "n_present",
    "pre_suppression",
    "post_suppression",
    "pre_foreground",
    "post_foreground",
    "pre_background",
    "post_background",
    "pre_accuracy",
    "post_accuracy",
)
_INT_COLUMNS = {"csv_version", "seed", "image", "n_present"}
_STR_COLUMNS = {"experiment", "method", "param_name"}

DNN, DNN_PROJ, PDNN = "DNN", "DNN+Proj", "PDNN"
FIXED_PENALTY, PENALTY = "fixed penalty", "penalty"
METHOD_ORDER = (DNN, FIXED_PENALTY, PENALTY, DNN_PROJ, PDNN)

# raw-output weight of the default PDNN loss; see the README for the rationale
DEFAULT_BLEND = 0.25

KINDS = ("compare", "layer_ablation", "alpha_ablation", "constraint_sweep", "seg_demo")


# -- specs ---------------------------------------------------------------------


def _take(cls, doc, what):
    doc = dict(doc or {})
    unknown = set(doc) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**doc)


@dataclass(frozen=True)
class DatasetParams:
    n_samples: int = 10_000
    n_constraints: int = 5
    margin: float = 0.1
    constraint_seed: int = 0
    data_seed: int = 0
    test_fraction: float = 0.2
    kind: str = "inequality"

    def __post_init__(self):
        Kind(self.kind)


@dataclass(frozen=True)
class TrainParams:
    hidden: tuple = (128, 128)
    activation: str = "relu"
    learning_rate: float = 1e-3
    beta: float = 0.1
    weight_decay: float = 1e-4
    optimizer_epsilon: float = 1e-8
    batch_size: int = 32
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class SegParams:
    grid: int = 8
    n_classes: int = 4
    n_images: int = 50
    n_train_images: int = 200
    noise: float = 0.9
    hidden: int = 16
    epochs: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "compare"
    dataset: DatasetParams = field(default_factory=DatasetParams)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    loss: LossSpec = field(default_factory=lambda: LossSpec.blended(DEFAULT_BLEND))
    training: TrainParams = field(default_factory=TrainParams)
    epochs: int = 200
    seeds: tuple = (0, 1, 2, 3, 4)
    layer_values: tuple = (0, 1, 2, 3, 5, 10, 20)
    alpha_values: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    constraint_counts: tuple = (3, 4, 5, 6, 7)
    seg: SegParams = field(default_factory=SegParams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("seeds", "layer_values", "constraint_counts"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "alpha_values", tuple(float(v) for v in self.alpha_values))

    @classmethod
    def from_dict(cls, doc, kind=None):
        doc = dict(doc or {})
        known = set(cls.__dataclass_fields__) | {"out"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        doc.pop("out", None)
        if kind is not None:
            doc["kind"] = kind
        doc["dataset"] = _take(DatasetParams, doc.get("dataset"), "dataset")
        doc["training"] = _take(TrainParams, doc.get("training"), "training")
        doc["seg"] = _take(SegParams, doc.get("seg"), "seg")
        doc["projection"] = ProjectionConfig.from_dict(doc.get("projection"))
        if "loss" in doc:
            doc["loss"] = LossSpec.from_dict(doc["loss"])
        return cls(**doc)

    def to_dict(self):
        return {
            "kind": self.kind,
            "dataset": asdict(self.dataset),
            "projection": self.projection.to_dict(),
            "loss": self.loss.to_dict(),
            "training": {**asdict(self.training), "hidden": list(self.training.hidden)},
            "epochs": self.epochs,
            "seeds": list(self.seeds),
            "layer_values": list(self.layer_values),
            "alpha_values": list(self.alpha_values),
            "constraint_counts": list(self.constraint_counts),
            "seg": asdict(self.seg),
        }

    def replace(self, **changes):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return ExperimentSpec(**d)


# -- results -------------------------------------------------------------------


@dataclass
class RunResult:
    experiment: str
    rows: list
    columns: tuple = TRAIN_COLUMNS
    traces: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def summary(self):
        """Mean/std of every numeric column per ``(method, param_name, param_value)``."""
        if self.columns == SEG_COLUMNS:
            keys = [c for c in self.columns if c.startswith(("pre_", "post_"))]
            out = {"n": len(self.rows)}
            for k in keys:
                out[f"mean_{k}"] = float(np.mean([r[k] for r in self.rows]))
            return [out]
        groups = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["param_name"], r["param_value"]), []).append(r)
        out = []
        for (method, pname, pval), rows in groups.items():
            entry = {"method": method, "param_name": pname, "param_value": pval, "n": len(rows)}
            entry["seeds"] = [r["seed"] for r in rows]
            for k in ("test_mse", "raw_violation", "output_violation"):
                vals = np.array([r[k] for r in rows])
                entry[f"mean_{k}"] = float(np.mean(vals))
                entry[f"std_{k}"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out.append(entry)
        return out

    def mean(self, method, param_value=None, column="test_mse"):
        vals = [
            r[column]
            for r in self.rows
            if r["method"] == method and (param_value is None or r["param_value"] == param_value)
        ]
        if not vals:
            raise KeyError(f"no rows for method={method!r} param={param_value!r}")
        return float(np.mean(vals))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({c: repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.columns})

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            columns = tuple(reader.fieldnames)
            rows = []
            for raw in reader:
                row = {}
                for c in columns:
                    if c in _INT_COLUMNS:
                        row[c] = int(raw[c])
                    elif c in _STR_COLUMNS:
                        row[c] = raw[c]
                    else:
                        row[c] = float(raw[c])
                rows.append(row)
        if columns not in (TRAIN_COLUMNS, SEG_COLUMNS):
            raise ValueError(f"{path}: unrecognized column layout {columns}")
        experiment = rows[0]["experiment"] if rows else Path(path).stem
        return cls(experiment=experiment, rows=rows, columns=columns)

    def to_json_dict(self):
        return {
            "experiment": self.experiment,
            "csv_version": CSV_VERSION,
            "config": self.config,
            "summary": self.summary(),
            "checks": self.checks,
            "rows": self.rows,
            "traces": self.traces,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.experiment}.csv"
        json_path = out_dir / f"{self.experiment}.json"
        self.to_csv(csv_path)
        json_path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


@contextmanager
def _timed(timings, phase):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[phase] = timings.get(phase, 0.0) + time.perf_counter() - start


def _sort_rows(rows):
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(rows, key=lambda r: (order.get(r["method"], 99), r["method"], r["param_value"], r["seed"]))


# -- building blocks -----------------------------------------------------------


def build_constraints(params, n_constraints=None):
    M = params.n_constraints if n_constraints is None else n_constraints
    if params.kind == Kind.EQUALITY.value:
        return build_random_feasible(N_OUTPUTS, M, params.constraint_seed, margin=0.0, kind="equality")[0]
    return build_random_feasible(N_OUTPUTS, M, params.constraint_seed, params.margin)[0]


def build_dataset(params, n_constraints=None):
    cs = build_constraints(params, n_constraints)
    return generate(params.n_samples, cs, params.data_seed, test_fraction=params.test_fraction)


def _regressor(spec, cs, seed, layers, loss):
    t = spec.training
    return ProjectedMLPRegressor(
        constraints=cs,
        hidden_layer_sizes=t.hidden,
        activation=t.activation,
        layers=layers,
        lam=spec.projection.lam,
        epsilon=spec.projection.epsilon,
        weight_mode=spec.projection.weight_mode.value,
        loss=loss.variant.value,
        blend_alpha=loss.alpha,
        penalty_c=loss.c,
        learning_rate=t.learning_rate,
        beta=t.beta,
        weight_decay=t.weight_decay,
        optimizer_epsilon=t.optimizer_epsilon,
        batch_size=t.batch_size,
        epochs=spec.epochs,
        random_state=seed,
        lr_schedule=t.lr_schedule,
    )


def _violation(cs, Y):
    normals, offsets = cs.inequality_form
    return float(np.mean(np.maximum(Y @ normals.T - offsets, 0.0).max(axis=1)))


def _row(experiment, method, pname, pval, seed, cs, Y_test, raw, out):
    return {
        "csv_version": CSV_VERSION,
        "experiment": experiment,
        "method": method,
        "param_name": pname,
        "param_value": float(pval),
        "seed": int(seed),
        "test_mse": float(np.mean((out - Y_test) ** 2)),
        "raw_violation": _violation(cs, raw),
        "output_violation": _violation(cs, out),
    }


def _fit(spec, ds, seed, layers, loss, timings, phase):
    X_tr, Y_tr = ds.train
    est = _regressor(spec, ds.constraints, seed, layers, loss)
    with _timed(timings, phase):
        est.fit(X_tr, Y_tr, validation=ds.test)
    return est


def _trace_key(method, pname, pval, seed):
    return f"{method}|{pname}={pval:g}|seed={seed}"


# -- runners -------------------------------------------------------------------


def run_compare(spec):
    """DNN, DNN with post-hoc projection, and projection-in-the-loop PDNN."""
    timings, rows, traces = {}, [], {}
    with _timed(timings, "data"):
        ds = build_dataset(spec.dataset)
    cs = ds.constraints
    X_te, Y_te = ds.test
    post = PolyhedralProjection(
        cs,
        lam=spec.projection.lam,
        layers=spec.projection.layers,
        epsilon=spec.projection.epsilon,
        weight_mode=spec.projection.weight_mode.value,
        step_rule=spec.projection.step_rule.value,
    ).fit(Y_te)
    pointwise = True
    for seed in spec.seeds:
        dnn = _fit(spec, ds, seed, 0, LossSpec(), timings, "train_dnn")
        raw = dnn.predict_raw(X_te)
        with _timed(timings, "project"):
            projected = post.transform(raw)
        pdnn = _fit(spec, ds, seed, spec.projection.layers, spec.loss, timings, "train_pdnn")
        p_raw, p_out = pdnn.predict_raw(X_te), pdnn.predict(X_te)

        rows.append(_row("compare", DNN, "T", 0, seed, cs, Y_te, raw, raw))
        rows.append(_row("compare", DNN_PROJ, "T", spec.projection.layers, seed, cs, Y_te, raw, projected))
        rows.append(_row("compare", PDNN, "T", spec.projection.layers, seed, cs, Y_te, p_raw, p_out))
        err_raw = np.linalg.norm(raw - Y_te, axis=1)
        err_proj = np.linalg.norm(projected - Y_te, axis=1)
        pointwise &= bool(np.all(err_proj <= err_raw + 1e-12))
        traces[_trace_key(DNN, "T", 0, seed)] = dnn.history_.to_dict()
        traces[_trace_key(PDNN, "T", spec.projection.layers, seed)] = pdnn.history_.to_dict()
    checks = {"dnn_proj_pointwise_not_worse": pointwise}
    return _finish("compare", spec, rows, traces, checks, timings)


def run_layer_ablation(spec):
    """PDNN test MSE as the number of projection layers varies."""
    timings, rows, traces = {}, [], {}
    with _timed(timings, "data"):
        ds = build_dataset(spec.dataset)
    cs = ds.constraints
    X_te, Y_te = ds.test
    for T in spec.layer_values:
        for seed in spec.seeds:
            loss = LossSpec() if T == 0 else spec.loss
            est = _fit(spec, ds, seed, T, loss, timings, f"train_T{T}")
            method = DNN if T == 0 else PDNN
            rows.append(_row("layer_ablation", method, "T", T, seed, cs, Y_te, est.predict_raw(X_te), est.predict(X_te)))
            traces[_trace_key(method, "T", T, seed)] = est.history_.to_dict()
    return _finish("layer_ablation", spec, rows, traces, {}, timings)


def run_alpha_ablation(spec):
    """PDNN with the blended loss ``(1 - alpha) mse(projected) + alpha mse(raw)``."""
    timings, rows, traces = {}, [], {}
    with _timed(timings, "data"):
        ds = build_dataset(spec.dataset)
    cs = ds.constraints
    X_te, Y_te = ds.test
    for alpha in spec.alpha_values:
        for seed in spec.seeds:
            est = _fit(spec, ds, seed, spec.projection.layers, LossSpec.blended(alpha), timings, f"train_a{alpha:g}")
            rows.append(_row("alpha_ablation", PDNN, "alpha", alpha, seed, cs, Y_te, est.predict_raw(X_te), est.predict(X_te)))
            traces[_trace_key(PDNN, "alpha", alpha, seed)] = est.history_.to_dict()
    return _finish("alpha_ablation", spec, rows, traces, {}, timings)


def run_constraint_sweep(spec):
    """Five methods across ``M x 8`` constraint shapes."""
    timings, rows, traces = {}, [], {}
    T = spec.projection.layers
    for M in spec.constraint_counts:
        with _timed(timings, "data"):
            ds = build_dataset(spec.dataset, n_constraints=M)
        cs = ds.constraints
        X_te, Y_te = ds.test
        post = PolyhedralProjection(cs, lam=spec.projection.lam, layers=T, epsilon=spec.projection.epsilon,
                                    weight_mode=spec.projection.weight_mode.value).fit(Y_te)
        for seed in spec.seeds:
            fits = {
                DNN: _fit(spec, ds, seed, 0, LossSpec(), timings, "train_dnn"),
                FIXED_PENALTY: _fit(spec, ds, seed, 0, LossSpec.fixed_penalty(spec.loss.c), timings, "train_fixed"),
                PENALTY: _fit(spec, ds, seed, 0, LossSpec.residual_penalty(), timings, "train_penalty"),
                PDNN: _fit(spec, ds, seed, T, spec.loss, timings, "train_pdnn"),
            }
            for method, est in fits.items():
                raw = est.predict_raw(X_te)
                rows.append(_row("constraint_sweep", method, "M", M, seed, cs, Y_te, raw, est.predict(X_te)))
                traces[_trace_key(method, "M", M, seed)] = est.history_.to_dict()
                if method == DNN:
                    rows.append(_row("constraint_sweep", DNN_PROJ, "M", M, seed, cs, Y_te, raw, post.transform(raw)))
    return _finish("constraint_sweep", spec, rows, traces, {}, timings)


def run_seg_demo(spec):
    """Project toy per-pixel class scores onto image-level label constraints."""
    sp = spec.seg
    timings = {}
    with _timed(timings, "train_classifier"):
        train_images = make_toy_images(sp.n_train_images, sp.grid, sp.n_classes, sp.noise, seed=[sp.seed, 0])
        model = train_pixel_classifier(train_images, sp.n_classes, sp.hidden, sp.epochs, seed=sp.seed)
    images = make_toy_images(sp.n_images, sp.grid, sp.n_classes, sp.noise, seed=[sp.seed, 1])
    rows, per_image = [], []
    with _timed(timings, "project"):
        for k, image in enumerate(images):
            cs = build_segmentation_constraints(image.n_pixels, sp.n_classes, image.present)
            p = score_field(model, image)
            q = project(cs, p, spec.projection).iterates[-1]
            pre, post = family_violations(cs, p), family_violations(cs, q)
            acc_pre = float(np.mean(p.reshape(-1, sp.n_classes).argmax(1) == image.labels))
            acc_post = float(np.mean(q.reshape(-1, sp.n_classes).argmax(1) == image.labels))
            row = {"csv_version": CSV_VERSION, "experiment": "seg_demo", "image": k, "n_present": len(image.present)}
            for fam in pre:
                row[f"pre_{fam}"] = pre[fam]
                row[f"post_{fam}"] = post[fam]
            row["pre_accuracy"], row["post_accuracy"] = acc_pre, acc_post
            rows.append(row)
            per_image.append({"present": list(image.present), "rows": list(cs.labels)})
    checks = {
        "suppression_not_increased": all(r["post_suppression"] <= r["pre_suppression"] for r in rows),
        "suppression_strictly_lower_when_violated": all(
            r["post_suppression"] < r["pre_suppression"] for r in rows if r["pre_suppression"] > 1e-6
        ),
    }
    result = _finish("seg_demo", spec, rows, {"images": per_image}, checks, timings, sort=False)
    result.columns = SEG_COLUMNS
    return result


def _finish(name, spec, rows, traces, checks, timings, sort=True):
    for phase, seconds in sorted(timings.items()):
        logger.info("%s: %s took %.2fs", name, phase, seconds)
    return RunResult(
        experiment=name,
        rows=_sort_rows(rows) if sort else rows,
        traces=traces,
        config=spec.to_dict(),
        checks=checks,
        timings=timings,
    )


_RUNNERS = {
    "compare": run_compare,
    "layer_ablation": run_layer_ablation,
    "alpha_ablation": run_alpha_ablation,
    "constraint_sweep": run_constraint_sweep,
    "seg_demo": run_seg_demo,
}


def run(spec):
    return _RUNNERS[spec.kind](spec)
