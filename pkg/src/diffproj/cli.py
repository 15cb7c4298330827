"""Command-line entry point.

Every subcommand reads a JSON config given by ``--config``; ``--seed``,
``--out`` and ``--epochs`` override the config. The output directory is,
in order of precedence, ``--out``, ``$DIFFPROJ_OUTPUT_DIR``, the config's
``"out"`` key, then ``./results``.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .constraints import LinearConstraintSet
from .exceptions import NumericalError
from .experiments import ExperimentSpec, build_dataset, run
from .neural import MlpModel, RmsPropState, forward, load_model, save_model, train
from .oracle import closest_point
from .projection import ProjectionConfig, project
from .synth import load_dataset, save_dataset

logger = logging.getLogger("diffproj")

OUTPUT_ENV = "DIFFPROJ_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

EXPERIMENTS = {
    "compare": "compare",
    "ablate-layers": "layer_ablation",
    "ablate-alpha": "alpha_ablation",
    "sweep-constraints": "constraint_sweep",
    "seg-demo": "seg_demo",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser():
    parser = _Parser(prog="diffproj", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "generate the synthetic constrained dataset",
        "train": "train one model",
        "eval": "evaluate a saved model on a dataset",
        "project": "project one point (or a batch) onto a constraint set",
        "compare": "DNN vs DNN+Proj vs PDNN",
        "ablate-layers": "sweep the number of projection layers",
        "ablate-alpha": "sweep the blended-loss weight",
        "sweep-constraints": "five methods across constraint counts",
        "seg-demo": "toy segmentation with image-level constraints",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--seed", type=int, help="override the seed (list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--epochs", type=int, help="override the epoch budget")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "project":
            p.add_argument("--exact", action="store_true", help="also solve the exact closest-point problem")
    return parser


def _load_config(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _out_dir(args, cfg):
    out = args.out or os.environ.get(OUTPUT_ENV) or cfg.get("out") or "results"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(cfg_path, value):
    p = Path(value)
    return p if p.is_absolute() else Path(cfg_path).parent / p


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _spec(cfg, args, kind, extra=()):
    doc = {k: v for k, v in cfg.items() if k not in extra}
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    return ExperimentSpec.from_dict(doc, kind=kind)


def _dataset(cfg, args, spec):
    if "dataset_path" in cfg:
        return load_dataset(_resolve(args.config, cfg["dataset_path"]))
    return build_dataset(spec.dataset)


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args, cfg, out):
    spec = _spec(cfg, args, "compare")
    params = spec.dataset
    if args.seed is not None:
        params = type(params)(**{**params.__dict__, "data_seed": args.seed})
    ds = build_dataset(params)
    save_dataset(ds, out / "dataset.bin")
    ds.constraints.to_json(out / "constraints.json")
    _dump(
        out / "dataset.json",
        {
            "N": ds.n_samples,
            "n": ds.inputs.shape[1],
            "m": ds.targets.shape[1],
            "seed": ds.seed,
            "draws": ds.draws,
            "n_train": int(len(ds.train_idx)),
            "n_test": int(len(ds.test_idx)),
            "dataset": params.__dict__,
        },
    )
    print(f"wrote {ds.n_samples} samples ({ds.draws} draws) to {out / 'dataset.bin'}")


def cmd_train(args, cfg, out):
    extra = ("dataset_path", "model_path")
    spec = _spec(cfg, args, "compare", extra)
    ds = _dataset(cfg, args, spec)
    seed = spec.seeds[0]
    t = spec.training
    model = MlpModel.init(
        [ds.inputs.shape[1], *t.hidden, ds.targets.shape[1]], hidden_activation=t.activation, seed=[seed, 0]
    )
    optimizer = RmsPropState([], alpha=t.learning_rate, beta=t.beta, delta=t.weight_decay, epsilon=t.optimizer_epsilon)
    model, history = train(
        model,
        ds.train,
        ds.constraints,
        spec.projection,
        spec.loss,
        spec.epochs,
        seed=[seed, 1],
        optimizer=optimizer,
        batch_size=t.batch_size,
        lr_schedule=t.lr_schedule,
        validation=ds.test,
    )
    save_model(model, out / "model.bin")
    hist = history.to_dict()
    _dump(out / "history.json", {"config": spec.to_dict(), "seed": seed, "history": hist})
    with open(out / "history.csv", "w", newline="") as fh:
        cols = ["epoch", "loss", "train_mse", "raw_violation", "output_violation", "val_mse"]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for e in range(len(hist["loss"])):
            writer.writerow([e] + [repr(hist[c][e]) for c in cols[1:]])
    print(f"final train loss {hist['loss'][-1]:.6g}, test mse {hist['val_mse'][-1]:.6g}")


def cmd_eval(args, cfg, out):
    if "model_path" not in cfg:
        raise UsageError("eval config needs a 'model_path'")
    spec = _spec(cfg, args, "compare", ("dataset_path", "model_path"))
    model = load_model(_resolve(args.config, cfg["model_path"]))
    ds = _dataset(cfg, args, spec)
    X, Y = ds.test
    raw = forward(model, X)[0]
    proj = project(ds.constraints, raw, spec.projection).iterates[-1]
    normals, offsets = ds.constraints.inequality_form

    def viol(Z):
        return float(np.mean(np.maximum(Z @ normals.T - offsets, 0.0).max(axis=1)))

    doc = {
        "n_test": int(len(Y)),
        "raw_mse": float(np.mean((raw - Y) ** 2)),
        "projected_mse": float(np.mean((proj - Y) ** 2)),
        "raw_violation": viol(raw),
        "projected_violation": viol(proj),
        "projection": spec.projection.to_dict(),
    }
    _dump(out / "eval.json", doc)
    print(json.dumps(doc, sort_keys=True))


def cmd_project(args, cfg, out):
    try:
        cs = LinearConstraintSet.from_dict(cfg["constraints"])
        point = np.asarray(cfg["point"], dtype=np.float64)
    except KeyError as exc:
        raise UsageError(f"project config needs key {exc}") from exc
    pcfg = ProjectionConfig.from_dict(cfg.get("config"))
    if args.epochs is not None:
        raise UsageError("--epochs does not apply to project")
    trace = project(cs, point, pcfg)
    doc = {
        "iterates": trace.iterates.tolist(),
        "violations": trace.violations.tolist(),
        "active_sets": [list(a) for a in trace.active_sets] if point.ndim == 1 else None,
        "config": pcfg.to_dict(),
    }
    if args.exact:
        if point.ndim != 1:
            raise UsageError("--exact supports a single point")
        sol = closest_point(cs, point)
        gap = float(np.linalg.norm(trace.iterates[-1] - sol.point))
        doc["exact"] = {
            "point": sol.point.tolist(),
            "multipliers": sol.multipliers.tolist(),
            "active_set": list(sol.active_set),
            "gap": gap,
        }
        print(f"gap |y^T - y*| = {gap:.6e}")
    _dump(out / "projection.json", doc)
    print(f"max violation {trace.violations[0]:.6g} -> {trace.violations[-1]:.6g}")


def cmd_experiment(args, cfg, out):
    spec = _spec(cfg, args, EXPERIMENTS[args.command])
    result = run(spec)
    csv_path, json_path = result.write(out)
    for entry in result.summary():
        print(json.dumps(entry, sort_keys=True))
    print(f"wrote {csv_path} and {json_path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "project": cmd_project,
    **{name: cmd_experiment for name in EXPERIMENTS},
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _load_config(args.config)
        out = _out_dir(args, cfg)
        COMMANDS[args.command](args, cfg, out)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"diffproj {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"diffproj {args.command}: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
