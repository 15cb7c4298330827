"""Synthetic constrained regression data.

Inputs are standard Gaussian in 64 dimensions. Targets come from a fixed
random two-layer tanh network (64 -> 32 -> 8), shifted by the constraint
set's anchor, and only pairs whose target satisfies every constraint are
kept. Equality rows cannot be hit by rejection sampling, so targets are
first projected onto the affine set they define.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._container import read_container, write_container
from .constraints import LinearConstraintSet, residuals
from .exceptions import DimensionMismatchError, GeneratorError
from .projection import project_equality

__all__ = ["SyntheticDataset", "generate", "target_map", "save_dataset", "load_dataset"]

N_INPUTS = 64
N_HIDDEN = 32
N_OUTPUTS = 8
DRAW_BUDGET = 1_000_000
CHUNK = 4096
MAP_SEED = 20_000_905
EQUALITY_TOL = 1e-9


def target_map(map_seed=MAP_SEED):
    """The fixed random nonlinear map ``x -> tanh(x W1) W2``, weights ``N(0, 1/fan_in)``."""
    rng = np.random.default_rng(map_seed)
    w1 = rng.standard_normal((N_INPUTS, N_HIDDEN)) / np.sqrt(N_INPUTS)
    w2 = rng.standard_normal((N_HIDDEN, N_OUTPUTS)) / np.sqrt(N_HIDDEN)

    def f(x):
        return np.tanh(x @ w1) @ w2

    return f


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    inputs: np.ndarray
    targets: np.ndarray
    constraints: LinearConstraintSet
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    map_seed: int = MAP_SEED
    draws: int = 0

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    @property
    def train(self):
        return self.inputs[self.train_idx], self.targets[self.train_idx]

    @property
    def test(self):
        return self.inputs[self.test_idx], self.targets[self.test_idx]

    @property
    def acceptance_rate(self):
        return self.n_samples / self.draws if self.draws else float("nan")


def generate(n_samples, cs, seed, test_fraction=0.2, map_seed=MAP_SEED, budget=DRAW_BUDGET):
    """Rejection-sample ``n_samples`` pairs whose targets satisfy ``cs``.

    Raises :class:`GeneratorError` if the draw budget runs out first.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples for a train/test split")
    if cs.dim != N_OUTPUTS:
        raise DimensionMismatchError(f"constraints must act on {N_OUTPUTS}-d targets, got m={cs.dim}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    shift = cs.anchor if cs.anchor is not None else np.zeros(N_OUTPUTS)
    f = target_map(map_seed)
    rng = np.random.default_rng(seed)
    eq = cs.equality_mask
    eq_set = cs.subset(np.flatnonzero(eq)) if eq.any() else None

    xs, ys = [], []
    accepted = draws = 0
    while accepted < n_samples:
        if draws >= budget:
            raise GeneratorError(
                f"accepted {accepted} of {n_samples} samples in {draws} draws "
                f"(rate {accepted / draws:.2e}); increase the constraint margin"
            )
        x = rng.standard_normal((CHUNK, N_INPUTS))
        y = f(x) + shift
        if eq_set is not None:
            y = project_equality(eq_set, y)
        res = residuals(cs, y)
        ok = np.all(np.where(eq, np.abs(res) <= EQUALITY_TOL, res <= 0.0), axis=1)
        draws += CHUNK
        xs.append(x[ok])
        ys.append(y[ok])
        accepted += int(ok.sum())
    inputs = np.concatenate(xs)[:n_samples]
    targets = np.concatenate(ys)[:n_samples]

    perm = np.random.default_rng([seed, 1]).permutation(n_samples)
    n_test = max(1, int(round(test_fraction * n_samples)))
    return SyntheticDataset(
        inputs=inputs,
        targets=targets,
        constraints=cs,
        seed=seed,
        train_idx=np.sort(perm[n_test:]),
        test_idx=np.sort(perm[:n_test]),
        map_seed=map_seed,
        draws=draws,
    )


def save_dataset(ds, path):
    header = {
        "format": "diffproj-dataset",
        "version": 1,
        "N": ds.n_samples,
        "n": ds.inputs.shape[1],
        "m": ds.targets.shape[1],
        "seed": ds.seed,
        "map_seed": ds.map_seed,
        "draws": ds.draws,
        "constraints": ds.constraints.to_dict(),
    }
    write_container(
        path,
        header,
        {
            "inputs": ds.inputs,
            "targets": ds.targets,
            "train_idx": ds.train_idx.astype(np.float64),
            "test_idx": ds.test_idx.astype(np.float64),
        },
    )


def load_dataset(path):
    header, arrays = read_container(path)
    if header.get("format") != "diffproj-dataset":
        raise ValueError(f"{path} is not a dataset file")
    return SyntheticDataset(
        inputs=arrays["inputs"],
        targets=arrays["targets"],
        constraints=LinearConstraintSet.from_dict(header["constraints"]),
        seed=header["seed"],
        train_idx=arrays["train_idx"].astype(np.int64),
        test_idx=arrays["test_idx"].astype(np.int64),
        map_seed=header["map_seed"],
        draws=header["draws"],
    )
