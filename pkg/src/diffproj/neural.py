"""Feedforward network, loss variants, RMSProp update and the projected training loop.

Parameters are plain numpy arrays; gradients are computed by a hand-written
backward pass. Weight matrices have shape ``(n_in, n_out)`` and act as
``x @ W + b``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ._container import read_container, write_container
from .exceptions import DimensionMismatchError, TrainingDivergedError
from .projection import ProjectionConfig, project, project_vjp

__all__ = [
    "MlpModel",
    "forward",
    "backward",
    "LossVariant",
    "LossSpec",
    "loss_and_grad",
    "RmsPropState",
    "rmsprop_step",
    "TrainHistory",
    "train",
    "predict",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid")
OUTPUT_ACTIVATIONS = ("identity", "softmax")


# -- activations ---------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z, group):
    zg = z.reshape(z.shape[0], -1, group)
    e = np.exp(zg - zg.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(z.shape)


def _activate(name, z, group=None):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "identity":
        return z
    if name == "softmax":
        return _softmax(z, group or z.shape[1])
    raise ValueError(f"unknown activation {name!r}")


def _activation_vjp(name, z, a, g, group=None):
    """``g * sigma'(z)`` given pre-activation ``z`` and output ``a``."""
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    if name == "identity":
        return g
    if name == "softmax":
        group = group or z.shape[1]
        ag = a.reshape(a.shape[0], -1, group)
        gg = g.reshape(ag.shape)
        return (ag * (gg - (ag * gg).sum(axis=-1, keepdims=True))).reshape(g.shape)
    raise ValueError(f"unknown activation {name!r}")


# -- model ---------------------------------------------------------------------


@dataclass
class MlpModel:
    weights: list
    biases: list
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    softmax_group: int | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionMismatchError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionMismatchError(f"layer {i} input does not chain with layer {i - 1}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        if self.softmax_group is not None and self.n_outputs % self.softmax_group:
            raise ValueError("softmax_group must divide the output dimension")

    @classmethod
    def init(
        cls,
        layer_sizes,
        hidden_activation="relu",
        output_activation="identity",
        seed=None,
        softmax_group=None,
    ):
        """He-normal weights for ReLU nets, Glorot-normal otherwise; zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            var = 2.0 / n_in if hidden_activation == "relu" else 2.0 / (n_in + n_out)
            weights.append(rng.standard_normal((n_in, n_out)) * np.sqrt(var))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, hidden_activation, output_activation, softmax_group)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_inputs(self):
        return self.weights[0].shape[0]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[1]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params):
        return MlpModel(
            list(params[0::2]),
            list(params[1::2]),
            self.hidden_activation,
            self.output_activation,
            self.softmax_group,
        )

    def copy(self):
        return self.with_params([p.copy() for p in self.params()])

    def manifest(self):
        return {
            "format": "diffproj-mlp",
            "version": 1,
            "layer_sizes": self.layer_sizes,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "softmax_group": self.softmax_group,
        }


def save_model(model, path):
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    write_container(path, model.manifest(), arrays)


def load_model(path):
    header, arrays = read_container(path)
    if header.get("format") != "diffproj-mlp":
        raise ValueError(f"{path} is not a model checkpoint")
    n = len(header["layer_sizes"]) - 1
    model = MlpModel(
        [arrays[f"W{i}"] for i in range(n)],
        [arrays[f"b{i}"] for i in range(n)],
        header["hidden_activation"],
        header["output_activation"],
        header.get("softmax_group"),
    )
    if model.layer_sizes != header["layer_sizes"]:
        raise ValueError("checkpoint layer sizes do not match the stored parameters")
    return model


def forward(model, x):
    """Network output for one input ``(n,)`` or a batch ``(B, n)``.

    The cache holds the layer inputs and pre-activations for :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (model.n_inputs,) or x.ndim > 2:
        raise DimensionMismatchError(f"expected inputs of dimension {model.n_inputs}, got {x.shape}")
    a = np.atleast_2d(x)
    inputs, pre = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        if i == last:
            a = _activate(model.output_activation, z, model.softmax_group)
        else:
            a = _activate(model.hidden_activation, z)
    cache = {"inputs": inputs, "pre": pre, "output": a, "single": x.ndim == 1}
    return (a[0] if x.ndim == 1 else a), cache


def backward(model, cache, grad_output):
    """Gradients ``[dW0, db0, dW1, ...]`` for the cotangent ``grad_output``."""
    g = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    inputs, pre = cache["inputs"], cache["pre"]
    last = len(model.weights) - 1
    grads = [None] * (2 * len(model.weights))
    a = cache["output"]
    for i in range(last, -1, -1):
        if i == last:
            g = _activation_vjp(model.output_activation, pre[i], a, g, model.softmax_group)
        else:
            g = _activation_vjp(model.hidden_activation, pre[i], a, g)
        grads[2 * i] = inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            a = inputs[i]
            g = g @ model.weights[i].T
    return grads


# -- losses --------------------------------------------------------------------


class LossVariant(str, enum.Enum):
    MSE_PROJECTED = "mse_projected"
    BLENDED = "blended"
    RESIDUAL_PENALTY = "residual_penalty"
    FIXED_PENALTY = "fixed_penalty"


@dataclass(frozen=True)
class LossSpec:
    """Training loss on the projected output ``y_T`` and raw output ``f``.

    * ``mse_projected``: ``mse(y_T, y)``
    * ``blended``: ``(1 - alpha) mse(y_T, y) + alpha mse(f, y)``
    * ``residual_penalty``: ``mse(y_T, y) + mean_i sum_j max(a_j^T y_T - b_j, 0)``
    * ``fixed_penalty``: ``mse(y_T, y) + c * (fraction of samples violating any row)``
    """

    variant: LossVariant = LossVariant.MSE_PROJECTED
    alpha: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.c < 0:
            raise ValueError(f"penalty constant c must be nonnegative, got {self.c}")

    @classmethod
    def mse_projected(cls):
        return cls(LossVariant.MSE_PROJECTED)

    @classmethod
    def blended(cls, alpha):
        return cls(LossVariant.BLENDED, alpha=alpha)

    @classmethod
    def residual_penalty(cls):
        return cls(LossVariant.RESIDUAL_PENALTY)

    @classmethod
    def fixed_penalty(cls, c=1.0):
        return cls(LossVariant.FIXED_PENALTY, c=c)

    def to_dict(self):
        return {"variant": self.variant.value, "alpha": self.alpha, "c": self.c}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        unknown = set(doc) - {"variant", "alpha", "c"}
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**doc)


def _mse(a, y):
    d = a - y
    return float(np.mean(d * d)), (2.0 / d.size) * d


def loss_and_grad(model, batch, cs, proj_cfg, loss_spec, return_outputs=False):
    """Batch loss and parameter gradients through the projection stack.

    ``batch`` is ``(X, Y)``. With ``cs=None`` no projection is applied and the
    penalty terms vanish. Weight decay is not included; it is applied by
    :func:`rmsprop_step`.
    """
    X, Y = batch
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(Y) == 0:
        raise ValueError("empty batch")
    proj_cfg = proj_cfg or ProjectionConfig(layers=0)
    loss_spec = loss_spec or LossSpec()

    f, cache = forward(model, np.atleast_2d(X))
    if cs is not None:
        trace = project(cs, f, proj_cfg)
        y_t = trace.iterates[-1]
    else:
        trace, y_t = None, f

    variant = loss_spec.variant
    loss, g_t = _mse(y_t, Y)
    g_f = None
    if variant is LossVariant.BLENDED:
        a = loss_spec.alpha
        raw_loss, g_raw = _mse(f, Y)
        loss = (1.0 - a) * loss + a * raw_loss
        g_t = (1.0 - a) * g_t
        g_f = a * g_raw
    elif cs is not None and variant is not LossVariant.MSE_PROJECTED:
        normals, offsets = cs.inequality_form
        res = y_t @ normals.T - offsets
        if variant is LossVariant.RESIDUAL_PENALTY:
            loss += float(np.mean(np.maximum(res, 0.0).sum(axis=1)))
            g_t = g_t + ((res > 0).astype(np.float64) @ normals) / len(Y)
        else:
            # piecewise-constant penalty: zero gradient almost everywhere
            loss += loss_spec.c * float(np.mean(np.any(res > 0, axis=1)))

    g = project_vjp(cs, trace, proj_cfg, g_t) if trace is not None else g_t
    if g_f is not None:
        g = g + g_f
    grads = backward(model, cache, g)
    if return_outputs:
        return loss, grads, f, y_t
    return loss, grads


# -- optimizer -----------------------------------------------------------------


@dataclass
class RmsPropState:
    """Second-moment accumulator and hyperparameters.

    Update: ``g = grad + delta * theta``; ``s <- (1 - beta) s + beta g^2``;
    ``theta <- theta - alpha g / (sqrt(s) + epsilon)``.
    """

    s: list
    alpha: float = 1e-3
    beta: float = 0.1
    delta: float = 1e-4
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("learning rate alpha must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.delta < 0 or self.epsilon <= 0:
            raise ValueError("need delta >= 0 and epsilon > 0")

    @classmethod
    def zeros_like(cls, params, **hyper):
        if isinstance(params, MlpModel):
            params = params.params()
        return cls([np.zeros_like(p) for p in params], **hyper)

    def hyperparameters(self):
        return {"alpha": self.alpha, "beta": self.beta, "delta": self.delta, "epsilon": self.epsilon}


def rmsprop_step(model, grads, state):
    """Return ``(new_model, new_state)``; inputs are left untouched.

    ``model`` may be an :class:`MlpModel` or a list of parameter arrays.
    """
    params = model.params() if isinstance(model, MlpModel) else list(model)
    if len(grads) != len(params) or len(state.s) != len(params):
        raise DimensionMismatchError("gradients, accumulator and parameters do not align")
    new_params, new_s = [], []
    for theta, grad, s in zip(params, grads, state.s):
        theta = np.asarray(theta, dtype=np.float64)
        if np.shape(grad) != theta.shape:
            raise DimensionMismatchError(f"gradient shape {np.shape(grad)} != parameter {theta.shape}")
        g = grad + state.delta * theta
        s = (1.0 - state.beta) * s + state.beta * (g * g)
        new_s.append(s)
        new_params.append(theta - state.alpha * g / (np.sqrt(s) + state.epsilon))
    new_state = RmsPropState(new_s, **state.hyperparameters())
    if isinstance(model, MlpModel):
        return model.with_params(new_params), new_state
    return new_params, new_state


# -- training ------------------------------------------------------------------


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    raw_violation: list = field(default_factory=list)
    output_violation: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def to_dict(self):
        return {k: list(v) for k, v in self.__dict__.items()}


def predict(model, X, cs=None, proj_cfg=None):
    """Projected outputs (raw outputs when ``cs`` is None or ``layers == 0``)."""
    f, _ = forward(model, X)
    if cs is None or proj_cfg is None or proj_cfg.layers == 0:
        return f
    return project(cs, f, proj_cfg).iterates[-1]


def _mean_violation(cs, Y):
    if cs is None:
        return 0.0
    normals, offsets = cs.inequality_form
    return float(np.mean(np.maximum(np.atleast_2d(Y) @ normals.T - offsets, 0.0).max(axis=1)))


def train(
    model,
    dataset,
    cs,
    proj_cfg,
    loss_spec,
    epochs,
    seed,
    *,
    optimizer=None,
    batch_size=32,
    validation=None,
    lr_schedule="constant",
):
    """Minibatch training with projection layers in the loop.

    ``dataset`` is ``(X, Y)``; ``optimizer`` is an :class:`RmsPropState`
    template whose accumulator is reset to zero. Batches are drawn from a
    fresh permutation every epoch using ``seed``. Returns the trained model and
    a :class:`TrainHistory` of per-epoch metrics; ``validation=(X, Y)`` adds a
    held-out MSE trace. ``lr_schedule="cosine"`` anneals the learning rate
    from its initial value towards zero over ``epochs`` (one value per epoch).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr_schedule not in LR_SCHEDULES:
        raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {lr_schedule!r}")
    X, Y = (np.asarray(a, dtype=np.float64) for a in dataset)
    if len(X) != len(Y) or len(X) == 0:
        raise ValueError("inputs and targets must be non-empty and aligned")
    proj_cfg = proj_cfg or ProjectionConfig(layers=0)
    loss_spec = loss_spec or LossSpec()
    hyper = optimizer.hyperparameters() if optimizer is not None else {}
    state = RmsPropState.zeros_like(model, **hyper)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    n = len(X)

    base_alpha = state.alpha
    for epoch in range(epochs):
        if lr_schedule == "cosine":
            state = replace(state, alpha=base_alpha * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs)))
        order = rng.permutation(n)
        total, count = 0.0, 0
        for k, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grad(model, (X[idx], Y[idx]), cs, proj_cfg, loss_spec)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch, k, loss)
            model, state = rmsprop_step(model, grads, state)
            total += loss * len(idx)
            count += len(idx)

        raw, _ = forward(model, X)
        out = raw if cs is None or proj_cfg.layers == 0 else project(cs, raw, proj_cfg).iterates[-1]
        history.loss.append(total / count)
        history.train_mse.append(float(np.mean((out - Y) ** 2)))
        history.raw_violation.append(_mean_violation(cs, raw))
        history.output_violation.append(_mean_violation(cs, out))
        if validation is not None:
            Xv, Yv = validation
            history.val_mse.append(float(np.mean((predict(model, Xv, cs, proj_cfg) - Yv) ** 2)))
        logger.debug("epoch %d loss %.6g", epoch, history.loss[-1])
    return model, history
