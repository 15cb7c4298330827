"""scikit-learn compatible wrappers.

``PolyhedralProjection`` is a stateless transformer that maps each row of
``X`` onto (or towards) a linear constraint set; ``ProjectedMLPRegressor``
trains an MLP with that projection stacked on its output.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .constraints import LinearConstraintSet
from .exceptions import DimensionMismatchError
from .neural import LossSpec, MlpModel, RmsPropState, forward, train
from .oracle import closest_point
from .projection import ProjectionConfig, project, project_equality

__all__ = ["PolyhedralProjection", "ProjectedMLPRegressor"]

_METHODS = ("iterative", "equality", "exact")


def _check_constraints(constraints, n_features):
    if not isinstance(constraints, LinearConstraintSet):
        raise TypeError("constraints must be a LinearConstraintSet")
    if constraints.dim != n_features:
        raise DimensionMismatchError(
            f"X has {n_features} features but the constraints act on {constraints.dim}"
        )


class PolyhedralProjection(TransformerMixin, BaseEstimator):
    """Project rows of ``X`` onto ``{y : a_j^T y <= b_j}``.

    Parameters
    ----------
    constraints : LinearConstraintSet
    lam : float, default=1.0
        Relaxation factor in (0, 2).
    layers : int, default=3
        Number of stacked projection steps (``method="iterative"`` only).
    epsilon : float, default=1e-8
        Denominator stabilizer.
    weight_mode : {"one_over_m", "one_over_violated"}
    step_rule : {"surrogate", "sum"}
    method : {"iterative", "equality", "exact"}
        ``"equality"`` uses the closed form (equality rows only) and
        ``"exact"`` the active-set oracle (small systems only).
    """

    def __init__(
        self,
        constraints=None,
        lam=1.0,
        layers=3,
        epsilon=1e-8,
        weight_mode="one_over_m",
        step_rule="surrogate",
        method="iterative",
    ):
        self.constraints = constraints
        self.lam = lam
        self.layers = layers
        self.epsilon = epsilon
        self.weight_mode = weight_mode
        self.step_rule = step_rule
        self.method = method

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        _check_constraints(self.constraints, X.shape[1])
        self.config_ = ProjectionConfig(
            lam=self.lam,
            layers=self.layers,
            epsilon=self.epsilon,
            weight_mode=self.weight_mode,
            step_rule=self.step_rule,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatchError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.method == "equality":
            return project_equality(self.constraints, X)
        if self.method == "exact":
            return np.array([closest_point(self.constraints, x).point for x in X])
        return project(self.constraints, X, self.config_).iterates[-1]

    def trace(self, X):
        """Full iterate history of the iterative projection."""
        check_is_fitted(self, "config_")
        return project(self.constraints, check_array(X, dtype=np.float64), self.config_)


class ProjectedMLPRegressor(RegressorMixin, BaseEstimator):
    """Multi-output MLP regressor whose outputs pass through projection layers.

    With ``layers=0`` this is a plain MLP trained on the MSE. ``loss`` selects
    the training objective (see :class:`diffproj.neural.LossSpec`);
    ``blend_alpha`` weights the raw-output term of the ``"blended"`` loss and
    ``penalty_c`` the ``"fixed_penalty"`` term. Optimization is RMSProp with
    learning rate ``learning_rate``, accumulator weight ``beta`` and weight
    decay ``weight_decay``; ``lr_schedule="cosine"`` anneals the learning
    rate to zero over ``epochs``.

    ``predict`` returns projected outputs when ``project_predictions`` is true
    and ``layers > 0``; ``predict_raw`` always returns the network output.
    """

    def __init__(
        self,
        constraints=None,
        hidden_layer_sizes=(128, 128),
        activation="relu",
        layers=3,
        lam=1.0,
        epsilon=1e-8,
        weight_mode="one_over_m",
        loss="mse_projected",
        blend_alpha=0.0,
        penalty_c=1.0,
        learning_rate=1e-3,
        beta=0.1,
        weight_decay=1e-4,
        optimizer_epsilon=1e-8,
        batch_size=32,
        epochs=200,
        random_state=0,
        project_predictions=True,
        lr_schedule="constant",
    ):
        self.constraints = constraints
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.layers = layers
        self.lam = lam
        self.epsilon = epsilon
        self.weight_mode = weight_mode
        self.loss = loss
        self.blend_alpha = blend_alpha
        self.penalty_c = penalty_c
        self.learning_rate = learning_rate
        self.beta = beta
        self.weight_decay = weight_decay
        self.optimizer_epsilon = optimizer_epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.project_predictions = project_predictions
        self.lr_schedule = lr_schedule

    def _projection_config(self):
        return ProjectionConfig(
            lam=self.lam, layers=self.layers, epsilon=self.epsilon, weight_mode=self.weight_mode
        )

    def fit(self, X, y, validation=None):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if self.constraints is not None:
            _check_constraints(self.constraints, y.shape[1])
        seed = 0 if self.random_state is None else int(self.random_state)
        model = MlpModel.init(
            [X.shape[1], *self.hidden_layer_sizes, y.shape[1]],
            hidden_activation=self.activation,
            seed=[seed, 0],
        )
        self.config_ = self._projection_config()
        self.loss_spec_ = LossSpec(self.loss, alpha=self.blend_alpha, c=self.penalty_c)
        optimizer = RmsPropState(
            [],
            alpha=self.learning_rate,
            beta=self.beta,
            delta=self.weight_decay,
            epsilon=self.optimizer_epsilon,
        )
        self.model_, self.history_ = train(
            model,
            (X, y),
            self.constraints,
            self.config_,
            self.loss_spec_,
            self.epochs,
            seed=[seed, 1],
            optimizer=optimizer,
            batch_size=self.batch_size,
            validation=validation,
            lr_schedule=self.lr_schedule,
        )
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def predict_raw(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return forward(self.model_, X)[0]

    def predict(self, X):
        out = self.predict_raw(X)
        if self.constraints is None or not self.project_predictions or self.config_.layers == 0:
            return out
        return project(self.constraints, out, self.config_).iterates[-1]
