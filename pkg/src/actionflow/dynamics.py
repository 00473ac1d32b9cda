"""Ground-vehicle dynamics: analytic Dubins model and the learned ensemble.

The learned model is an ensemble of probabilistic MLPs mapping
``(cos theta, sin theta, v, omega)`` to a Gaussian over the state delta
``(dx, dy, dtheta)``. Position is excluded from the inputs because the Dubins
dynamics are translation-invariant, and the angle delta target is the wrapped
(shortest signed arc) difference so regression targets stay continuous.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import BaseEstimator, NumericalError, as_float_array, check_fitted
from .nn import (
    MlpParams,
    MlpSpec,
    adam_init,
    adam_step,
    gaussian_nll,
    init_params,
    mlp_backward,
    mlp_forward,
    params_from_doc,
    params_to_doc,
)

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.1
V_BOUNDS = (-1.0, 1.0)
OMEGA_BOUNDS = (-math.pi / 2, math.pi / 2)
# Rows are (low, high) per action dimension: linear velocity, angular velocity.
ACTION_BOUNDS = np.array([V_BOUNDS, OMEGA_BOUNDS])

STATE_DIM = 3
ACTION_DIM = 2
FEATURE_DIM = 2  # (cos theta, sin theta)

ENSEMBLE_SNAPSHOT_FORMAT = "ensemble-dynamics"
SNAPSHOT_VERSION = 1

_STD_FLOOR = 1e-8


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if np.ndim(theta) == 0 else wrapped


@dataclass(frozen=True)
class UgvState:
    """Planar pose; heading is always stored wrapped into (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"UgvState.{name} must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, arr) -> "UgvState":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class UgvAction:
    """Velocity command; components are clamped into bounds on construction."""

    v: float
    omega: float

    def __post_init__(self):
        object.__setattr__(self, "v", float(np.clip(self.v, *V_BOUNDS)))
        object.__setattr__(self, "omega", float(np.clip(self.omega, *OMEGA_BOUNDS)))

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])

    @classmethod
    def from_array(cls, arr) -> "UgvAction":
        return cls(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class Transition:
    s: UgvState
    a: UgvAction
    s_next: UgvState


def dubins_step(s: UgvState, a: UgvAction, dt: float = DEFAULT_DT) -> UgvState:
    """Explicit-Euler unicycle update."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return UgvState(
        s.x + a.v * math.cos(s.theta) * dt,
        s.y + a.v * math.sin(s.theta) * dt,
        s.theta + a.omega * dt,
    )


def dubins_step_array(states: np.ndarray, actions: np.ndarray,
                      dt: float = DEFAULT_DT) -> np.ndarray:
    """Vectorized Dubins step on (n, 3) states and (n, 2) raw actions.

    Actions are taken as-is (no clamping) so gain-intervened commands outside
    the nominal bounds propagate faithfully.
    """
    theta = states[..., 2]
    out = np.empty_like(states)
    out[..., 0] = states[..., 0] + actions[..., 0] * np.cos(theta) * dt
    out[..., 1] = states[..., 1] + actions[..., 0] * np.sin(theta) * dt
    out[..., 2] = wrap_angle(theta + actions[..., 1] * dt)
    return out


def state_features(s: UgvState) -> np.ndarray:
    """Model input encoding of a state: (cos theta, sin theta)."""
    return np.array([math.cos(s.theta), math.sin(s.theta)])


def features_from_theta(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def state_delta(states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
    """Per-row (dx, dy, wrapped dtheta) targets."""
    delta = next_states - states
    delta[..., 2] = wrap_angle(next_states[..., 2] - states[..., 2])
    return delta


def apply_delta(states: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    out = states + deltas
    out[..., 2] = wrap_angle(states[..., 2] + deltas[..., 2])
    return out


def generate_dynamics_dataset(n_samples: int, rng: np.random.Generator,
                              action_noise_frac: float = 0.0,
                              dt: float = DEFAULT_DT) -> tuple[np.ndarray, np.ndarray]:
    """Sample (features+action, state delta) pairs from the Dubins model.

    Headings are uniform on the circle and positions pinned at the origin
    (translation invariance). With ``action_noise_frac`` > 0 the simulated
    action is perturbed multiplicatively by a uniform factor in
    ``[1 - frac, 1 + frac]`` per component while the registered input stays
    the commanded action, which emulates actuation uncertainty.
    """
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if not 0.0 <= action_noise_frac <= 1.0:
        raise ValueError("action_noise_frac must be in [0, 1]")
    theta = rng.uniform(-np.pi, np.pi, size=n_samples)
    actions = rng.uniform(ACTION_BOUNDS[:, 0], ACTION_BOUNDS[:, 1],
                          size=(n_samples, ACTION_DIM))
    executed = actions
    if action_noise_frac > 0.0:
        factors = rng.uniform(1.0 - action_noise_frac, 1.0 + action_noise_frac,
                              size=(n_samples, ACTION_DIM))
        executed = actions * factors
    states = np.zeros((n_samples, STATE_DIM))
    states[:, 2] = theta
    next_states = dubins_step_array(states, executed, dt)
    X = np.concatenate([features_from_theta(theta), actions], axis=1)
    y = state_delta(states, next_states)
    return X, y


class EnsembleDynamicsModel(BaseEstimator):
    """Probabilistic ensemble regressor over state deltas.

    Each member is an MLP emitting a mean and a log-variance per output
    dimension and is trained on the heteroscedastic Gaussian NLL. Predictions
    average the member means; the log-variances only enter the loss.
    ``partial_fit`` applies exactly one Adam step per member to support
    single-transition online updates.

    Input and output normalization statistics are frozen at ``fit`` time.
    """

    def __init__(self, n_members: int = 5, hidden_units: int = 200,
                 hidden_layers: int = 2, activation: str = "leaky_relu",
                 layer_norm: bool = False, sparsity: float = 0.0,
                 learning_rate: float = 1e-3, online_learning_rate: float | None = None,
                 batch_size: int = 256, max_epochs: int = 32, loss_tol: float = 1e-3,
                 random_state: int | None = None):
        self.n_members = n_members
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.layer_norm = layer_norm
        self.sparsity = sparsity
        self.learning_rate = learning_rate
        self.online_learning_rate = online_learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.loss_tol = loss_tol
        self.random_state = random_state

    # -- construction helpers -------------------------------------------------

    def _spec(self) -> MlpSpec:
        sizes = (FEATURE_DIM + ACTION_DIM,
                 *([self.hidden_units] * self.hidden_layers),
                 2 * STATE_DIM)
        return MlpSpec(sizes, activation=self.activation, layer_norm=self.layer_norm)

    def _init_state(self, members: list[MlpParams], normalization: dict) -> None:
        self.members_ = members
        self.in_mean_ = normalization["in_mean"]
        self.in_std_ = normalization["in_std"]
        self.out_mean_ = normalization["out_mean"]
        self.out_std_ = normalization["out_std"]
        self._opt_states = None
        self.skipped_updates_ = 0

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y) -> "EnsembleDynamicsModel":
        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y", ndim=2)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        if X.shape[0] == 0:
            raise ValueError("cannot fit on an empty dataset")
        rng = np.random.default_rng(self.random_state)

        normalization = {
            "in_mean": X.mean(axis=0),
            "in_std": np.maximum(X.std(axis=0), _STD_FLOOR),
            "out_mean": y.mean(axis=0),
            "out_std": np.maximum(y.std(axis=0), _STD_FLOOR),
        }
        Xn = (X - normalization["in_mean"]) / normalization["in_std"]
        yn = (y - normalization["out_mean"]) / normalization["out_std"]

        spec = self._spec()
        members, fit_losses = [], []
        for m in range(self.n_members):
            params = init_params(spec, rng, sparsity=self.sparsity)
            opt = adam_init(params, learning_rate=self.learning_rate)
            losses = []
            prev_loss = None
            for epoch in range(self.max_epochs):
                order = rng.permutation(X.shape[0])
                batch_losses = []
                for start in range(0, X.shape[0], self.batch_size):
                    idx = order[start:start + self.batch_size]
                    loss, grads = _member_loss_and_grads(params, Xn[idx], yn[idx])
                    if not math.isfinite(loss):
                        raise NumericalError(
                            f"non-finite training loss (member {m}, epoch {epoch})"
                        )
                    params, opt = adam_step(params, grads, opt)
                    batch_losses.append(loss)
                epoch_loss = float(np.mean(batch_losses))
                losses.append(epoch_loss)
                if prev_loss is not None and abs(prev_loss - epoch_loss) < self.loss_tol:
                    break
                prev_loss = epoch_loss
            members.append(params)
            fit_losses.append(losses)

        self._init_state(members, normalization)
        self.fit_losses_ = fit_losses
        return self

    def partial_fit(self, X, y) -> "EnsembleDynamicsModel":
        """One Adam step per member on the given batch (normalization frozen).

        Non-finite gradients skip that member's update and are counted in
        ``skipped_updates_``.
        """
        check_fitted(self, ("members_",))
        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y", ndim=2)
        Xn = (X - self.in_mean_) / self.in_std_
        yn = (y - self.out_mean_) / self.out_std_
        if self._opt_states is None:
            lr = (self.learning_rate if self.online_learning_rate is None
                  else self.online_learning_rate)
            self._opt_states = [
                adam_init(p, learning_rate=lr) for p in self.members_
            ]
        for m, params in enumerate(self.members_):
            loss, grads = _member_loss_and_grads(params, Xn, yn)
            try:
                self.members_[m], self._opt_states[m] = adam_step(
                    params, grads, self._opt_states[m])
            except NumericalError:
                self.skipped_updates_ += 1
                logger.warning("skipped online update for member %d "
                               "(non-finite gradient)", m)
        return self

    def predict(self, X) -> np.ndarray:
        """Mean predicted state delta, averaged over ensemble members."""
        check_fitted(self, ("members_",))
        X = as_float_array(X, "X", ndim=2)
        Xn = (X - self.in_mean_) / self.in_std_
        acc = np.zeros((X.shape[0], STATE_DIM))
        for params in self.members_:
            out = mlp_forward(params, Xn)
            acc += out[:, :STATE_DIM]
        mean_norm = acc / len(self.members_)
        return mean_norm * self.out_std_ + self.out_mean_

    def member_nll(self, X, y) -> float:
        """Mean per-member NLL on a batch, in normalized target space."""
        check_fitted(self, ("members_",))
        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y", ndim=2)
        Xn = (X - self.in_mean_) / self.in_std_
        yn = (y - self.out_mean_) / self.out_std_
        losses = [_member_loss_and_grads(p, Xn, yn)[0] for p in self.members_]
        return float(np.mean(losses))

    # -- state-space convenience ------------------------------------------------

    def predict_state(self, s: UgvState, a: UgvAction) -> UgvState:
        """Deterministic next-state prediction for a single (state, action)."""
        nxt = self.predict_state_array(s.as_array()[None, :], a.as_array()[None, :])
        return UgvState.from_array(nxt[0])

    def predict_state_array(self, states: np.ndarray,
                            actions: np.ndarray) -> np.ndarray:
        X = np.concatenate([features_from_theta(states[:, 2]), actions], axis=1)
        deltas = self.predict(X)
        return apply_delta(states, deltas)

    def online_update(self, t: Transition) -> "EnsembleDynamicsModel":
        """Single-transition update (replay-buffer-free)."""
        X = np.concatenate([state_features(t.s), t.a.as_array()])[None, :]
        y = state_delta(t.s.as_array()[None, :], t.s_next.as_array()[None, :])
        return self.partial_fit(X, y)

    # -- persistence -------------------------------------------------------------

    def to_doc(self) -> dict:
        check_fitted(self, ("members_",))
        return {
            "format": ENSEMBLE_SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "params": self.get_params(),
            "members": [params_to_doc(p) for p in self.members_],
            "normalization": {
                "in_mean": self.in_mean_.tolist(),
                "in_std": self.in_std_.tolist(),
                "out_mean": self.out_mean_.tolist(),
                "out_std": self.out_std_.tolist(),
            },
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "EnsembleDynamicsModel":
        if doc.get("format") != ENSEMBLE_SNAPSHOT_FORMAT:
            raise ValueError(
                f"not an ensemble snapshot: format={doc.get('format')!r}")
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
        model = cls(**doc["params"])
        norm = doc["normalization"]
        model._init_state(
            [params_from_doc(d) for d in doc["members"]],
            {k: np.asarray(v, dtype=np.float64) for k, v in norm.items()},
        )
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_doc()))

    @classmethod
    def load(cls, path) -> "EnsembleDynamicsModel":
        return cls.from_doc(json.loads(Path(path).read_text()))

    def copy(self) -> "EnsembleDynamicsModel":
        model = type(self)(**self.get_params())
        model._init_state(
            [p.copy() for p in self.members_],
            {
                "in_mean": self.in_mean_.copy(),
                "in_std": self.in_std_.copy(),
                "out_mean": self.out_mean_.copy(),
                "out_std": self.out_std_.copy(),
            },
        )
        return model


def _member_loss_and_grads(params: MlpParams, Xn: np.ndarray,
                           yn: np.ndarray) -> tuple[float, MlpParams]:
    out = mlp_forward(params, Xn)
    mean, log_var = out[:, :STATE_DIM], out[:, STATE_DIM:]
    loss, grad_mean, grad_lv = gaussian_nll(mean, log_var, yn)
    grad_out = np.concatenate([grad_mean, grad_lv], axis=1)
    grads, _ = mlp_backward(params, Xn, grad_out)
    return loss, grads


def train_initial_dynamics(n_samples: int = 10_000,
                           action_noise_frac: float = 0.0,
                           dt: float = DEFAULT_DT,
                           rng: np.random.Generator | None = None,
                           **model_params) -> EnsembleDynamicsModel:
    """Train the initial ensemble on randomly generated Dubins transitions."""
    rng = np.random.default_rng() if rng is None else rng
    X, y = generate_dynamics_dataset(n_samples, rng, action_noise_frac, dt)
    seed = int(rng.integers(2 ** 32))
    model = EnsembleDynamicsModel(random_state=seed, **model_params)
    return model.fit(X, y)
