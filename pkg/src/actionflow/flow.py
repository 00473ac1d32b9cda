"""Flow-matching action transformation.

Learns a conditional velocity field over the action plane whose ODE flow
carries a planned action to the action that would have produced the observed
state change under the reference dynamics model. Three networks cooperate: a
regime encoder summarizing (state features, planned action, prediction error),
an action encoder embedding (flow time, current action point), and a flow
network mapping both latents to a velocity.

Training data is generated counterfactually from the reference model alone:
next states are simulated with one action but registered under another, and
the conditioning error is the difference between the two simulated outcomes.
Pairs follow the linear interpolation path ``x_tau = (1 - tau) a0 + tau a1``
whose conditional target velocity ``(a1 - x_tau) / (1 - tau)`` reduces to
``a1 - a0`` on the path, which is the form implemented (it has no singularity
near ``tau = 1``).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import BaseEstimator, NumericalError, as_float_array, check_fitted
from .dynamics import (
    ACTION_BOUNDS,
    ACTION_DIM,
    FEATURE_DIM,
    STATE_DIM,
    EnsembleDynamicsModel,
    UgvAction,
    UgvState,
    features_from_theta,
    state_features,
    wrap_angle,
)
from .nn import (
    MlpSpec,
    adam_init,
    adam_step,
    init_params,
    mlp_backward,
    mlp_forward,
    mse,
    params_from_doc,
    params_to_doc,
)

logger = logging.getLogger(__name__)

COND_DIM = FEATURE_DIM + ACTION_DIM + STATE_DIM

AFM_SNAPSHOT_FORMAT = "action-flow"
SNAPSHOT_VERSION = 1


def state_diff(s_a: UgvState, s_b: UgvState) -> np.ndarray:
    """Component-wise state difference with a wrapped angular term."""
    return np.array([s_a.x - s_b.x, s_a.y - s_b.y,
                     wrap_angle(s_a.theta - s_b.theta)])


def state_diff_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    diff[..., 2] = wrap_angle(a[..., 2] - b[..., 2])
    return diff


@dataclass(frozen=True)
class CounterfactualSample:
    """One training tuple: planned action a0, intended action a1, and the
    reference-model outcome/error they induce."""

    s: UgvState
    a0: UgvAction
    a1: UgvAction
    s_next: UgvState
    e: np.ndarray


def counterfactual_batch(dynamics: EnsembleDynamicsModel, n: int,
                         rng: np.random.Generator,
                         intent_map=None) -> dict[str, np.ndarray]:
    """Vectorized counterfactual data generation.

    States are sampled with uniform headings at the origin (the learned
    dynamics are translation-invariant); both actions are uniform in bounds
    unless ``intent_map`` pins the intended action as a function of the
    planned one (used for synthetic regimes). Using the reference model for
    every next state keeps all samples inside the region that model considers
    reachable.
    """
    theta = rng.uniform(-np.pi, np.pi, size=n)
    states = np.zeros((n, STATE_DIM))
    states[:, 2] = theta
    a0 = rng.uniform(ACTION_BOUNDS[:, 0], ACTION_BOUNDS[:, 1], size=(n, ACTION_DIM))
    if intent_map is None:
        a1 = rng.uniform(ACTION_BOUNDS[:, 0], ACTION_BOUNDS[:, 1],
                         size=(n, ACTION_DIM))
    else:
        a1 = np.asarray(intent_map(a0), dtype=np.float64)
        if a1.shape != a0.shape:
            raise ValueError("intent_map must preserve the action batch shape")
    next_intended = dynamics.predict_state_array(states, a1)
    next_planned = dynamics.predict_state_array(states, a0)
    e = state_diff_array(next_intended, next_planned)
    cond = np.concatenate([features_from_theta(theta), a0, e], axis=1)
    return {"states": states, "a0": a0, "a1": a1, "next": next_intended,
            "error": e, "cond": cond}


def generate_counterfactual_samples(dynamics: EnsembleDynamicsModel, n: int,
                                    rng: np.random.Generator,
                                    intent_map=None) -> list[CounterfactualSample]:
    batch = counterfactual_batch(dynamics, n, rng, intent_map)
    return [
        CounterfactualSample(
            s=UgvState.from_array(batch["states"][i]),
            a0=UgvAction.from_array(batch["a0"][i]),
            a1=UgvAction.from_array(batch["a1"][i]),
            s_next=UgvState.from_array(batch["next"][i]),
            e=batch["error"][i].copy(),
        )
        for i in range(n)
    ]


def midpoint_integrate(field, x0, n_steps: int):
    """Integrate ``dx/dtau = field(tau, x)`` from tau 0 to 1, explicit midpoint.

    ``x0`` may be a scalar, vector, or batch; the field must map like-shaped
    values. Raises on non-finite intermediates.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    h = 1.0 / n_steps
    for k in range(n_steps):
        tau = k * h
        half = x + 0.5 * h * np.asarray(field(tau, x))
        x = x + h * np.asarray(field(tau + 0.5 * h, half))
        if not np.all(np.isfinite(x)):
            raise NumericalError(
                f"non-finite state while integrating (step {k + 1}/{n_steps})")
    return x


class ActionFlowTransformer(BaseEstimator):
    """Estimator wrapping the three-network conditional velocity field.

    ``fit``/``partial_fit`` take conditioning rows
    ``X = [cos theta, sin theta, v0, omega0, e_x, e_y, e_theta]`` and target
    actions ``y``; the planned action is identically the third and fourth
    column. ``transform`` integrates the learned field from the planned
    actions and clamps into bounds.
    """

    def __init__(self, regime_latent_dim: int = 64, action_latent_dim: int = 64,
                 encoder_hidden: int = 64, flow_hidden: tuple = (128, 64, 64),
                 activation: str = "elu", learning_rate: float = 0.01,
                 batch_size: int = 256, epochs: int = 10, ode_steps: int = 10,
                 random_state: int | None = None):
        self.regime_latent_dim = regime_latent_dim
        self.action_latent_dim = action_latent_dim
        self.encoder_hidden = encoder_hidden
        self.flow_hidden = flow_hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.ode_steps = ode_steps
        self.random_state = random_state

    def set_conditioning_stats(self, mean, std) -> "ActionFlowTransformer":
        """Freeze standardization applied to the regime encoder's input.

        The error columns of the conditioning vector are an order of magnitude
        smaller than the action columns; standardizing the encoder input keeps
        their information at trainable scale. The action path itself (source,
        target, interpolants) always stays in raw action units.
        """
        self.cond_mean_ = np.asarray(mean, dtype=np.float64)
        self.cond_std_ = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)
        if self.cond_mean_.shape != (COND_DIM,):
            raise ValueError(f"conditioning stats must have length {COND_DIM}")
        return self

    def _normalize_cond(self, cond: np.ndarray) -> np.ndarray:
        if getattr(self, "cond_mean_", None) is None:
            return cond
        return (cond - self.cond_mean_) / self.cond_std_

    # -- network plumbing -------------------------------------------------------

    def _specs(self) -> dict[str, MlpSpec]:
        return {
            "regime": MlpSpec((COND_DIM, self.encoder_hidden,
                               self.regime_latent_dim), activation=self.activation),
            "action": MlpSpec((1 + ACTION_DIM, self.encoder_hidden,
                               self.action_latent_dim), activation=self.activation),
            "flow": MlpSpec((self.regime_latent_dim + self.action_latent_dim,
                             *self.flow_hidden, ACTION_DIM),
                            activation=self.activation),
        }

    def _ensure_initialized(self) -> None:
        if getattr(self, "regime_encoder_", None) is not None:
            return
        if getattr(self, "cond_mean_", None) is None:
            self.cond_mean_ = None
            self.cond_std_ = None
        rng = np.random.default_rng(self.random_state)
        specs = self._specs()
        self.regime_encoder_ = init_params(specs["regime"], rng)
        self.action_encoder_ = init_params(specs["action"], rng)
        self.flow_net_ = init_params(specs["flow"], rng)
        self._optimizers = {
            "regime": adam_init(self.regime_encoder_, self.learning_rate),
            "action": adam_init(self.action_encoder_, self.learning_rate),
            "flow": adam_init(self.flow_net_, self.learning_rate),
        }
        self._tau_rng = np.random.default_rng(
            None if self.random_state is None else self.random_state + 1)
        self.loss_history_ = []

    # -- velocity field ----------------------------------------------------------

    def encode_regime(self, cond: np.ndarray) -> np.ndarray:
        """Latent summary of (state features, planned action, error) rows."""
        check_fitted(self, ("regime_encoder_",))
        return mlp_forward(self.regime_encoder_, self._normalize_cond(cond))

    def velocity_batch(self, cond: np.ndarray, tau: np.ndarray,
                       a_tau: np.ndarray, z_regime: np.ndarray | None = None
                       ) -> np.ndarray:
        check_fitted(self, ("regime_encoder_",))
        if z_regime is None:
            z_regime = self.encode_regime(cond)
        z_action = mlp_forward(self.action_encoder_,
                               np.concatenate([tau[:, None], a_tau], axis=1))
        return mlp_forward(self.flow_net_, np.concatenate([z_regime, z_action],
                                                          axis=1))

    # -- training ----------------------------------------------------------------

    def cfm_step_losses(self, X: np.ndarray, y: np.ndarray) -> list[float]:
        """Consume (X, y) as consecutive minibatches, one Adam step per batch."""
        losses = []
        for lo in range(0, X.shape[0], self.batch_size):
            hi = min(lo + self.batch_size, X.shape[0])
            tau = self._tau_rng.uniform(0.0, 1.0, size=hi - lo)
            loss, grads = cfm_loss_at(self, X[lo:hi], y[lo:hi], tau)
            if not math.isfinite(loss):
                raise NumericalError("training loss diverged (non-finite)")
            self.regime_encoder_, self._optimizers["regime"] = adam_step(
                self.regime_encoder_, grads["regime"], self._optimizers["regime"])
            self.action_encoder_, self._optimizers["action"] = adam_step(
                self.action_encoder_, grads["action"], self._optimizers["action"])
            self.flow_net_, self._optimizers["flow"] = adam_step(
                self.flow_net_, grads["flow"], self._optimizers["flow"])
            losses.append(loss)
        return losses

    def partial_fit(self, X, y) -> "ActionFlowTransformer":
        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y", ndim=2)
        if X.shape[1] != COND_DIM or y.shape[1] != ACTION_DIM:
            raise ValueError(
                f"expected X (n, {COND_DIM}) and y (n, {ACTION_DIM}), got "
                f"{X.shape} and {y.shape}")
        self._ensure_initialized()
        self.loss_history_.extend(self.cfm_step_losses(X, y))
        return self

    def fit(self, X, y) -> "ActionFlowTransformer":
        X = as_float_array(X, "X", ndim=2)
        y = as_float_array(y, "y", ndim=2)
        for attr in ("regime_encoder_", "action_encoder_", "flow_net_"):
            setattr(self, attr, None)
        self._ensure_initialized()
        order_rng = np.random.default_rng(
            None if self.random_state is None else self.random_state + 2)
        for _ in range(self.epochs):
            order = order_rng.permutation(X.shape[0])
            self.loss_history_.extend(self.cfm_step_losses(X[order], y[order]))
        return self

    # -- inference ----------------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Map conditioning rows to transformed actions via the ODE flow.

        The regime latent is computed once per row and held fixed across the
        integration; results are clamped into the action bounds.
        """
        check_fitted(self, ("regime_encoder_",))
        X = as_float_array(X, "X", ndim=2)
        z_regime = self.encode_regime(X)
        a0 = X[:, FEATURE_DIM:FEATURE_DIM + ACTION_DIM]

        def field(tau, a):
            taus = np.full(a.shape[0], tau)
            return self.velocity_batch(X, taus, a, z_regime=z_regime)

        a1 = midpoint_integrate(field, a0, self.ode_steps)
        return np.clip(a1, ACTION_BOUNDS[:, 0], ACTION_BOUNDS[:, 1])

    # -- persistence ----------------------------------------------------------------

    def to_doc(self) -> dict:
        check_fitted(self, ("regime_encoder_",))
        params = self.get_params()
        params["flow_hidden"] = list(params["flow_hidden"])
        stats = None
        if getattr(self, "cond_mean_", None) is not None:
            stats = {"mean": self.cond_mean_.tolist(),
                     "std": self.cond_std_.tolist()}
        return {
            "format": AFM_SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "params": params,
            "conditioning_stats": stats,
            "networks": {
                "regime_encoder": params_to_doc(self.regime_encoder_),
                "action_encoder": params_to_doc(self.action_encoder_),
                "flow_net": params_to_doc(self.flow_net_),
            },
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ActionFlowTransformer":
        if doc.get("format") != AFM_SNAPSHOT_FORMAT:
            raise ValueError(
                f"not an action-flow snapshot: format={doc.get('format')!r}")
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
        params = dict(doc["params"])
        params["flow_hidden"] = tuple(params["flow_hidden"])
        model = cls(**params)
        if doc.get("conditioning_stats"):
            model.set_conditioning_stats(doc["conditioning_stats"]["mean"],
                                         doc["conditioning_stats"]["std"])
        nets = doc["networks"]
        model.regime_encoder_ = params_from_doc(nets["regime_encoder"])
        model.action_encoder_ = params_from_doc(nets["action_encoder"])
        model.flow_net_ = params_from_doc(nets["flow_net"])
        model._optimizers = {
            "regime": adam_init(model.regime_encoder_, model.learning_rate),
            "action": adam_init(model.action_encoder_, model.learning_rate),
            "flow": adam_init(model.flow_net_, model.learning_rate),
        }
        model._tau_rng = np.random.default_rng(
            None if model.random_state is None else model.random_state + 1)
        model.loss_history_ = []
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_doc()))

    @classmethod
    def load(cls, path) -> "ActionFlowTransformer":
        return cls.from_doc(json.loads(Path(path).read_text()))


def velocity(model: ActionFlowTransformer, s: UgvState, a0: UgvAction,
             e: np.ndarray, tau: float, a_tau) -> np.ndarray:
    """Single-point velocity field evaluation."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    cond = np.concatenate([state_features(s), a0.as_array(),
                           np.asarray(e, dtype=np.float64)])[None, :]
    a_tau = np.asarray(a_tau, dtype=np.float64)[None, :]
    return model.velocity_batch(cond, np.array([tau]), a_tau)[0]


def cfm_loss_at(model: ActionFlowTransformer, X: np.ndarray, y: np.ndarray,
                tau: np.ndarray):
    """Conditional flow-matching loss at fixed interpolation times.

    Returns the scalar loss and per-network parameter gradients.
    """
    model._ensure_initialized()
    a0 = X[:, FEATURE_DIM:FEATURE_DIM + ACTION_DIM]
    x_tau = (1.0 - tau)[:, None] * a0 + tau[:, None] * y
    target = y - a0

    cond_in = model._normalize_cond(X)
    z_regime = mlp_forward(model.regime_encoder_, cond_in)
    action_in = np.concatenate([tau[:, None], x_tau], axis=1)
    z_action = mlp_forward(model.action_encoder_, action_in)
    flow_in = np.concatenate([z_regime, z_action], axis=1)
    pred = mlp_forward(model.flow_net_, flow_in)

    loss, grad_pred = mse(pred, target)
    flow_grads, grad_flow_in = mlp_backward(model.flow_net_, flow_in, grad_pred)
    d = model.regime_latent_dim
    regime_grads, _ = mlp_backward(model.regime_encoder_, cond_in,
                                   grad_flow_in[:, :d])
    action_grads, _ = mlp_backward(model.action_encoder_, action_in,
                                   grad_flow_in[:, d:])
    return loss, {"regime": regime_grads, "action": action_grads,
                  "flow": flow_grads}


def cfm_loss(model: ActionFlowTransformer, X: np.ndarray, y: np.ndarray,
             rng: np.random.Generator):
    """CFM loss with freshly drawn interpolation times tau ~ U[0, 1)."""
    tau = rng.uniform(0.0, 1.0, size=X.shape[0])
    return cfm_loss_at(model, X, y, tau)


def transform_action(model: ActionFlowTransformer, s: UgvState, a0: UgvAction,
                     e, n_steps: int | None = None) -> UgvAction:
    """Transform one planned action under the current regime error."""
    cond = np.concatenate([state_features(s), a0.as_array(),
                           np.asarray(e, dtype=np.float64)])[None, :]
    if n_steps is not None and n_steps != model.ode_steps:
        model = _with_ode_steps(model, n_steps)
    out = model.transform(cond)
    return UgvAction.from_array(out[0])


def _with_ode_steps(model: ActionFlowTransformer,
                    n_steps: int) -> ActionFlowTransformer:
    clone = ActionFlowTransformer(**{**model.get_params(), "ode_steps": n_steps})
    clone.regime_encoder_ = model.regime_encoder_
    clone.action_encoder_ = model.action_encoder_
    clone.flow_net_ = model.flow_net_
    if getattr(model, "cond_mean_", None) is not None:
        clone.set_conditioning_stats(model.cond_mean_, model.cond_std_)
    return clone


@dataclass(frozen=True)
class MisalignmentMonitor:
    """Thresholded one-step prediction-error gate.

    The flag is memoryless in the current error; the regime error handed to
    the transformer is frozen at the step the flag rises and cleared when it
    falls (set ``refresh`` to condition on the latest error instead).
    """

    delta_m: float = 1.0
    refresh: bool = False
    flag: bool = False
    last_error: np.ndarray = None
    frozen_error: np.ndarray = None

    def __post_init__(self):
        if self.delta_m <= 0:
            raise ValueError("delta_m must be positive")
        if self.last_error is None:
            object.__setattr__(self, "last_error", np.zeros(STATE_DIM))

    @property
    def regime_error(self) -> np.ndarray:
        if self.refresh:
            return self.last_error
        return self.frozen_error if self.frozen_error is not None else self.last_error


def monitor_step(monitor: MisalignmentMonitor, s_pred: UgvState,
                 s_real: UgvState) -> MisalignmentMonitor:
    """Advance the monitor with one (predicted, realized) state pair."""
    diff = state_diff(s_real, s_pred)
    error = diff if np.linalg.norm(diff) >= monitor.delta_m else np.zeros(STATE_DIM)
    flag = bool(np.linalg.norm(error) > 0)
    if flag and not monitor.flag:
        frozen = error.copy()
    elif not flag and monitor.flag:
        frozen = None
    else:
        frozen = monitor.frozen_error
    return MisalignmentMonitor(monitor.delta_m, monitor.refresh, flag, error,
                               frozen)


def train_action_transformer(dynamics: EnsembleDynamicsModel,
                             iterations: int = 10_000, gen_chunk: int = 2048,
                             batch_size: int = 256, learning_rate: float = 0.01,
                             rng: np.random.Generator | None = None,
                             intent_map=None,
                             **model_params) -> ActionFlowTransformer:
    """Streaming trainer: generate counterfactual chunks, consume as batches.

    ``iterations`` counts optimizer steps; each chunk of freshly generated
    samples is consumed once as consecutive minibatches.
    """
    if gen_chunk % batch_size != 0:
        raise ValueError("gen_chunk must be a multiple of batch_size")
    rng = np.random.default_rng() if rng is None else rng
    seed = int(rng.integers(2 ** 32))
    model = ActionFlowTransformer(batch_size=batch_size,
                                  learning_rate=learning_rate,
                                  random_state=seed, **model_params)
    prime = counterfactual_batch(dynamics, gen_chunk, rng, intent_map)
    model.set_conditioning_stats(prime["cond"].mean(axis=0),
                                 prime["cond"].std(axis=0))
    done = 0
    while done < iterations:
        batch = counterfactual_batch(dynamics, gen_chunk, rng, intent_map)
        steps = min(iterations - done, gen_chunk // batch_size)
        model.partial_fit(batch["cond"][:steps * batch_size],
                          batch["a1"][:steps * batch_size])
        done += steps
    return model
