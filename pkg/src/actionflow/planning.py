"""Sampling-based receding-horizon planning (MPPI).

Each call perturbs the time-shifted nominal action sequence with Gaussian
noise, rolls every candidate out under the supplied dynamics step, scores the
trajectories, and softmin-averages the candidates. The exploration std is
specified as a fraction of each action dimension's half-range, the softmin
temperature divides cost gaps measured from the per-batch minimum, and the
smoothing coefficient blends the weighted average with the shifted nominal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ACTION_BOUNDS, ACTION_DIM, UgvAction, UgvState

logger = logging.getLogger(__name__)


def _default_bounds() -> np.ndarray:
    return ACTION_BOUNDS.copy()


@dataclass
class MppiConfig:
    population: int = 1000
    horizon: int = 15
    temperature: float = 0.9
    noise_sigma: float = 0.4
    smoothing: float = 0.6
    action_bounds: np.ndarray = field(default_factory=_default_bounds)

    def __post_init__(self):
        self.action_bounds = np.asarray(self.action_bounds, dtype=np.float64)
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if np.any(np.asarray(self.noise_sigma) <= 0):
            raise ValueError("noise_sigma must be positive")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError("smoothing must be in [0, 1]")
        if self.action_bounds.shape != (ACTION_DIM, 2):
            raise ValueError("action_bounds must have shape (action_dim, 2)")

    @property
    def noise_std(self) -> np.ndarray:
        """Exploration std per dimension: sigma times the action half-range."""
        half_range = 0.5 * (self.action_bounds[:, 1] - self.action_bounds[:, 0])
        return np.broadcast_to(np.asarray(self.noise_sigma), (ACTION_DIM,)) * half_range


@dataclass
class CostSpec:
    """Quadratic goal-seeking cost with a control-effort penalty."""

    goal: tuple[float, float]
    w_dist: float = 1.0
    w_ctrl: float = 0.05
    w_term: float = 10.0

    def __post_init__(self):
        weights = (self.w_dist, self.w_ctrl, self.w_term)
        if any(w < 0 for w in weights):
            raise ValueError("cost weights must be nonnegative")
        if all(w == 0 for w in weights):
            raise ValueError("at least one cost weight must be positive")


@dataclass
class Plan:
    """Nominal action sequence; actions are clamped into bounds on creation."""

    actions: np.ndarray
    action_bounds: np.ndarray = field(default_factory=_default_bounds)

    def __post_init__(self):
        self.actions = np.clip(
            np.asarray(self.actions, dtype=np.float64),
            self.action_bounds[:, 0], self.action_bounds[:, 1])
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise ValueError(f"plan actions must be (H, {ACTION_DIM})")

    @property
    def first_action(self) -> UgvAction:
        return UgvAction(*self.actions[0])

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def zero_plan(config: MppiConfig) -> Plan:
    return Plan(np.zeros((config.horizon, ACTION_DIM)), config.action_bounds)


def trajectory_cost(states: np.ndarray, actions: np.ndarray,
                    cost: CostSpec) -> float:
    """Running costs over the first H states plus the terminal cost at s_H."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.shape[0] != actions.shape[0] + 1:
        raise ValueError(
            f"need H+1 states for H actions, got {states.shape[0]} and "
            f"{actions.shape[0]}")
    goal = np.asarray(cost.goal, dtype=np.float64)
    d2 = np.sum((states[:-1, :2] - goal) ** 2, axis=-1)
    u2 = np.sum(actions ** 2, axis=-1)
    running = cost.w_dist * d2 + cost.w_ctrl * u2
    terminal = cost.w_term * np.sum((states[-1, :2] - goal) ** 2)
    return float(running.sum() + terminal)


def _trajectory_costs_batch(states: np.ndarray, actions: np.ndarray,
                            cost: CostSpec) -> np.ndarray:
    goal = np.asarray(cost.goal, dtype=np.float64)
    d2 = np.sum((states[:, :-1, :2] - goal) ** 2, axis=-1)
    u2 = np.sum(actions ** 2, axis=-1)
    running = (cost.w_dist * d2 + cost.w_ctrl * u2).sum(axis=1)
    terminal = cost.w_term * np.sum((states[:, -1, :2] - goal) ** 2, axis=-1)
    return running + terminal


def rollout(model_step, s0: UgvState, actions) -> list[UgvState]:
    """Apply a (state, action) -> state model recursively from s0."""
    states = [s0]
    for a in actions:
        states.append(model_step(states[-1], a))
    return states


def _rollout_batch(step_batch, s0: UgvState, action_seqs: np.ndarray) -> np.ndarray:
    """Roll K action sequences (K, H, 2) to states (K, H+1, 3)."""
    k, h, _ = action_seqs.shape
    states = np.empty((k, h + 1, 3))
    states[:, 0] = s0.as_array()
    current = states[:, 0].copy()
    for step in range(h):
        current = step_batch(current, action_seqs[:, step])
        states[:, step + 1] = current
    return states


def softmin_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Exponential weights on cost gaps from the minimum; sums to one.

    Non-finite costs receive zero weight.
    """
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise ValueError("no finite costs to weight")
    best = costs[finite].min()
    raw = np.where(finite, np.exp(-(np.where(finite, costs, best) - best)
                                  / temperature), 0.0)
    return raw / raw.sum()


def shift_nominal(plan: Plan) -> Plan:
    """Receding-horizon warm start: drop the head, repeat the tail."""
    shifted = np.concatenate([plan.actions[1:], plan.actions[-1:]], axis=0)
    return Plan(shifted, plan.action_bounds)


def mppi_plan(step_batch, s: UgvState, cost: CostSpec, nominal_prev: Plan,
              config: MppiConfig, rng: np.random.Generator,
              return_info: bool = False):
    """One planning iteration; returns the new nominal Plan.

    ``step_batch`` maps (states (K, 3), actions (K, 2)) to next states.
    If every sampled trajectory cost is non-finite the previous (shifted)
    nominal is returned unchanged and the event is logged.
    """
    base = shift_nominal(nominal_prev).actions
    low, high = config.action_bounds[:, 0], config.action_bounds[:, 1]
    noise = rng.normal(size=(config.population, config.horizon, ACTION_DIM))
    samples = np.clip(base[None, :, :] + noise * config.noise_std, low, high)

    states = _rollout_batch(step_batch, s, samples)
    costs = _trajectory_costs_batch(states, samples, cost)

    info = {"costs": costs, "fallback": False}
    if not np.any(np.isfinite(costs)):
        logger.warning("all sampled trajectory costs non-finite; "
                       "keeping previous nominal")
        plan = Plan(base, config.action_bounds)
        info["fallback"] = True
        info["weights"] = None
        return (plan, info) if return_info else plan

    weights = softmin_weights(costs, config.temperature)
    weighted = np.einsum("k,khd->hd", weights, samples)
    new_nominal = config.smoothing * weighted + (1.0 - config.smoothing) * base
    plan = Plan(new_nominal, config.action_bounds)
    if return_info:
        info["weights"] = weights
        info["base_cost"] = trajectory_cost(
            _rollout_batch(step_batch, s, base[None])[0], base, cost)
        return plan, info
    return plan


class MppiPlanner:
    """Stateful wrapper carrying the nominal sequence between calls."""

    def __init__(self, step_batch, config: MppiConfig):
        self.step_batch = step_batch
        self.config = config
        self.nominal_ = zero_plan(config)
        self.fallbacks_ = 0

    def plan(self, s: UgvState, cost: CostSpec, rng: np.random.Generator) -> Plan:
        plan, info = mppi_plan(self.step_batch, s, cost, self.nominal_,
                               self.config, rng, return_info=True)
        if info["fallback"]:
            self.fallbacks_ += 1
        self.nominal_ = plan
        return plan

    def reset(self) -> None:
        self.nominal_ = zero_plan(self.config)


def dubins_step_batch(dt: float):
    """Batched true-dynamics step function for planning with the analytic model."""
    from .dynamics import dubins_step_array

    def step(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return dubins_step_array(states, actions, dt)

    return step
