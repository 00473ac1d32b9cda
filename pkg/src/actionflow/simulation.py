"""World simulation and the non-episodic continual-learning loop.

The ground truth is the Dubins simulator with mid-task gain interventions on
the executed command: the intervention window opens once a configured
fraction of the track's waypoints has been reached and closes (reverting to
nominal gains) at a second fraction. The agent never observes the gains; it
only sees its own state stream.

Per step the loop plans with the current model, optionally transforms the
planned action while the misalignment monitor is raised, executes in the
gained simulator, records the model's one-step prediction loss, advances the
monitor on the planned-action prediction, and applies the method's online
update. Episodes are deterministic given (config, seed, artifacts).
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dynamics import (
    DEFAULT_DT,
    EnsembleDynamicsModel,
    Transition,
    UgvAction,
    UgvState,
    dubins_step,
)
from .flow import (
    ActionFlowTransformer,
    MisalignmentMonitor,
    monitor_step,
    state_diff,
    transform_action,
)
from .planning import CostSpec, MppiConfig, MppiPlanner, dubins_step_batch
from .streaming import StreamXState, streamx_init, streamx_update

TRACK_FORMAT = "track-map"
TRACK_VERSION = 1


class Method(str, Enum):
    AFM = "afm"
    AFM_DR = "afm_dr"
    ONLINE_PE = "online_pe"
    FROZEN_PE = "frozen_pe"
    STREAMX_PE = "streamx_pe"
    PHYSICS = "physics"


#: Methods that plan with the learned ensemble.
LEARNED_METHODS = (Method.AFM, Method.AFM_DR, Method.ONLINE_PE,
                   Method.FROZEN_PE, Method.STREAMX_PE)
#: Methods that apply per-step online updates.
UPDATING_METHODS = (Method.AFM, Method.AFM_DR, Method.ONLINE_PE,
                    Method.STREAMX_PE)
#: Methods that gate planned actions through the flow transformer.
TRANSFORMING_METHODS = (Method.AFM, Method.AFM_DR)


@dataclass(frozen=True)
class TrackMap:
    name: str
    waypoints: np.ndarray  # (n, 2) meters, visited in order
    reach_radius: float

    def __post_init__(self):
        wps = np.asarray(self.waypoints, dtype=np.float64)
        object.__setattr__(self, "waypoints", wps)
        if wps.ndim != 2 or wps.shape[1] != 2 or wps.shape[0] < 2:
            raise ValueError("a track needs at least two (x, y) waypoints")
        if np.any(np.linalg.norm(np.diff(wps, axis=0), axis=1) == 0):
            raise ValueError("consecutive waypoints must be distinct")
        if self.reach_radius <= 0:
            raise ValueError("reach_radius must be positive")

    @property
    def n_waypoints(self) -> int:
        return self.waypoints.shape[0]


def track_to_doc(track: TrackMap) -> dict:
    return {
        "format": TRACK_FORMAT,
        "version": TRACK_VERSION,
        "name": track.name,
        "reach_radius": track.reach_radius,
        "waypoints": track.waypoints.tolist(),
    }


def track_from_doc(doc: dict) -> TrackMap:
    if doc.get("format") != TRACK_FORMAT:
        raise ValueError(f"not a track-map document: format={doc.get('format')!r}")
    if doc.get("version") != TRACK_VERSION:
        raise ValueError(f"unsupported track version {doc.get('version')!r}")
    return TrackMap(doc["name"], np.asarray(doc["waypoints"]), doc["reach_radius"])


def load_track(path) -> TrackMap:
    return track_from_doc(json.loads(Path(path).read_text()))


def save_track(track: TrackMap, path) -> None:
    Path(path).write_text(json.dumps(track_to_doc(track)))


BUNDLED_TRACKS = ("oval", "chicane")


def bundled_track(name: str) -> TrackMap:
    """Load one of the tracks shipped with the package."""
    if name not in BUNDLED_TRACKS:
        raise ValueError(f"unknown bundled track {name!r}; "
                         f"available: {BUNDLED_TRACKS}")
    text = (importlib.resources.files("actionflow") / "tracks"
            / f"{name}.json").read_text()
    return track_from_doc(json.loads(text))


@dataclass(frozen=True)
class Scenario:
    """Gain intervention applied inside the waypoint-progress window."""

    v_gain: float
    omega_gain: float
    onset_fraction: float = 0.15
    revert_fraction: float = 0.80

    def __post_init__(self):
        if not 0.0 <= self.onset_fraction < self.revert_fraction <= 1.0:
            raise ValueError("need 0 <= onset < revert <= 1")


NOMINAL_GAINS = (1.0, 1.0)


def active_gains(scenario: Scenario, reached: int, total: int) -> tuple[float, float]:
    """Gains in force at the current waypoint progress."""
    if not 0 <= reached <= total:
        raise ValueError("reached must be in [0, total]")
    progress = reached / total
    if progress < scenario.onset_fraction or progress >= scenario.revert_fraction:
        return NOMINAL_GAINS
    return (scenario.v_gain, scenario.omega_gain)


def env_step(s: UgvState, a_cmd: UgvAction, gains: tuple[float, float],
             dt: float = DEFAULT_DT) -> UgvState:
    """Execute a command under the active gains (no re-clamping)."""
    v = gains[0] * a_cmd.v
    omega = gains[1] * a_cmd.omega
    return UgvState(
        s.x + v * math.cos(s.theta) * dt,
        s.y + v * math.sin(s.theta) * dt,
        s.theta + omega * dt,
    )


def waypoint_check(s: UgvState, wp, radius: float) -> bool:
    """True iff the state lies within the reach radius (boundary inclusive)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return math.hypot(s.x - wp[0], s.y - wp[1]) <= radius


@dataclass
class StreamXConfig:
    gamma_lambda: float = 0.9
    step_size: float = 1e-3
    kappa_scale: float = 2.0


@dataclass
class EpisodeConfig:
    method: Method
    track: TrackMap
    scenario: Scenario
    seed: int
    max_steps: int = 5000
    delta_m: float = 1.0
    dt: float = DEFAULT_DT
    ode_steps: int = 10
    regime_error_refresh: bool = False
    mppi: MppiConfig = field(default_factory=MppiConfig)
    cost_weights: tuple[float, float, float] = (1.0, 0.05, 10.0)
    streamx: StreamXConfig = field(default_factory=StreamXConfig)

    def __post_init__(self):
        self.method = Method(self.method)
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class EpisodeResult:
    success_rate: float
    steps: int
    reached: int
    total_waypoints: int
    loss_trace: np.ndarray
    flag_trace: np.ndarray
    gain_trace: np.ndarray
    waypoint_steps: list[int]
    trajectory: np.ndarray

    @property
    def completed(self) -> bool:
        return self.reached == self.total_waypoints


def _validate_artifacts(method: Method,
                        dynamics: EnsembleDynamicsModel | None,
                        transformer: ActionFlowTransformer | None) -> None:
    if method in LEARNED_METHODS and dynamics is None:
        raise ValueError(f"method {method.value!r} requires a dynamics model")
    if method in TRANSFORMING_METHODS and transformer is None:
        raise ValueError(f"method {method.value!r} requires an action transformer")
    if method is Method.STREAMX_PE and not dynamics.layer_norm:
        raise ValueError("streamx_pe requires a layer-normalized ensemble "
                        "(train the dynamics model with --streamx)")


def run_episode(config: EpisodeConfig,
                dynamics: EnsembleDynamicsModel | None = None,
                transformer: ActionFlowTransformer | None = None) -> EpisodeResult:
    """Run one continual-learning episode; see the module docstring for the
    per-step protocol.

    The dynamics model is deep-copied so successive episodes never share
    mutable state; the transformer is read-only.
    """
    method = Method(config.method)
    _validate_artifacts(method, dynamics, transformer)
    model = dynamics.copy() if method in LEARNED_METHODS else None

    track = config.track
    waypoints = track.waypoints
    total = track.n_waypoints
    rng = np.random.default_rng(config.seed)

    heading = math.atan2(waypoints[1][1] - waypoints[0][1],
                         waypoints[1][0] - waypoints[0][0])
    s = UgvState(waypoints[0][0], waypoints[0][1], heading)

    if method is Method.PHYSICS:
        step_batch = dubins_step_batch(config.dt)
        predict = lambda st, a: dubins_step(st, a, config.dt)
    else:
        step_batch = model.predict_state_array
        predict = model.predict_state

    planner = MppiPlanner(step_batch, config.mppi)
    monitor = MisalignmentMonitor(delta_m=config.delta_m,
                                  refresh=config.regime_error_refresh)
    sx_state: StreamXState | None = None
    if method is Method.STREAMX_PE:
        sx_state = streamx_init(model, gamma_lambda=config.streamx.gamma_lambda,
                                step_size=config.streamx.step_size,
                                kappa_scale=config.streamx.kappa_scale)

    reached = 0
    waypoint_steps: list[int] = []
    while reached < total and waypoint_check(s, waypoints[reached],
                                             track.reach_radius):
        reached += 1
        waypoint_steps.append(0)

    w_dist, w_ctrl, w_term = config.cost_weights
    losses, flags, gains_log = [], [], []
    trajectory = [s.as_array()]
    steps_taken = config.max_steps

    for step in range(config.max_steps):
        target = waypoints[reached]
        cost = CostSpec(goal=(target[0], target[1]), w_dist=w_dist,
                        w_ctrl=w_ctrl, w_term=w_term)
        a0 = planner.plan(s, cost, rng).first_action

        if method in TRANSFORMING_METHODS and monitor.flag:
            a_exec = transform_action(transformer, s, a0, monitor.regime_error,
                                      config.ode_steps)
        else:
            a_exec = a0

        gains = active_gains(config.scenario, reached, total)
        s_next = env_step(s, a_exec, gains, config.dt)

        pred_exec = predict(s, a_exec)
        losses.append(float(np.linalg.norm(state_diff(s_next, pred_exec))))
        pred_plan = pred_exec if a_exec is a0 else predict(s, a0)
        monitor = monitor_step(monitor, pred_plan, s_next)

        if method in (Method.AFM, Method.AFM_DR, Method.ONLINE_PE):
            model.online_update(Transition(s, a_exec, s_next))
        elif method is Method.STREAMX_PE:
            streamx_update(model, sx_state, Transition(s, a_exec, s_next))

        flags.append(monitor.flag)
        gains_log.append(gains)
        trajectory.append(s_next.as_array())
        s = s_next

        while reached < total and waypoint_check(s, waypoints[reached],
                                                 track.reach_radius):
            reached += 1
            waypoint_steps.append(step + 1)
        if reached == total:
            steps_taken = step + 1
            break

    return EpisodeResult(
        success_rate=reached / total,
        steps=steps_taken,
        reached=reached,
        total_waypoints=total,
        loss_trace=np.asarray(losses),
        flag_trace=np.asarray(flags, dtype=bool),
        gain_trace=np.asarray(gains_log),
        waypoint_steps=waypoint_steps,
        trajectory=np.asarray(trajectory),
    )
