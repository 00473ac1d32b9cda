"""Streaming single-sample update mechanics for the ensemble model.

Combines four stabilizers so the model can learn from one transition at a
time without a replay buffer: sparse initialization and layer normalization
(network-side, configured on the ensemble itself), eligibility traces that
accumulate gradients over time, dynamic input/target scaling from running
moments, and a backtracking bound on every applied step.

The per-member update folds the current NLL gradient into the member's trace
and takes one Adam step along the trace; the Adam step size is halved (at
most ``max_shrinks`` times) until the loss increase on the current sample
stays within the bound ``kappa``. The model's normalization statistics track
the running moments so prediction and update always share one input space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    EnsembleDynamicsModel,
    Transition,
    _member_loss_and_grads,
    state_delta,
    state_features,
)
from .nn import AdamState, MlpParams, RunningMoments, adam_init, adam_step

logger = logging.getLogger(__name__)

SCALE_EPS = 1e-8


def trace_update(trace, gamma_lambda: float, grad):
    """Accumulating eligibility trace: ``z' = gamma_lambda * z + grad``.

    Accepts a single array or a list of arrays (parameter trees).
    """
    if not 0.0 <= gamma_lambda < 1.0:
        raise ValueError(f"gamma_lambda must be in [0, 1), got {gamma_lambda}")
    if isinstance(trace, np.ndarray):
        return gamma_lambda * trace + grad
    return [gamma_lambda * z + g for z, g in zip(trace, grad)]


def scaled(x, moments: RunningMoments, eps: float = SCALE_EPS) -> np.ndarray:
    """Standardize a sample by the running moments, with a floor on the std."""
    x = np.asarray(x, dtype=np.float64)
    return (x - moments.mean) / np.maximum(moments.std, eps)


def moments_from_stats(mean, std, count: int) -> RunningMoments:
    """Warm-start running moments from existing summary statistics."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    moments = RunningMoments(mean.shape[0])
    moments.count = int(count)
    moments.mean = mean.copy()
    moments._m2 = (std ** 2) * count
    return moments


@dataclass
class StreamXState:
    """Mutable per-model streaming-update state."""

    traces: list[list[np.ndarray]]
    adam_states: list[AdamState]
    obs_moments: RunningMoments
    target_moments: RunningMoments
    gamma_lambda: float = 0.9
    step_size: float = 1e-3
    shrink_factor: float = 0.5
    max_shrinks: int = 10
    kappa_scale: float = 2.0
    total_shrinks: int = 0
    skipped_updates: int = 0


def streamx_init(model: EnsembleDynamicsModel, gamma_lambda: float = 0.9,
                 step_size: float = 1e-3, kappa_scale: float = 2.0,
                 warm_start_count: int = 1000) -> StreamXState:
    """Build streaming state for a fitted ensemble.

    The running moments start from the model's frozen fit-time statistics
    (weighted as ``warm_start_count`` virtual samples) so early online scaling
    matches the space the members were trained in.
    """
    traces = [[np.zeros_like(a) for a in p.arrays()] for p in model.members_]
    adam_states = [adam_init(p, learning_rate=step_size) for p in model.members_]
    return StreamXState(
        traces=traces,
        adam_states=adam_states,
        obs_moments=moments_from_stats(model.in_mean_, model.in_std_,
                                       warm_start_count),
        target_moments=moments_from_stats(model.out_mean_, model.out_std_,
                                          warm_start_count),
        gamma_lambda=gamma_lambda,
        step_size=step_size,
        kappa_scale=kappa_scale,
    )


def streamx_update(model: EnsembleDynamicsModel, state: StreamXState,
                   t: Transition) -> None:
    """Streaming single-transition update of every ensemble member.

    Mutates both the model (parameters and normalization statistics) and the
    streaming state (traces, optimizer accumulators, moments, event counters).
    """
    x_raw = np.concatenate([state_features(t.s), t.a.as_array()])
    y_raw = state_delta(t.s.as_array()[None, :], t.s_next.as_array()[None, :])[0]

    state.obs_moments.update(x_raw)
    state.target_moments.update(y_raw)
    # Keep prediction-time normalization in lockstep with the update scaling.
    model.in_mean_ = state.obs_moments.mean.copy()
    model.in_std_ = np.maximum(state.obs_moments.std, SCALE_EPS)
    model.out_mean_ = state.target_moments.mean.copy()
    model.out_std_ = np.maximum(state.target_moments.std, SCALE_EPS)

    xn = scaled(x_raw, state.obs_moments)[None, :]
    yn = scaled(y_raw, state.target_moments)[None, :]

    for m, params in enumerate(model.members_):
        loss0, grads = _member_loss_and_grads(params, xn, yn)
        state.traces[m] = trace_update(state.traces[m], state.gamma_lambda,
                                       grads.arrays())
        trace_grads = _params_like(params, state.traces[m])
        candidate, state.adam_states[m] = adam_step(params, trace_grads,
                                                    state.adam_states[m])

        kappa = state.kappa_scale * abs(loss0)
        scale = 1.0
        accepted = False
        for shrink in range(state.max_shrinks + 1):
            trial = _blend(params, candidate, scale)
            loss1, _ = _member_loss_and_grads(trial, xn, yn)
            if loss1 - loss0 <= kappa:
                model.members_[m] = trial
                accepted = True
                break
            scale *= state.shrink_factor
            state.total_shrinks += 1
        if not accepted:
            state.skipped_updates += 1
            logger.warning("streaming update underflow for member %d; "
                           "no update applied", m)


def _params_like(params: MlpParams, arrays: list[np.ndarray]) -> MlpParams:
    n = params.spec.n_layers
    return MlpParams(params.spec, list(arrays[0::2][:n]), list(arrays[1::2][:n]))


def _blend(params: MlpParams, candidate: MlpParams, scale: float) -> MlpParams:
    """Interpolate between current and candidate parameters (step rescaling)."""
    if scale == 1.0:
        return candidate
    weights = [p + scale * (c - p) for p, c in zip(params.weights, candidate.weights)]
    biases = [p + scale * (c - p) for p, c in zip(params.biases, candidate.biases)]
    return MlpParams(params.spec, weights, biases)
