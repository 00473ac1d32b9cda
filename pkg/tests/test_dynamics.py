import math

import numpy as np
import pytest

from actionflow.base import NotFittedError
from actionflow.dynamics import (
    ACTION_BOUNDS,
    EnsembleDynamicsModel,
    Transition,
    UgvAction,
    UgvState,
    dubins_step,
    dubins_step_array,
    generate_dynamics_dataset,
    state_delta,
    state_features,
    train_initial_dynamics,
    wrap_angle,
)


class TestWrapAngle:
    def test_interval_is_half_open_at_minus_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)

    def test_random_angles_stay_in_range(self):
        rng = np.random.default_rng(0)
        thetas = rng.uniform(-50, 50, size=1000)
        wrapped = wrap_angle(thetas)
        assert np.all(wrapped > -np.pi)
        assert np.all(wrapped <= np.pi)
        np.testing.assert_allclose(np.cos(wrapped), np.cos(thetas), atol=1e-9)
        np.testing.assert_allclose(np.sin(wrapped), np.sin(thetas), atol=1e-9)


class TestTypes:
    def test_action_clamped_on_construction(self):
        a = UgvAction(3.0, -5.0)
        assert a.v == 1.0
        assert a.omega == -math.pi / 2

    def test_state_theta_wrapped(self):
        s = UgvState(0.0, 0.0, 3 * math.pi)
        assert s.theta == pytest.approx(math.pi)

    def test_non_finite_state_rejected(self):
        with pytest.raises(ValueError):
            UgvState(np.nan, 0.0, 0.0)


class TestDubins:
    def test_straight_motion(self):
        s = dubins_step(UgvState(0, 0, 0), UgvAction(1.0, 0.0), dt=0.1)
        assert (s.x, s.y, s.theta) == pytest.approx((0.1, 0.0, 0.0))

    def test_heading_alignment(self):
        s = dubins_step(UgvState(0, 0, math.pi / 2), UgvAction(1.0, 0.0), dt=0.1)
        assert s.x == pytest.approx(0.0, abs=1e-12)
        assert s.y == pytest.approx(0.1)
        assert s.theta == pytest.approx(math.pi / 2)

    def test_one_euler_step_by_hand(self):
        s = dubins_step(UgvState(0, 0, 0), UgvAction(0.5, math.pi / 2), dt=0.1)
        assert s.x == pytest.approx(0.05)
        assert s.y == pytest.approx(0.0, abs=1e-12)
        assert s.theta == pytest.approx(math.pi / 20)

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError):
            dubins_step(UgvState(0, 0, 0), UgvAction(1, 0), dt=0.0)

    def test_translation_invariance(self):
        # Stepping a translated state equals translating the stepped state.
        # Heading is untouched by translation so it must match bit-exactly;
        # positions match to rounding of the reassociated additions.
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, y, theta = rng.uniform(-5, 5, size=3)
            c1, c2 = rng.uniform(-100, 100, size=2)
            a = UgvAction(*rng.uniform(ACTION_BOUNDS[:, 0], ACTION_BOUNDS[:, 1]))
            base = dubins_step(UgvState(x, y, theta), a)
            moved = dubins_step(UgvState(x + c1, y + c2, theta), a)
            assert moved.x == pytest.approx(base.x + c1, abs=1e-12)
            assert moved.y == pytest.approx(base.y + c2, abs=1e-12)
            assert moved.theta == base.theta

    def test_array_step_matches_scalar(self):
        rng = np.random.default_rng(2)
        states = rng.uniform(-3, 3, size=(10, 3))
        actions = rng.uniform(-1, 1, size=(10, 2))
        batch = dubins_step_array(states, actions, dt=0.1)
        for i in range(10):
            s = dubins_step(UgvState(*states[i]), UgvAction(*actions[i]), dt=0.1)
            np.testing.assert_allclose(batch[i], s.as_array(), atol=1e-12)


class TestStateFeatures:
    @pytest.mark.parametrize("theta,expected", [
        (0.0, (1.0, 0.0)),
        (math.pi / 2, (0.0, 1.0)),
        (math.pi / 4, (math.sqrt(2) / 2, math.sqrt(2) / 2)),
    ])
    def test_examples(self, theta, expected):
        np.testing.assert_allclose(state_features(UgvState(0, 0, theta)),
                                   expected, atol=1e-12)


class TestDataset:
    def test_shapes_and_bounds(self):
        X, y = generate_dynamics_dataset(500, np.random.default_rng(3))
        assert X.shape == (500, 4)
        assert y.shape == (500, 3)
        assert np.all(X[:, 2] >= -1) and np.all(X[:, 2] <= 1)
        assert np.all(np.abs(X[:, 3]) <= math.pi / 2)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            generate_dynamics_dataset(0, np.random.default_rng(0))

    def test_noise_free_targets_match_dubins(self):
        X, y = generate_dynamics_dataset(100, np.random.default_rng(4), dt=0.1)
        v, omega = X[:, 2], X[:, 3]
        np.testing.assert_allclose(y[:, 0], v * X[:, 0] * 0.1, atol=1e-12)
        np.testing.assert_allclose(y[:, 1], v * X[:, 1] * 0.1, atol=1e-12)
        np.testing.assert_allclose(y[:, 2], omega * 0.1, atol=1e-12)

    def test_action_noise_perturbs_targets_not_inputs(self):
        rng_a = np.random.default_rng(5)
        rng_b = np.random.default_rng(5)
        X0, y0 = generate_dynamics_dataset(200, rng_a, action_noise_frac=0.0)
        X1, y1 = generate_dynamics_dataset(200, rng_b, action_noise_frac=0.1)
        np.testing.assert_allclose(X0, X1)  # same commanded actions registered
        assert not np.allclose(y0, y1)
        # Perturbation is at most +-10% of the noise-free delta.
        assert np.max(np.abs(y1 - y0)) <= 0.1 * np.max(np.abs(y0)) + 1e-9


def _identity_norm(dim_in=4, dim_out=3):
    return {
        "in_mean": np.zeros(dim_in), "in_std": np.ones(dim_in),
        "out_mean": np.zeros(dim_out), "out_std": np.ones(dim_out),
    }


def make_constant_ensemble(deltas, log_var=0.0, hidden_units=4):
    """Ensemble whose members always emit the given per-member mean deltas."""
    model = EnsembleDynamicsModel(n_members=len(deltas), hidden_units=hidden_units,
                                  random_state=0)
    spec = model._spec()
    members = []
    for d in deltas:
        params_rng = np.random.default_rng(0)
        from actionflow.nn import init_params
        p = init_params(spec, params_rng)
        for w in p.weights:
            w[:] = 0.0
        for b in p.biases:
            b[:] = 0.0
        p.biases[-1][:3] = d
        p.biases[-1][3:] = log_var
        members.append(p)
    model._init_state(members, _identity_norm())
    return model


class TestEnsemblePredict:
    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            EnsembleDynamicsModel().predict(np.zeros((1, 4)))

    def test_zero_delta_members_leave_state_unchanged(self):
        model = make_constant_ensemble([np.zeros(3)] * 5)
        s = UgvState(1.5, -2.0, 0.7)
        out = model.predict_state(s, UgvAction(0.3, 0.1))
        assert (out.x, out.y, out.theta) == (s.x, s.y, s.theta)

    def test_identical_members_equal_single_member(self):
        d = np.array([0.2, -0.1, 0.05])
        five = make_constant_ensemble([d] * 5)
        one = make_constant_ensemble([d])
        X = np.array([[1.0, 0.0, 0.5, 0.2]])
        np.testing.assert_allclose(five.predict(X), one.predict(X))

    def test_member_mean_is_arithmetic_mean(self):
        deltas = [np.array([dx, 0.0, 0.0]) for dx in (0.1, 0.2, 0.3, 0.4, 0.5)]
        model = make_constant_ensemble(deltas)
        pred = model.predict(np.array([[1.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(pred[0], [0.3, 0.0, 0.0], atol=1e-12)

    def test_predict_deterministic(self):
        model = make_constant_ensemble([np.array([0.1, 0.0, 0.0])] * 3)
        X = np.array([[0.5, 0.5, 0.3, -0.2]])
        assert model.predict(X).tobytes() == model.predict(X).tobytes()


class TestEnsembleTraining:
    def test_desk_training_beats_error_budget(self):
        rng = np.random.default_rng(6)
        model = train_initial_dynamics(n_samples=3000, rng=rng, hidden_units=48,
                                       max_epochs=20)
        X_hold, y_hold = generate_dynamics_dataset(1000, np.random.default_rng(7))
        pred = model.predict(X_hold)
        err = np.linalg.norm(pred - y_hold, axis=1).mean()
        assert err < 0.05 * 0.1 * 1.0  # 5% of the max per-step displacement

    def test_same_seed_reproduces_parameters(self):
        X, y = generate_dynamics_dataset(400, np.random.default_rng(8))
        kwargs = dict(n_members=2, hidden_units=8, max_epochs=3, random_state=42)
        a = EnsembleDynamicsModel(**kwargs).fit(X, y)
        b = EnsembleDynamicsModel(**kwargs).fit(X, y)
        for pa, pb in zip(a.members_, b.members_):
            for wa, wb in zip(pa.arrays(), pb.arrays()):
                np.testing.assert_array_equal(wa, wb)

    def test_snapshot_round_trip(self, tmp_path):
        X, y = generate_dynamics_dataset(300, np.random.default_rng(9))
        model = EnsembleDynamicsModel(n_members=2, hidden_units=8, max_epochs=2,
                                      random_state=0).fit(X, y)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = EnsembleDynamicsModel.load(path)
        np.testing.assert_array_equal(loaded.predict(X[:5]), model.predict(X[:5]))
        for pa, pb in zip(model.members_, loaded.members_):
            for wa, wb in zip(pa.arrays(), pb.arrays()):
                np.testing.assert_array_equal(wa, wb)


class TestOnlineUpdate:
    def test_repeated_transition_reduces_nll(self):
        X, y = generate_dynamics_dataset(400, np.random.default_rng(10))
        model = EnsembleDynamicsModel(n_members=2, hidden_units=16, max_epochs=3,
                                      random_state=1).fit(X, y)
        s = UgvState(0, 0, 0.3)
        # A transition the nominal model is wrong about (inverted velocity).
        s_next = dubins_step(s, UgvAction(-0.8, 0.2))
        t = Transition(s, UgvAction(0.8, 0.2), s_next)
        Xt = np.concatenate([state_features(s), t.a.as_array()])[None, :]
        yt = state_delta(s.as_array()[None, :], s_next.as_array()[None, :])
        before = model.member_nll(Xt, yt)
        for _ in range(10):
            model.online_update(t)
        after = model.member_nll(Xt, yt)
        assert after < before

    def test_exact_prediction_with_clamped_logvar_is_noop(self):
        model = make_constant_ensemble([np.array([0.25, 0.0, 0.0])] * 2,
                                       log_var=-20.0)
        s = UgvState(0, 0, 0)
        t = Transition(s, UgvAction(0.5, 0.0),
                       UgvState(0.25, 0.0, 0.0))  # delta equals member output
        before = [a.copy() for p in model.members_ for a in p.arrays()]
        model.online_update(t)
        after = [a for p in model.members_ for a in p.arrays()]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_update_consumes_exactly_one_transition(self, monkeypatch):
        model = make_constant_ensemble([np.zeros(3)] * 2)
        seen = []
        original = EnsembleDynamicsModel.partial_fit

        def spy(self, X, y):
            seen.append((np.array(X), np.array(y)))
            return original(self, X, y)

        monkeypatch.setattr(EnsembleDynamicsModel, "partial_fit", spy)
        t = Transition(UgvState(0, 0, 0), UgvAction(0.5, 0.1),
                       UgvState(0.05, 0.0, 0.01))
        model.online_update(t)
        assert len(seen) == 1
        assert seen[0][0].shape == (1, 4)
        assert seen[0][1].shape == (1, 3)
