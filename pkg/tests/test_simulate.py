import math

import numpy as np
import pytest

from ctbn.model import Graph, ModelError, NetworkModel, StateSpace, config_index, glauber_cim
from ctbn.simulate import (
    ExpressionNoise,
    GaussianNoise,
    Noiseless,
    ObservationSet,
    Trajectory,
    estimate_basal,
    expression_likelihood,
    gaussian_likelihood,
    gillespie_sample,
    load_observations,
    load_trajectory,
    make_observations,
    save_observations,
    save_trajectory,
    substream,
)
from tests.test_model import glauber_chain, single_node_model


class TestGillespie:
    def test_zero_rates_absorbing(self):
        model = NetworkModel(StateSpace((2,)), Graph(1, ()), (np.zeros((1, 2, 2)),))
        traj = gillespie_sample(model, (0,), 5.0, rng=0)
        assert traj.n_events == 0
        assert traj.horizon == 5.0

    def test_mean_dwell_time(self):
        # flip rate 2 -> dwell mean 0.5; 10k events pin it within 0.02
        model = single_node_model(2.0, 2.0)
        traj = gillespie_sample(model, (0,), 5500.0, rng=7)
        assert traj.n_events > 10000
        dwells = np.diff(np.concatenate([[0.0], traj.times]))[:10000]
        assert abs(dwells.mean() - 0.5) < 0.02

    def test_determinism(self):
        model = glauber_chain(3)
        a = gillespie_sample(model, (0, 1, 0), 20.0, rng=42)
        b = gillespie_sample(model, (0, 1, 0), 20.0, rng=42)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.nodes, b.nodes)
        assert np.array_equal(a.values, b.values)

    def test_event_validity(self):
        model = glauber_chain(3)
        traj = gillespie_sample(model, (0, 0, 0), 10.0, rng=1)
        assert np.all(np.diff(traj.times) > 0)
        assert traj.times[0] > 0 and traj.times[-1] < 10.0
        # every event changes the named node to a different value
        state = np.array(traj.initial_state)
        for t, n, v in zip(traj.times, traj.nodes, traj.values):
            assert state[n] != v
            state[n] = v

    def test_conditional_exit_rates_match_cim(self):
        # empirical dwell means per (node, parent config, state) vs 1/rate
        model = glauber_chain(2, a=2.0, b=0.8)
        traj = gillespie_sample(model, (0, 0), 4000.0, rng=3)
        space, graph = model.space, model.graph
        samples = {}
        state = np.array(traj.initial_state)
        t_prev = 0.0
        for t, n, v in zip(traj.times, traj.nodes, traj.values):
            for i in range(2):
                u = config_index(space, graph, i, tuple(state[p] for p in graph.parents(i)))
                samples.setdefault((i, u, state[i]), [])
            # only the jumping node's dwell actually ended; approximate check
            u = config_index(space, graph, n, tuple(state[p] for p in graph.parents(n)))
            samples.setdefault((n, u, state[n]), []).append(t - t_prev)
            state[n] = v
            t_prev = t
        checked = 0
        for (n, u, x), dw in samples.items():
            if len(dw) < 200:
                continue
            rate = -model.cims[n][u, x, x]
            mean = np.mean(dw)
            se = np.std(dw, ddof=1) / math.sqrt(len(dw))
            # competing node clocks shorten observed inter-event gaps, so only
            # require the right order of magnitude band
            assert mean < 1.0 / rate + 4 * se
            checked += 1
        assert checked >= 2


class TestObservations:
    def test_sigma_zero_like_noiseless(self):
        model = glauber_chain(2)
        traj = gillespie_sample(model, (0, 1), 10.0, rng=5)
        obs = make_observations(traj, model.space, Noiseless(), count=10, rng=9)
        states = traj.states_at(obs.times)
        for i in range(obs.n_obs):
            expected = 2 * states[i, obs.nodes[i]] - 1
            assert obs.values[i] == expected

    def test_gaussian_sampling_stats(self):
        rng = substream(11, 0)
        noise = GaussianNoise(0.8)
        vals = np.array([noise.sample(rng, 2, 1) for _ in range(10000)])
        assert abs(vals.mean() - 1.0) < 0.03
        assert abs(vals.std() - 0.8) < 0.03

    def test_count_contract(self):
        model = glauber_chain(3)
        traj = gillespie_sample(model, (0, 0, 0), 10.0, rng=2)
        obs = make_observations(traj, model.space, GaussianNoise(0.2), count=10, rng=4)
        assert obs.n_obs == 30
        assert len(obs.unique_times()) == 10
        for t in obs.unique_times():
            assert sorted(obs.nodes[obs.times == t]) == [0, 1, 2]

    def test_pure_function_of_inputs(self):
        model = glauber_chain(2)
        traj = gillespie_sample(model, (0, 1), 10.0, rng=5)
        a = make_observations(traj, model.space, GaussianNoise(0.5), count=7, rng=13)
        b = make_observations(traj, model.space, GaussianNoise(0.5), count=7, rng=13)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.values, b.values)

    def test_times_outside_horizon_rejected(self):
        model = glauber_chain(2)
        traj = gillespie_sample(model, (0, 1), 1.0, rng=5)
        with pytest.raises(ModelError):
            make_observations(traj, model.space, Noiseless(), times=[0.5, 1.5])


class TestGaussianLikelihood:
    def test_peak(self):
        sigma = 0.8
        assert gaussian_likelihood(1.0, 1, sigma) == pytest.approx(
            1.0 / (sigma * math.sqrt(2 * math.pi))
        )

    def test_symmetry_at_zero(self):
        assert gaussian_likelihood(0.0, 0, 0.8) == pytest.approx(
            gaussian_likelihood(0.0, 1, 0.8)
        )

    def test_value(self):
        # N(0.5; mean 1, var 0.64) evaluated directly
        expected = math.exp(-0.5 * (0.5 - 1.0) ** 2 / 0.64) / math.sqrt(2 * math.pi * 0.64)
        assert gaussian_likelihood(0.5, 1, 0.8) == pytest.approx(expected)
        assert expected == pytest.approx(0.4104, abs=1e-3)

    def test_sigma_positive(self):
        with pytest.raises(ModelError):
            gaussian_likelihood(0.0, 0, 0.0)

    def test_log_likelihood_consistent(self):
        noise = GaussianNoise(0.7)
        ll = noise.log_likelihood(0, 2, 0.3)
        assert math.exp(ll[1]) == pytest.approx(gaussian_likelihood(0.3, 1, 0.7))


class TestExpressionLikelihood:
    def test_basal_is_even_split(self):
        assert expression_likelihood(2.0, 2.0, 1.0) == pytest.approx((0.5, 0.5))

    def test_limits(self):
        over, under = expression_likelihood(100.0, 0.0, 1.0)
        assert over == pytest.approx(1.0)
        assert under == pytest.approx(0.0, abs=1e-12)

    def test_standard_normal_cdf_value(self):
        over, under = expression_likelihood(1.0, 0.0, 1.0)
        expected = 0.5 * (1 + math.erf(1.0 / math.sqrt(2)))
        assert over == pytest.approx(expected, abs=1e-12)
        assert over == pytest.approx(0.8413, abs=5e-5)
        assert under == pytest.approx(1 - expected, abs=1e-12)

    def test_pair_sums_to_one(self):
        for y in np.linspace(-3, 7, 23):
            over, under = expression_likelihood(y, 1.7, 0.9)
            assert over + under == 1.0

    def test_model_class(self):
        noise = ExpressionNoise((1.0,), (0.5,))
        ll = noise.log_likelihood(0, 2, 1.0)
        assert np.exp(ll) == pytest.approx([0.5, 0.5])


class TestEstimateBasal:
    def test_mean(self):
        mu, _ = estimate_basal([1.0, 1.0, 1.0, 3.0])
        assert mu == pytest.approx(1.5)

    def test_constant_data_errors(self):
        with pytest.raises(ModelError):
            estimate_basal([2.0, 2.0, 2.0])

    def test_two_point(self):
        mu, sd = estimate_basal([0.0, 2.0])
        assert mu == pytest.approx(1.0)
        assert sd == pytest.approx(math.sqrt(2.0))

    def test_too_few(self):
        with pytest.raises(ModelError):
            estimate_basal([1.0])


class TestFiles:
    def test_trajectory_round_trip(self, tmp_path):
        model = glauber_chain(3)
        traj = gillespie_sample(model, (0, 1, 0), 10.0, rng=21)
        path = tmp_path / "traj.csv"
        save_trajectory(traj, path)
        loaded = load_trajectory(path)
        assert loaded.initial_state == traj.initial_state
        assert loaded.horizon == traj.horizon
        assert np.array_equal(loaded.times, traj.times)
        assert np.array_equal(loaded.nodes, traj.nodes)
        assert np.array_equal(loaded.values, traj.values)

    def test_observation_round_trip(self, tmp_path):
        model = glauber_chain(2)
        traj = gillespie_sample(model, (0, 1), 10.0, rng=5)
        obs = make_observations(traj, model.space, GaussianNoise(0.42), count=6, rng=8)
        path = tmp_path / "obs.csv"
        save_observations(obs, path)
        loaded = load_observations(path)
        assert np.array_equal(loaded.times, obs.times)
        assert np.array_equal(loaded.values, obs.values)
        assert loaded.noise == obs.noise
        assert loaded.horizon == obs.horizon

    def test_expression_metadata_round_trip(self, tmp_path):
        obs = ObservationSet(
            np.array([0.5, 1.0]),
            np.array([0, 0]),
            np.array([1.2, 0.7]),
            2.0,
            ExpressionNoise((1.0,), (0.3,)),
        )
        path = tmp_path / "obs.csv"
        save_observations(obs, path)
        loaded = load_observations(path)
        assert loaded.noise == obs.noise
