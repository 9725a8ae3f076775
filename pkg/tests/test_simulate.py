import io
import math

import numpy as np
import pytest

from skmc import network, simulate
from skmc.simulate import (Dataset, ObservationModel, SimulationExplosion,
                           cme_distribution, cme_transition_oracle,
                           euler_maruyama, eyam_dataset, gillespie,
                           gillespie_end_states, mjp_complete_loglik,
                           synthesize_dataset)


def pure_death():
    net, _, _ = network.builtin("immigration_death")
    return net, np.array([0.0, 1.0])


def test_gillespie_absorbing_state(rng):
    net, _, _ = network.builtin("sir")
    path = gillespie(net, [1.0, 1.0], [5, 0], 0.0, 10.0, rng)
    assert path.n_events == 0
    np.testing.assert_array_equal(path.end_state, [5, 0])


def test_gillespie_replay_and_loglik_finite(rng):
    net, c, x0 = network.builtin("immigration_death")
    for _ in range(200):
        path = gillespie(net, c, x0, 0.0, 2.0, rng)
        np.testing.assert_array_equal(path.replay(net), path.end_state)
        assert np.isfinite(mjp_complete_loglik(net, c, path))


def test_gillespie_pure_death_extinction_time(rng):
    # from x0 = 1 with rate 1 the extinction time is Exp(1): mean 1
    net, c = pure_death()
    n = 100_000
    total = 0.0
    for _ in range(n):
        path = gillespie(net, c, [1.0], 0.0, 50.0, rng)
        assert path.n_events == 1
        total += path.times[0]
    mean = total / n
    mcse = 1.0 / math.sqrt(n)   # sd of Exp(1) is 1
    assert abs(mean - 1.0) < 3 * mcse


def test_gillespie_explosion_guard(rng):
    net, c, x0 = network.builtin("lotka_volterra")
    with pytest.raises(SimulationExplosion):
        gillespie(net, c, x0, 0.0, 5.0, rng, max_events=10)


def test_euler_maruyama_zero_hazard_constant(rng):
    net, _, _ = network.builtin("sir")
    path = euler_maruyama(net, [1.0, 1.0], [5, 0], 0.0, 1.0, 0.1, rng=rng)
    assert np.all(path.states == np.array([5.0, 0.0]))


def test_euler_maruyama_scalar_hand_step():
    net, _, _ = network.builtin("immigration_death")
    kappa, death = 2.0, 0.5
    x0, dt, z = 7.0, 0.25, 0.83
    path = euler_maruyama(net, [kappa, death], [x0], 0.0, dt, dt,
                          normals=np.array([[z]]))
    expected = x0 + (kappa - death * x0) * dt + math.sqrt(
        (kappa + death * x0) * dt) * z
    assert abs(path.states[1, 0] - expected) < 1e-14


def test_euler_maruyama_deterministic_in_normals(rng):
    net, c, x0 = network.builtin("lotka_volterra")
    z = rng.standard_normal((10, 2))
    p1 = euler_maruyama(net, c, x0, 0.0, 1.0, 0.1, normals=z)
    p2 = euler_maruyama(net, c, x0, 0.0, 1.0, 0.1, normals=z)
    np.testing.assert_array_equal(p1.states, p2.states)


def test_euler_maruyama_dt_must_divide(rng):
    net, c, x0 = network.builtin("lotka_volterra")
    with pytest.raises(ValueError):
        euler_maruyama(net, c, x0, 0.0, 1.0, 0.3, rng=rng)


def test_euler_maruyama_refinement_consistency(rng):
    # halving-type refinement: mean of X1 at t=1 stable across step sizes
    net, c, x0 = network.builtin("lotka_volterra")
    n = 10_000
    means = []
    ses = []
    for dt in (0.1, 0.0125):
        m = int(round(1.0 / dt))
        z = rng.standard_normal((n, m, 2))
        end, _, status, _ = __import__("skmc._backend", fromlist=["kernels"]) \
            .kernels().cle_interval_batch(
                net.reactant_matrix, net._Sf, c,
                np.tile(np.asarray(x0, float), (n, 1)), z, dt, 0)
        assert not status.any()
        means.append(end[:, 0].mean())
        ses.append(end[:, 0].std(ddof=1) / math.sqrt(n))
    joint = math.hypot(*ses)
    assert abs(means[0] - means[1]) < 3 * joint


def test_synthesize_exact_observation(rng):
    net, c, x0 = network.builtin("sir")
    data = synthesize_dataset(net, [0.019, 3.2], x0, [0.0, 0.5, 1.0],
                              ObservationModel.exact(2), rng)
    np.testing.assert_array_equal(data.observations, data.latent_states)
    np.testing.assert_array_equal(data.x0, x0)


def test_synthesize_lv_protocol(rng):
    net, c, x0 = network.builtin("lotka_volterra")
    times = np.arange(0.0, 51.0)
    obs = ObservationModel.constant(np.eye(2), np.eye(2))
    data = synthesize_dataset(net, c, x0, times, obs, rng)
    assert data.observations.shape == (51, 2)
    resid = data.observations - data.latent_states
    assert abs(resid.std() - 1.0) < 0.15


def test_synthesize_aphid_partial_observation(rng):
    net, c, x0 = network.builtin("aphid")
    obs = ObservationModel.proportional(np.array([[1.0], [0.0]]), 0.2)
    data = synthesize_dataset(net, c, x0, np.arange(0.0, 8.0), obs, rng)
    assert data.observations.shape == (8, 1)
    # observation variance grows with the aphid count
    assert data.latent_states[:, 0].min() > 0


def test_proportional_noise_needs_positive_count(rng):
    net, _, _ = network.builtin("aphid")
    obs = ObservationModel.proportional(np.array([[1.0], [0.0]]), 0.2)
    with pytest.raises(ValueError):
        # death rate so high the population dies immediately
        synthesize_dataset(net, [1e-8, 50.0], [1, 1],
                           np.arange(0.0, 6.0), obs, rng)


def test_mjp_loglik_empty_path():
    net, c = pure_death()
    path = simulate.JumpPath(initial_state=np.array([3.0]), times=[],
                             reactions=[], t_start=0.0, t_end=2.0,
                             end_state=np.array([3.0]))
    # constant total hazard H = 3 c over [0, 2]
    assert mjp_complete_loglik(net, [0.0, 1.0], path) == pytest.approx(-6.0)


def test_mjp_loglik_single_death():
    net, c = pure_death()
    s = 0.7
    path = simulate.JumpPath(initial_state=np.array([1.0]), times=[s],
                             reactions=[1], t_start=0.0, t_end=3.0,
                             end_state=np.array([0.0]))
    cval = 1.3
    ll = mjp_complete_loglik(net, [0.0, cval], path)
    assert ll == pytest.approx(math.log(cval) - cval * s)


def test_mjp_loglik_integrates_to_one():
    # pure death from x0=1 over [0, T]: no-event mass + event-time density
    net, _ = pure_death()
    c = [0.0, 1.0]
    T = 0.8
    grid = np.linspace(1e-6, T, 2001)
    dens = []
    for s in grid:
        path = simulate.JumpPath(initial_state=np.array([1.0]), times=[s],
                                 reactions=[1], t_start=0.0, t_end=T,
                                 end_state=np.array([0.0]))
        dens.append(math.exp(mjp_complete_loglik(net, c, path)))
    empty = simulate.JumpPath(initial_state=np.array([1.0]), times=[],
                              reactions=[], t_start=0.0, t_end=T,
                              end_state=np.array([1.0]))
    total = np.trapezoid(dens, grid) + math.exp(mjp_complete_loglik(net, c, empty))
    assert abs(total - 1.0) < 1e-4


def test_mjp_loglik_zero_hazard_event():
    net, _ = pure_death()
    path = simulate.JumpPath(initial_state=np.array([0.0]), times=[0.5],
                             reactions=[1], t_start=0.0, t_end=1.0,
                             end_state=np.array([-1.0]))
    assert mjp_complete_loglik(net, [0.0, 1.0], path) == -np.inf


# ---------------------------------------------------------------------------
# CME oracle

def test_cme_identity_at_t0():
    net, c, _ = network.builtin("immigration_death")
    res = cme_transition_oracle(net, c, [30], 0.0)
    np.testing.assert_allclose(res.matrix, np.eye(31), atol=1e-12)


def test_cme_pure_death_extinction():
    net, _ = pure_death()
    res = cme_transition_oracle(net, [0.0, 1.0], [5], 1.0)
    start = res.index[(1,)]
    extinct = res.index[(0,)]
    assert res.matrix[start, extinct] == pytest.approx(1 - math.exp(-1), abs=1e-10)


def test_cme_rows_sum_to_one_minus_leak():
    net, c, _ = network.builtin("immigration_death")
    res = cme_transition_oracle(net, c, [25], 1.5)
    np.testing.assert_allclose(res.matrix.sum(axis=1), 1.0 - res.leak,
                               atol=1e-8)


def test_cme_state_cap():
    net, c, _ = network.builtin("sir")
    with pytest.raises(ValueError):
        cme_transition_oracle(net, c, [200, 200], 1.0)


def test_cme_vs_gillespie_pure_death(rng):
    net, _ = pure_death()
    c = [0.0, 1.0]
    res = cme_transition_oracle(net, c, [6], 0.7)
    start = res.index[(4,)]
    n = 100_000
    ends = gillespie_end_states(net, c, [4.0], 0.0, 0.7, n, rng)[:, 0]
    emp = np.bincount(ends.astype(int), minlength=7) / n
    tv = 0.5 * np.abs(emp - res.matrix[start]).sum()
    assert tv < 0.02


@pytest.mark.slow
def test_cme_vs_gillespie_lv_marginal(rng):
    net, c, x0 = network.builtin("lotka_volterra")
    n = 100_000
    ends = gillespie_end_states(net, c, x0, 0.0, 1.0, n, rng)
    states, probs, leak = cme_distribution(net, c, x0, 1.0, (260, 200))
    assert leak < 1e-3
    # marginal of X1
    x1 = states[:, 0].astype(int)
    marg = np.zeros(261)
    np.add.at(marg, x1, probs)
    emp = np.bincount(ends[:, 0].astype(int), minlength=261)[:261] / n
    tv = 0.5 * np.abs(emp - marg).sum()
    assert tv < 0.02


def test_cme_truncation_warning():
    net, c, _ = network.builtin("immigration_death")
    res = cme_transition_oracle(net, [20.0, 0.01], [5], 2.0)
    assert res.truncation_warning


# ---------------------------------------------------------------------------
# datasets

def test_eyam_dataset_values():
    data = eyam_dataset()
    np.testing.assert_array_equal(data.times, [0, 0.5, 1, 1.5, 2, 2.5, 3, 4])
    np.testing.assert_array_equal(data.observations[:, 0],
                                  [254, 235, 201, 153, 121, 110, 97, 83])
    np.testing.assert_array_equal(data.observations[:, 1],
                                  [7, 14, 22, 29, 20, 8, 8, 0])
    assert data.observation_model.kind == "exact"
    np.testing.assert_array_equal(data.x0, [254, 7])


def test_dataset_csv_round_trip(tmp_path, rng):
    net, c, x0 = network.builtin("lotka_volterra")
    obs = ObservationModel.constant(np.eye(2), np.eye(2))
    data = synthesize_dataset(net, c, x0, np.arange(0.0, 5.0), obs, rng)
    p = tmp_path / "data.csv"
    data.to_csv(str(p))
    back = Dataset.from_csv(str(p), obs, x0=x0)
    np.testing.assert_array_equal(back.times, data.times)
    np.testing.assert_array_equal(back.observations, data.observations)


def test_dataset_validation():
    obs = ObservationModel.constant(np.eye(1), [[1.0]])
    with pytest.raises(ValueError):
        Dataset(times=[0.0, 0.0], observations=[[1.0], [2.0]],
                observation_model=obs)
    with pytest.raises(ValueError):
        Dataset(times=[0.0, 1.0], observations=[[1.0]],
                observation_model=obs)


def test_observation_model_validation():
    with pytest.raises(ValueError):
        ObservationModel.constant(np.eye(2), [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError):
        ObservationModel.proportional(np.eye(2), 1.0)
    with pytest.raises(ValueError):
        ObservationModel.proportional(np.array([[1.0], [0.0]]), -1.0)


def test_exact_loglik_indicator():
    obs = ObservationModel.exact(2)
    assert obs.loglik([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert obs.loglik([3.0, 4.0], [3.0, 5.0]) == -np.inf
    lb = obs.loglik_batch(np.array([3.0, 4.0]),
                          np.array([[3.0, 4.0], [1.0, 4.0]]))
    assert lb[0] == 0.0 and lb[1] == -np.inf
