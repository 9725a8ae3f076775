import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skmc import network
from skmc.network import NetworkError, ReactionNetwork


def test_sir_matrices_and_hazard():
    net, c, x0 = network.builtin("sir")
    assert np.array_equal(net.stoichiometry, [[-1, 0], [1, -1]])
    np.testing.assert_allclose(net.hazard([1, 1], [2, 3]), [6.0, 3.0])
    assert np.array_equal(x0, [254, 7])


def test_lv_matrices_defaults_and_hazard():
    net, c, x0 = network.builtin("lotka_volterra")
    assert np.array_equal(net.stoichiometry, [[1, -1, 0], [0, 1, -1]])
    np.testing.assert_allclose(c, [0.5, 0.0025, 0.3])
    assert np.array_equal(x0, [100, 100])
    np.testing.assert_allclose(net.hazard(c, [100, 100]), [50.0, 25.0, 30.0])


def test_aphid_matrices_and_defaults():
    net, c, x0 = network.builtin("aphid")
    assert np.array_equal(net.stoichiometry, [[1, -1], [1, 0]])
    np.testing.assert_allclose(c, [1.75, 0.001])
    assert np.array_equal(x0, [5, 5])
    # hazard (c1 x1, c2 x1 x2)
    np.testing.assert_allclose(net.hazard(c, [10, 20]),
                               [1.75 * 10, 0.001 * 10 * 20])


def test_unknown_builtin():
    with pytest.raises(NetworkError):
        network.builtin("brusselator")


def test_hazard_vanishes_on_consumed_species():
    for model in network.BUILTIN_IDS:
        net, c, _ = network.builtin(model)
        x = np.zeros(net.n_species)
        h = net.hazard(np.ones(net.n_reactions), x)
        for i in range(net.n_reactions):
            if net.reactant_matrix[i].sum() > 0:
                assert h[i] == 0.0


def test_hazard_dimension_mismatch():
    net, c, _ = network.builtin("sir")
    with pytest.raises(NetworkError):
        net.hazard(c, [1, 2, 3])
    with pytest.raises(NetworkError):
        net.hazard([1.0], [1, 2])


def test_stoichiometry_derived_from_A_B():
    net = ReactionNetwork(("A", "B"), [[2, 0], [0, 1]], [[0, 1], [1, 0]])
    assert np.array_equal(net.stoichiometry, (net.product_matrix
                                              - net.reactant_matrix).T)
    with pytest.raises(NetworkError):
        ReactionNetwork(("A",), [[-1]], [[1]])


def test_jacobian_sir_closed_form():
    net, _, _ = network.builtin("sir")
    c = np.array([0.3, 1.7])
    eta = np.array([11.0, 4.0])
    expected = np.array([[-c[0] * eta[1], -c[0] * eta[0]],
                         [c[0] * eta[1], c[0] * eta[0] - c[1]]])
    np.testing.assert_allclose(net.jacobian_F(c, eta), expected, atol=1e-12)


def test_jacobian_lv_at_origin():
    net, _, _ = network.builtin("lotka_volterra")
    np.testing.assert_allclose(net.jacobian_F([1, 1, 1], [0, 0]),
                               [[1, 0], [0, -1]], atol=1e-14)


@pytest.mark.parametrize("model", network.BUILTIN_IDS)
def test_jacobian_matches_finite_differences(model, rng):
    net, c, x0 = network.builtin(model)
    for _ in range(5):
        eta = x0 * rng.uniform(0.5, 1.5, size=net.n_species) + 0.7
        F = net.jacobian_F(c, eta)
        h = 1e-5
        fd = np.empty_like(F)
        for j in range(net.n_species):
            ep = eta.copy()
            em = eta.copy()
            ep[j] += h
            em[j] -= h
            fd[:, j] = (net.drift(c, ep) - net.drift(c, em)) / (2 * h)
        scale = np.max(np.abs(fd)) + 1.0
        assert np.max(np.abs(F - fd)) / scale < 1e-6


def test_diffusion_sir_value():
    net, _, _ = network.builtin("sir")
    np.testing.assert_allclose(net.diffusion_beta([1, 1], [2, 3]),
                               [[6, -6], [-6, 9]])


def test_diffusion_zero_hazard():
    net, _, _ = network.builtin("sir")
    beta = net.diffusion_beta([1, 1], [5, 0])
    np.testing.assert_array_equal(beta, np.zeros((2, 2)))


@pytest.mark.parametrize("model", network.BUILTIN_IDS)
def test_diffusion_symmetric_psd(model, rng):
    net, c, x0 = network.builtin(model)
    for _ in range(100):
        x = rng.uniform(0, 2, size=net.n_species) * (x0 + 1)
        beta = net.diffusion_beta(c, x)
        np.testing.assert_allclose(beta, beta.T, atol=1e-15)
        assert np.linalg.eigvalsh(beta).min() >= -1e-12


def _hand_drift(model, c, x):
    if model == "sir":
        return np.array([-c[0] * x[0] * x[1],
                         c[0] * x[0] * x[1] - c[1] * x[1]])
    if model == "lotka_volterra":
        return np.array([c[0] * x[0] - c[1] * x[0] * x[1],
                         c[1] * x[0] * x[1] - c[2] * x[1]])
    if model == "aphid":
        return np.array([c[0] * x[0] - c[1] * x[0] * x[1], c[0] * x[0]])
    if model == "immigration_death":
        return np.array([c[0] - c[1] * x[0]])
    raise AssertionError(model)


@pytest.mark.parametrize("model", network.BUILTIN_IDS)
def test_drift_matches_hand_written(model, rng):
    net, c, x0 = network.builtin(model)
    for _ in range(1000):
        x = rng.integers(0, 200, size=net.n_species).astype(float)
        # identical up to round-off of the cancelling hazard terms
        np.testing.assert_allclose(net.drift(c, x), _hand_drift(model, c, x),
                                   rtol=1e-13, atol=1e-9)


def test_negative_state_hazard_clamped():
    net, c, _ = network.builtin("lotka_volterra")
    h = net.hazard(c, [-3.0, 5.0])
    assert (h >= 0).all()
    beta = net.diffusion_beta(c, [-3.0, 5.0])
    assert np.linalg.eigvalsh(beta).min() >= -1e-12


@given(x=st.lists(st.integers(min_value=0, max_value=10 ** 6),
                  min_size=2, max_size=2))
@settings(max_examples=50, deadline=None)
def test_hazard_nonnegative_on_integer_states(x):
    net, c, _ = network.builtin("lotka_volterra")
    assert (net.hazard(c, np.asarray(x, dtype=float)) >= 0).all()


def test_falling_factorial_general_order():
    # C(x, 2) = x(x-1)/2 with first and second derivatives
    val, d1, d2 = network.falling_factorial_terms(5.0, 2)
    assert val == 10.0 and d1 == 4.5 and d2 == 1.0
    # real-valued argument (CLE case)
    val, _, _ = network.falling_factorial_terms(2.5, 2)
    assert val == pytest.approx(2.5 * 1.5 / 2)


MODEL_TEXT = """\
# two-species toy
species: X1 X2
X1 + X2 -> 2 X2 @ c1
X2 -> 0 @ c2
"""


def test_parse_model_text_matches_sir():
    net = network.parse_model_text(MODEL_TEXT)
    ref, _, _ = network.builtin("sir")
    assert np.array_equal(net.stoichiometry, ref.stoichiometry)
    assert np.array_equal(net.reactant_matrix, ref.reactant_matrix)
    assert net.rate_names == ("c1", "c2")


def test_model_text_round_trip():
    net = network.parse_model_text(MODEL_TEXT)
    again = network.parse_model_text(network.format_model_text(net))
    assert np.array_equal(net.reactant_matrix, again.reactant_matrix)
    assert np.array_equal(net.product_matrix, again.product_matrix)
    assert net.species_names == again.species_names


@pytest.mark.parametrize("bad", [
    "species: X1\nX2 -> X1 @ c1",          # unknown species
    "species: X1\nX1 -> X1",               # missing rate name
    "species: X1\nX1 -> X1 @ c1\nX1 -> 0 @ c1",  # duplicate rate name
    "",                                     # empty
    "species: X1 X1\nX1 -> 0 @ c1",        # duplicate species
])
def test_parse_model_text_errors(bad):
    with pytest.raises(NetworkError):
        network.parse_model_text(bad)


def test_model_file_round_trip(tmp_path):
    p = tmp_path / "model.txt"
    p.write_text(MODEL_TEXT)
    net = network.parse_model_file(str(p))
    assert net.n_reactions == 2
