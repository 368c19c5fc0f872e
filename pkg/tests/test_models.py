import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from _util import rel_err
from nhode import ad
from nhode.ad import finite_difference_gradient
from nhode.models import (
    DynamicsModel,
    Encoder,
    ObservationScheme,
    angular_bracket,
    encode_initial_hidden,
    hamiltonian_gradient,
    hamiltonian_value,
    initial_state_graph,
    io_sizes,
    make_model,
    pairwise_distances,
    vector_field,
    whiten_inputs,
)
from nhode.nn import MlpParams, mlp_widths

GEOMETRIES = [(2, 1), (3, 2), (3, 3)]  # (particles, spatial dim) of dms, nlms, tbp
NHODE = [("nhode-tot", "abs"), ("nhode-tot", "rel"), ("nhode-pot", "abs"), ("nhode-pot", "rel")]
ALL = list(itertools.product(("nhode-tot", "nhode-pot", "node-vanilla", "node-phys"), ("abs", "rel")))


def random_model(kind, coords, n_p, d, seed=0, width=16, depth=2):
    rng = np.random.default_rng(seed)
    masses = tuple(rng.uniform(0.5, 2.0, n_p))
    return make_model(kind, coords, n_p, d, rng, masses, width, depth)


def random_states(n_p, d, count, seed=1):
    return np.random.default_rng(seed).normal(size=(count, 2 * n_p * d))


def test_pairwise_distance_examples():
    assert pairwise_distances([1.0, 2.0, 1.0, 2.0], 2, 2)[0] == 0.0
    np.testing.assert_array_equal(pairwise_distances([0.0, 0.0, 3.0, 4.0], 2, 2), [5.0])
    np.testing.assert_allclose(pairwise_distances([0, 0, 1, 0, 0, 1], 3, 2), [1.0, 1.0, np.sqrt(2)], rtol=0,
                               atol=1e-15)
    with pytest.raises(ValueError):
        pairwise_distances([0.0, 1.0, 2.0], 2, 2)


def test_zero_weight_pot_model_energy_and_field():
    net = MlpParams.zeros(mlp_widths(2, 1, 8, 2))
    model = DynamicsModel("nhode-pot", "abs", net, 2, 1, (1.0, 1.2))
    assert hamiltonian_value(model, np.array([0.3, 0.9, 0.0, 0.0])) == 0.0
    assert abs(hamiltonian_value(model, np.array([0.5, 1.2, 0.2, -0.6])) - 0.17) < 1e-15
    f = vector_field(model, np.array([0.5, 1.2, 0.2, -0.6]))
    np.testing.assert_allclose(f, [0.2, -0.5, 0.0, 0.0], rtol=0, atol=1e-15)


def test_tot_rel_translation_invariance():
    model = random_model("nhode-tot", "rel", 3, 2)
    x = random_states(3, 2, 1)[0]
    h0 = hamiltonian_value(model, x)
    rng = np.random.default_rng(5)
    for _ in range(10):
        shift = np.tile(rng.normal(size=2) * 3, 3)
        y = x.copy()
        y[:6] += shift
        assert abs(hamiltonian_value(model, y) - h0) < 1e-12


@pytest.mark.parametrize("n_p,d", GEOMETRIES)
@pytest.mark.parametrize("kind,coords", NHODE)
def test_learned_energy_rate_vanishes(kind, coords, n_p, d):
    model = random_model(kind, coords, n_p, d)
    x = random_states(n_p, d, 1000)
    rate = np.einsum("ij,ij->i", hamiltonian_gradient(model, x), vector_field(model, x))
    assert np.abs(rate).max() < 1e-12


@pytest.mark.parametrize("n_p,d", GEOMETRIES)
@pytest.mark.parametrize("kind", ["nhode-tot", "nhode-pot"])
def test_rel_momentum_identity(kind, n_p, d):
    model = random_model(kind, "rel", n_p, d)
    x = random_states(n_p, d, 1000)
    dq = hamiltonian_gradient(model, x)[:, : n_p * d].reshape(-1, n_p, d).sum(axis=1)
    assert np.abs(dq).max() < 1e-12
    # and the momentum rates cancel
    pdot = vector_field(model, x)[:, n_p * d:].reshape(-1, n_p, d).sum(axis=1)
    assert np.abs(pdot).max() < 1e-12


@pytest.mark.parametrize("n_p,d", [(3, 2), (3, 3)])
def test_pot_rel_angular_bracket(n_p, d):
    model = random_model("nhode-pot", "rel", n_p, d)
    assert np.abs(angular_bracket(model, random_states(n_p, d, 1000))).max() < 1e-12


@pytest.mark.parametrize("n_p,d", [(3, 2), (3, 3)])
def test_abs_models_do_not_conserve_angular_momentum(n_p, d):
    model = random_model("nhode-pot", "abs", n_p, d)
    assert np.abs(angular_bracket(model, random_states(n_p, d, 50))).max() > 1e-6


@pytest.mark.parametrize("n_p,d", GEOMETRIES)
@pytest.mark.parametrize("kind,coords", NHODE)
def test_vector_field_is_symplectic_gradient(kind, coords, n_p, d):
    model = random_model(kind, coords, n_p, d, width=8)
    n = n_p * d
    for x in random_states(n_p, d, 5, seed=7):
        g = finite_difference_gradient(lambda v: hamiltonian_value(model, v), x)
        want = np.concatenate([g[n:], -g[:n]])
        assert rel_err(vector_field(model, x), want) < 1e-6


def _rotation(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.mark.parametrize("n_p,d", [(3, 2), (3, 3)])
def test_pot_rel_rotation_invariance(n_p, d):
    model = random_model("nhode-pot", "rel", n_p, d)
    n = n_p * d
    x = random_states(n_p, d, 1)[0]
    zero_p = np.concatenate([x[:n], np.zeros(n)])
    zero_q = np.concatenate([np.zeros(n), x[n:]])
    rng = np.random.default_rng(11)
    for _ in range(10):
        R = _rotation(d, rng)
        rot = lambda v: (v.reshape(n_p, d) @ R.T).ravel()  # noqa: E731
        potential = hamiltonian_value(model, np.concatenate([rot(x[:n]), np.zeros(n)]))
        assert abs(potential - hamiltonian_value(model, zero_p)) < 1e-12
        kinetic = hamiltonian_value(model, np.concatenate([np.zeros(n), rot(x[n:])]))
        assert abs(kinetic - hamiltonian_value(model, zero_q)) < 1e-12


@pytest.mark.parametrize("kind,coords", ALL)
def test_field_shapes_and_batching(kind, coords):
    model = random_model(kind, coords, 3, 2)
    x = random_states(3, 2, 4)
    f = vector_field(model, x)
    assert f.shape == (4, 12)
    np.testing.assert_allclose(vector_field(model, x[2]), f[2], rtol=0, atol=1e-15)
    if kind == "node-phys":
        np.testing.assert_allclose(f[:, :6], x[:, 6:] * model.inverse_mass_vector(), rtol=1e-15)


@pytest.mark.parametrize("kind", ["node-vanilla", "node-phys"])
def test_node_variants_have_no_hamiltonian(kind):
    with pytest.raises(TypeError):
        hamiltonian_value(random_model(kind, "abs", 2, 1), np.zeros(4))


def test_coincident_particles_give_finite_field():
    model = random_model("nhode-pot", "rel", 3, 2)
    x = np.zeros(12)
    x[6:] = 1.0
    assert np.isfinite(vector_field(model, x)).all()


def test_model_validation():
    net = MlpParams.zeros(mlp_widths(*io_sizes("nhode-pot", "abs", 2, 1), 4, 1))
    with pytest.raises(ValueError):
        DynamicsModel("nhode-pot", "abs", net, 2, 1, None)
    with pytest.raises(ValueError):
        DynamicsModel("nhode-pot", "abs", net, 2, 1, (1.0, -1.0))
    with pytest.raises(ValueError):
        DynamicsModel("nhode-pot", "rel", net, 2, 1, (1.0, 1.0))
    with pytest.raises(ValueError):
        DynamicsModel("nhode-xyz", "abs", net, 2, 1, (1.0, 1.0))
    assert io_sizes("nhode-tot", "rel", 3, 2) == (3 + 6, 1)
    assert io_sizes("nhode-pot", "rel", 3, 3) == (3, 1)
    assert io_sizes("node-vanilla", "abs", 2, 1) == (4, 4)
    assert io_sizes("node-phys", "rel", 3, 2) == (9, 6)


def test_observation_schemes():
    x = np.arange(4.0)
    np.testing.assert_array_equal(ObservationScheme.full(4).observe(x), x)
    dms = ObservationScheme.hide_particle(2, 1, 1)
    assert dms.observed == (0, 2) and dms.hidden == (1, 3)
    np.testing.assert_array_equal(dms.observe(x), [0.0, 2.0])
    tbp = ObservationScheme.hide_particle(3, 3, 0)
    assert tbp.hidden == (0, 1, 2, 9, 10, 11)
    with pytest.raises(ValueError):
        ObservationScheme((0, 0), 4)


@settings(max_examples=50, deadline=None)
@given(data=st.data(), dim=st.integers(2, 12))
def test_observe_after_assemble_is_identity(data, dim):
    observed = data.draw(st.sets(st.integers(0, dim - 1), min_size=1, max_size=dim))
    scheme = ObservationScheme(tuple(observed), dim)
    floats = st.floats(-1e6, 1e6, allow_nan=False)
    obs = data.draw(hnp.arrays(np.float64, (3, len(scheme.observed)), elements=floats))
    hid = data.draw(hnp.arrays(np.float64, (3, len(scheme.hidden)), elements=floats))
    full = scheme.assemble(obs, hid)
    np.testing.assert_array_equal(scheme.observe(full), obs)
    np.testing.assert_array_equal(np.take(full, scheme.hidden, axis=-1), hid)
    tape = ad.Tape(record=False)
    graph = initial_state_graph(scheme, tape.constant(obs), tape.constant(hid))
    np.testing.assert_array_equal(graph.value, full)


def test_encoder_outputs():
    scheme = ObservationScheme.hide_particle(2, 1, 1)
    zero = Encoder(MlpParams.zeros(mlp_widths(22, 2, 8, 2)), 10, scheme)
    np.testing.assert_array_equal(encode_initial_hidden(zero, np.ones((11, 2))), [0.0, 0.0])
    enc = Encoder.create(scheme, 10, np.random.default_rng(0), 8, 2)
    assert encode_initial_hidden(enc, np.ones((5, 11, 2))).shape == (5, 2)
    # single linear layer reading off x_obs(t0)
    w = np.zeros((2 * 3, 2))
    w[0, 0] = w[1, 1] = 1.0
    readout = Encoder(MlpParams([w], [np.zeros(2)]), 2, scheme)
    window = np.array([[0.7, -0.2], [5.0, 5.0], [9.0, 9.0]])
    np.testing.assert_array_equal(encode_initial_hidden(readout, window), [0.7, -0.2])
    with pytest.raises(ValueError):
        encode_initial_hidden(readout, np.ones((4, 2)))
    with pytest.raises(ValueError):
        Encoder(MlpParams.zeros([4, 2]), 2, scheme)



def test_whitened_window_has_identity_covariance():
    scheme = ObservationScheme.hide_particle(2, 1, 1)
    rng = np.random.default_rng(3)
    # nearly collinear snapshots: a slow drift plus a small curvature term
    base = rng.normal(size=(300, 1, 2))
    steps = np.arange(5)[None, :, None]
    windows = base + 0.1 * steps * base[:, :, ::-1] + 1e-3 * rng.normal(size=(300, 5, 2))
    enc = whiten_inputs(Encoder.create(scheme, 4, rng, 8, 1), windows)
    z = enc.prepare(enc.flatten_window(windows))
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.T @ z / len(z), np.eye(10), atol=1e-8)
    raw = Encoder(enc.net, 4, scheme)
    mapped = ((windows[:3].reshape(3, -1) - enc.shift) @ enc.mix).reshape(3, 5, 2)
    np.testing.assert_allclose(encode_initial_hidden(enc, windows[:3]), encode_initial_hidden(raw, mapped))
    with pytest.raises(ValueError):
        Encoder(enc.net, 4, scheme, enc.shift, None)
    with pytest.raises(ValueError):
        Encoder(enc.net, 4, scheme, enc.shift[:-1], enc.mix)


def test_whitening_gain_is_capped_on_degenerate_windows():
    scheme = ObservationScheme.hide_particle(2, 1, 1)
    rng = np.random.default_rng(4)
    windows = np.repeat(rng.normal(size=(50, 1, 2)), 5, axis=1)  # rank 2 in 10 dims
    enc = whiten_inputs(Encoder.create(scheme, 4, rng, 8, 1), windows, rel_floor=1e-6)
    sigma = np.linalg.svd(enc.mix, compute_uv=False)
    assert sigma.max() / sigma[sigma > 0].min() <= 1e6 * (1 + 1e-9)
    assert np.all(np.isfinite(enc.prepare(enc.flatten_window(windows))))
