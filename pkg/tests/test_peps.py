import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bppeps.errors import InfeasibleError
from bppeps.graph import complete_graph, graph_from_spec
from bppeps.peps import (
    PepsNetwork,
    build_superoperator,
    double_layer,
    generate_random_peps,
    measure_injectivity,
    perturb_site,
    stability_margin,
)
from bppeps.rng import haar_unitary, random_isometry, stream
from bppeps.tensors import schatten_norm, svd

from helpers import network, random_message


def network_from_spectrum(spectrum, seed=0):
    """K3 network (degree 2, D=2, d=4) whose site tensors have a given spectrum."""
    g = complete_graph(3)
    ts = []
    for v in range(3):
        r = stream(seed, 9, v)
        u = haar_unitary(r, 4)
        iso = random_isometry(r, 4, 4)
        ts.append(((iso * np.asarray(spectrum)) @ u.conj().T).reshape(4, 2, 2))
    return PepsNetwork(g, 2, 4, tuple(ts))


# ---------------------------------------------------------------------------
# network container
# ---------------------------------------------------------------------------


def test_tensors_are_read_only():
    p = network("complete:3", 0.1)
    with pytest.raises(ValueError):
        p.tensors[0][0, 0, 0] = 1.0


def test_shape_validation():
    g = complete_graph(3)
    with pytest.raises(InfeasibleError):
        PepsNetwork(g, 2, 4, tuple(np.zeros((4, 2)) for _ in range(3)))


def test_json_round_trip_is_bit_exact():
    p = network("grid:2x3:periodic", 0.03, seed=5)
    q = PepsNetwork.from_json(json.loads(json.dumps(p.to_json())))
    assert q.graph == p.graph
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.tensors, q.tensors))


def test_double_layer_identity_insertion_is_bit_exact():
    p = network("complete:4", 0.05, seed=1)
    for v in range(4):
        assert np.array_equal(
            p.dressed_double_layer(v, np.eye(p.phys_dim)), p.double_layers[v]
        )


def test_double_layer_index_convention():
    r = np.random.default_rng(0)
    t = r.normal(size=(4, 2, 2)) + 1j * r.normal(size=(4, 2, 2))
    e = double_layer(t, 2)
    ref = np.einsum("xab,xcd->acbd", t.conj(), t).reshape(4, 4)
    assert np.allclose(e, ref)


# ---------------------------------------------------------------------------
# injectivity
# ---------------------------------------------------------------------------


def test_isometric_sites_have_unit_spectrum():
    rep = measure_injectivity(network_from_spectrum([1, 1, 1, 1]))
    assert abs(rep.delta - 1) <= 1e-12 and rep.epsilon <= 1e-12
    assert rep.injective


def test_constructed_spectrum():
    rep = measure_injectivity(network_from_spectrum([1, 0.9, 0.9, 0.81]))
    assert abs(rep.delta - 0.81) <= 1e-12
    assert abs(rep.epsilon - (1 - 0.81**2)) <= 1e-12
    assert np.allclose(rep.singular_values[0], [1, 0.9, 0.9, 0.81])


def test_non_injective_is_flagged():
    rep = measure_injectivity(network_from_spectrum([1, 0.5, 0.5, 0.0]))
    assert rep.delta == 0 and rep.epsilon == 1 and not rep.injective


def test_normalization_to_unit_top():
    rep = measure_injectivity(network_from_spectrum([4.0, 2.0, 2.0, 1.0]))
    assert abs(rep.delta - 0.25) <= 1e-12


def test_isometry_plus_small_perturbation_weyl():
    p = network_from_spectrum([1, 1, 1, 1])
    r = np.random.default_rng(3)
    e = r.normal(size=(4, 4)) + 1j * r.normal(size=(4, 4))
    e *= 0.01 / np.linalg.norm(e, 2)
    s = svd(p.tensors[0].reshape(4, 4) + e)[0]
    assert np.all(np.abs(s - 1) <= 0.01 + 1e-12)


def test_small_physical_dimension_rejected():
    g = complete_graph(4)
    with pytest.raises(InfeasibleError):
        generate_random_peps(g, 2, 0, 0.1, phys_dim=4)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("spec", ["complete:3", "complete:4", "grid:2x3:periodic", "cycle:4"])
def test_epsilon_zero_is_isometric(spec):
    rep = measure_injectivity(generate_random_peps(graph_from_spec(spec), 2, 3, 0.0))
    assert rep.epsilon <= 1e-12


def test_epsilon_is_pinned():
    rep = measure_injectivity(generate_random_peps(complete_graph(3), 2, 0, 0.1))
    assert abs(rep.epsilon - 0.1) <= 1e-12
    assert all(abs(s[0] - 1) <= 1e-12 for s in rep.singular_values)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_generation_is_deterministic(seed, eps):
    g = complete_graph(4)
    a = generate_random_peps(g, 2, seed, eps)
    b = generate_random_peps(g, 2, seed, eps)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.tensors, b.tensors))
    assert measure_injectivity(a).epsilon <= eps + 1e-12


def test_different_seeds_differ():
    g = complete_graph(3)
    a = generate_random_peps(g, 2, 0, 0.1)
    b = generate_random_peps(g, 2, 1, 0.1)
    assert not np.array_equal(a.tensors[0], b.tensors[0])


@pytest.mark.parametrize("eps", [-0.1, 1.0])
def test_epsilon_range(eps):
    with pytest.raises(InfeasibleError):
        generate_random_peps(complete_graph(3), 2, 0, eps)


def test_default_physical_dimension():
    p = generate_random_peps(graph_from_spec("grid:3x3:periodic"), 2, 0, 0.0)
    assert p.phys_dim == 16 and p.tensors[0].shape == (16, 2, 2, 2, 2)


# ---------------------------------------------------------------------------
# perturbation
# ---------------------------------------------------------------------------


def test_zero_strength_returns_same_network():
    p = network("complete:4", 0.05)
    assert perturb_site(p, [0, 2], 0.0, 7).network is p


def test_untouched_sites_bit_identical():
    p = network("grid:2x3:periodic", 0.03)
    q = perturb_site(p, [1], 0.01, 3).network
    for v in range(6):
        same = q.tensors[v].tobytes() == p.tensors[v].tobytes()
        assert same == (v != 1)


def test_perturbation_is_renormalized_and_weyl_bounded():
    p = network("complete:4", 0.0)
    pert = perturb_site(p, [0], 0.01, 11)
    t = pert.network.tensors[0]
    s = svd(t.reshape(t.shape[0], -1))[0]
    assert abs(s[0] - 1) <= 1e-12
    raw = s / pert.rescale[0]
    assert np.all((raw >= 0.99 - 1e-12) & (raw <= 1.01 + 1e-12))
    assert pert.max_shift[0] <= 0.01 + 1e-10


@pytest.mark.parametrize("bad", [dict(region=[], strength=0.1), dict(region=[0], strength=-1.0)])
def test_perturbation_argument_checks(bad):
    with pytest.raises(ValueError):
        perturb_site(network("complete:3", 0.1), bad["region"], bad["strength"], 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.1), st.floats(0.0, 1.0))
def test_stability_bound(seed, eps, frac):
    p = network("complete:4", round(eps, 3), seed=seed % 5)
    rep = measure_injectivity(p)
    margin = stability_margin(rep.delta_v[0], 3)
    if margin <= 0:
        return
    s = frac * margin
    pert = perturb_site(p, [0], s, seed)
    new = measure_injectivity(pert.network)
    # (delta - s) / (1 + s) lower bound on the renormalized smallest value
    assert new.delta_v[0] >= (rep.delta_v[0] - s) / (1 + s) - 1e-12
    assert new.epsilon < 1 / (2 * 3 - 1)
    assert pert.max_shift[0] <= s + 1e-10


# ---------------------------------------------------------------------------
# virtual superoperators
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("spec, eps", [("complete:4", 0.0), ("complete:4", 0.2), ("grid:2x3:periodic", 0.05)])
def test_bistochastic_identities(spec, eps):
    p = network(spec, eps)
    for v in range(p.graph.n):
        for n in p.graph.neighbors[v]:
            phi = build_superoperator(p, v, n)
            kk, kkd = phi.kraus_sums()
            assert np.allclose(kk, phi.dim_out * np.eye(phi.dim_in), atol=1e-10)
            assert np.allclose(kkd, phi.dim_in * np.eye(phi.dim_out), atol=1e-10)


def test_isometric_channel_is_fully_depolarizing():
    p = network("complete:4", 0.0)
    phi = build_superoperator(p, 0, 2)
    r = np.random.default_rng(0)
    for _ in range(5):
        x = np.kron(random_message(2, r), random_message(2, r))
        assert np.allclose(phi.apply(x), np.eye(2), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_positivity_and_trace_floor(seed):
    p = network("complete:4", 0.1, seed=seed % 3)
    rep = measure_injectivity(p)
    phi = build_superoperator(p, 1, 3)
    r = np.random.default_rng(seed)
    x = np.kron(random_message(2, r), random_message(2, r))
    y = phi.apply(x)
    assert np.linalg.eigvalsh((y + y.conj().T) / 2).min() >= -1e-10
    assert np.trace(y).real >= 2 * rep.delta_v[1] ** 2 - 1e-12


def test_trace_floor_example():
    # delta^2 = 0.9 on every site, so the output trace is at least 1.8
    p = network("complete:3", 0.1)
    phi = build_superoperator(p, 0, 1)
    r = np.random.default_rng(1)
    for _ in range(10):
        assert np.trace(phi.apply(random_message(2, r))).real >= 1.8 - 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.01, 0.05, 0.2]))
def test_depolarizing_perturbation_bound(seed, eps):
    p = network("complete:4", eps, seed=seed % 3)
    phi = build_superoperator(p, 2, 0)
    r = np.random.default_rng(seed)
    a = r.normal(size=(4, 4)) + 1j * r.normal(size=(4, 4))
    a /= schatten_norm(a, 1)
    lhs = schatten_norm(phi.delta_apply(a), 1)
    assert lhs <= phi.dim_out * eps * schatten_norm(a, 1) + 1e-12


def test_matrix_form_and_double_layer_agree():
    p = network("complete:4", 0.1, seed=2)
    v, n = 1, 3
    phi = build_superoperator(p, v, n)
    r = np.random.default_rng(4)
    x = r.normal(size=(4, 4)) + 1j * r.normal(size=(4, 4))
    y = phi.apply(x)
    assert np.allclose(phi.matrix @ x.ravel(), y.ravel())
    # contract the double layer directly: E[bra, ket] with bra = (c, l), ket = (d, m)
    t = p.tensors[v]
    k = t.ndim - 1
    m = t.reshape(t.shape[0], -1)
    e = (m.conj().T @ m).reshape((2,) * (2 * k))
    leg = p.graph.leg(v, n)
    e = np.moveaxis(e, [leg, k + leg], [0, k])  # output legs first
    e = e.reshape(2, 4, 2, 4)
    ref = np.einsum("cldm,lm->cd", e, x)
    assert np.allclose(y, ref)


def test_superoperator_requires_neighbor():
    p = network("cycle:4", 0.0)
    with pytest.raises(ValueError):
        build_superoperator(p, 0, 2)
