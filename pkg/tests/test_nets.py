import json

import numpy as np
import pytest

from fcme.nets import (
    NeuronParam,
    NeuronSpec,
    ParticleEnsemble,
    init_gaussian,
    network_eval,
    neuron_eval,
    neuron_grad,
)

TANH1_HALF = 0.3807970779778823  # tanh(1) * sigmoid(0), direct evaluation


def test_neuron_zero_output_layer_gives_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.uniform(-1, 1, 3)
        param = np.concatenate([[0.0], rng.standard_normal(4)])
        assert neuron_eval(w, param) == 0.0


def test_neuron_unit_beta_zero_hidden():
    w = np.array([0.3, -0.7])
    param = np.array([1.0, 0.0, 0.0, 0.0])
    assert neuron_eval(w, param) == pytest.approx(TANH1_HALF, abs=1e-15)


def test_neuron_oddness_in_output_layer():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = int(rng.integers(1, 5))
        w = rng.uniform(-1, 1, d)
        param = rng.standard_normal(d + 2) * 2
        flipped = param.copy()
        flipped[0] = -flipped[0]
        assert neuron_eval(w, flipped) == -neuron_eval(w, param)


def test_neuron_range_open_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(200):
        w = rng.uniform(-1, 1, 2)
        val = neuron_eval(w, rng.standard_normal(4) * 5)
        assert -1.0 < val < 1.0


def test_neuron_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        neuron_eval(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        neuron_grad(np.zeros(1), np.zeros(5))


def test_neuron_grad_closed_form_at_origin():
    # beta = 0, hidden = 0: output-layer slot is tanh'(0) * sigmoid(0) = 0.5
    # and the hidden block vanishes because tanh(0) = 0
    w = np.array([0.4, 0.2])
    g = neuron_grad(w, np.zeros(4))
    assert g[0] == pytest.approx(0.5, abs=1e-15)
    assert np.all(g[1:] == 0.0)


def test_neuron_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    step = 1e-5
    for _ in range(100):
        d = int(rng.integers(1, 4))
        w = rng.uniform(-1, 1, d)
        param = rng.standard_normal(d + 2)
        g = neuron_grad(w, param)
        fd = np.empty_like(g)
        for c in range(g.size):
            hi, lo = param.copy(), param.copy()
            hi[c] += step
            lo[c] -= step
            fd[c] = (neuron_eval(w, hi) - neuron_eval(w, lo)) / (2 * step)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-10)


def test_neuron_param_roundtrip_and_validation():
    p = NeuronParam(beta=0.5, hidden=np.array([1.0, -2.0, 0.25]))
    assert p.dim == 4
    back = NeuronParam.from_array(p.as_array())
    assert back.beta == p.beta and np.array_equal(back.hidden, p.hidden)
    with pytest.raises(ValueError):
        NeuronParam(beta=np.nan, hidden=np.zeros(2))
    w = np.array([0.1])
    assert neuron_eval(w, NeuronParam(0.3, np.array([1.0, 0.0]))) == neuron_eval(
        w, np.array([0.3, 1.0, 0.0])
    )


def test_network_zero_when_all_output_layers_zero():
    parts = np.random.default_rng(4).standard_normal((10, 4))
    parts[:, 0] = 0.0
    ens = ParticleEnsemble(parts, alpha=3.0)
    assert network_eval(ens, np.array([0.2, -0.4])) == 0.0


def test_network_single_neuron_scaling():
    rng = np.random.default_rng(5)
    param = rng.standard_normal(4)
    ens = ParticleEnsemble(param.reshape(1, -1), alpha=2.0)
    w = rng.uniform(-1, 1, 2)
    assert network_eval(ens, w) == pytest.approx(2.0 * neuron_eval(w, param), rel=1e-15)


def test_network_antithetic_exactly_zero():
    ens = init_gaussian(32, 4, seed=6, antithetic=True, alpha=4.0)
    pts = np.random.default_rng(7).uniform(-1, 1, (50, 2))
    assert np.abs(ens.values(pts)).max() < 1e-15


def test_network_bounded_by_alpha():
    ens = init_gaussian(64, 3, seed=8, alpha=2.5)
    pts = np.random.default_rng(9).uniform(-3, 3, (200, 1))
    assert np.abs(ens.values(pts)).max() <= 2.5


def test_network_linearity_in_measure():
    a = init_gaussian(6, 4, 10, alpha=2.0)
    b = init_gaussian(10, 4, 11, alpha=2.0)
    pts = np.random.default_rng(12).uniform(-1, 1, (32, 2))
    lhs = a.concat(b).values(pts)
    rhs = (a.n * a.values(pts) + b.n * b.values(pts)) / (a.n + b.n)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_init_deterministic_given_seed():
    a = init_gaussian(16, 3, seed=13)
    b = init_gaussian(16, 3, seed=13)
    assert np.array_equal(a.particles, b.particles)


def test_init_antithetic_odd_count_rejected():
    with pytest.raises(ValueError):
        init_gaussian(7, 3, seed=0, antithetic=True)


def test_init_coordinate_means_within_clt_bound():
    ens = init_gaussian(4096, 3, seed=14)
    means = ens.particles.mean(axis=0)
    assert np.abs(means).max() < 4.0 / np.sqrt(4096)


def test_ensemble_json_roundtrip_bit_exact():
    ens = init_gaussian(9, 4, seed=15, alpha=1.7, kind="dual")
    rec = json.loads(ens.to_json())
    assert rec["kind"] == "dual" and rec["N"] == 9 and rec["D"] == 4
    back = ParticleEnsemble.from_json(ens.to_json())
    assert np.array_equal(back.particles, ens.particles)
    assert back.alpha == ens.alpha and back.kind == ens.kind


def test_ensemble_invariants():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((2, 3)), alpha=0.0)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.full((2, 3), np.inf), alpha=1.0)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((0, 3)), alpha=1.0)


def test_neuron_spec_bounds_hold_empirically():
    spec = NeuronSpec(input_dim=2, c1=1.0)
    assert spec.B0 == 1.0
    obs = spec.sample_bounds(seed=0, draws=10_000)
    assert obs["max_abs_phi"] <= spec.B0
    assert obs["max_grad_norm"] <= spec.B1
    # rescaling map is odd with range inside (-B0, B0)
    xs = np.linspace(-20, 20, 101)
    assert np.all(spec.rescale(-xs) == -spec.rescale(xs))
    assert np.all(np.abs(spec.rescale(xs)) < spec.B0 + 1e-15)
