import numpy as np
import pytest

from fcme.applications import (
    APPLICATIONS,
    CcapmChain,
    ChainMisspecifiedError,
    FiniteMdp,
    NpivDesign,
    RieszShift,
    from_config,
    make_ccapm,
    make_npiv,
    make_policy_eval,
    make_riesz,
)
from fcme.metrics import primal_j
from fcme.nets import init_gaussian
from fcme.problems import check_problem

RIESZ_F0_AT_ZERO = -0.11750309741540454  # exp(-0.125) - 1, Gaussian density ratio


@pytest.mark.parametrize("app", APPLICATIONS)
def test_all_shipped_problems_pass_checker(app):
    p, _ = from_config(app, {"lambda": 0.1, "kappa": 0.5, "seed": 0})
    rep = check_problem(p, trials=10_000, seed=1)
    assert rep.passed, f"{app}: {rep}"


# --- policy evaluation -------------------------------------------------------


def test_policy_variation_on_constant_function():
    p, _ = make_policy_eval(FiniteMdp.random(6, 0.9, 0.3, 0), 0.0)
    plan = p.sample(np.random.default_rng(0), 20)
    ones = lambda pts: np.ones(np.atleast_2d(pts).shape[0])  # noqa: E731
    # next-state weight gamma minus current-state weight one
    assert np.allclose(p.phi_pairing(plan, ones), -0.1)


def test_policy_two_state_value_by_hand():
    # P = I, r = (1, 0), gamma = 0.5: V solves (I - 0.5 I) V = r, so V = (2, 0)
    mdp = FiniteMdp(
        states=np.array([-1.0, 1.0]),
        transition=np.eye(2),
        rewards=np.array([1.0, 0.0]),
        gamma=0.5,
        stationary=np.array([0.5, 0.5]),
    )
    assert np.allclose(mdp.value_function(), [2.0, 0.0])


def test_policy_bellman_oracle_and_cond_exp():
    mdp = FiniteMdp.random(16, 0.9, 0.3, 0)
    p, gt = make_policy_eval(mdp, 0.0)
    resid = mdp.rewards + mdp.gamma * mdp.transition @ mdp.value_function() - mdp.value_function()
    assert np.abs(resid).max() < 1e-10
    # conditional moment vanishes at the true value function, every state
    vals = gt.cond_exp(mdp.states.reshape(-1, 1), gt.f0)
    assert np.abs(vals).max() < 1e-10


def test_policy_transition_and_stationary_invariants():
    mdp = FiniteMdp.random(12, 0.95, 0.2, 3)
    assert np.abs(mdp.transition.sum(axis=1) - 1.0).max() < 1e-12
    assert np.abs(mdp.stationary @ mdp.transition - mdp.stationary).max() < 1e-10
    with pytest.raises(ValueError):
        FiniteMdp(np.zeros(2), np.array([[0.5, 0.4], [0.5, 0.5]]), np.zeros(2), 0.9)
    with pytest.raises(ValueError):
        FiniteMdp(np.zeros(2), np.eye(2), np.zeros(2), 1.0)


def test_policy_regularized_solution_satisfies_normal_equations():
    mdp = FiniteMdp.random(10, 0.9, 0.3, 1)
    lam = 0.2
    p, gt = make_policy_eval(mdp, lam)
    v = gt.info["v_star"]
    A = mdp.gamma * mdp.transition - np.eye(mdp.n)
    Pi = np.diag(mdp.stationary)
    grad = A.T @ Pi @ (mdp.rewards + A @ v) + 2 * lam * Pi @ v
    assert np.abs(grad).max() < 1e-12
    # g* is the conditional moment of f*
    gs = gt.g_star(mdp.states.reshape(-1, 1))
    assert np.allclose(gs, gt.cond_exp(mdp.states.reshape(-1, 1), gt.f_star), atol=1e-12)


def test_policy_support_weights_are_joint_distribution():
    mdp = FiniteMdp.random(5, 0.9, 0.3, 2)
    p, _ = make_policy_eval(mdp, 0.0)
    plan, w = p.support()
    assert plan.n == 25 and w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(w.reshape(5, 5).sum(axis=1), mdp.stationary)


# --- NPIV ---------------------------------------------------------------------


def test_npiv_cond_exp_zero_at_truth():
    p, gt = make_npiv(NpivDesign(), 0.0)
    z = np.linspace(-0.9, 0.9, 20).reshape(-1, 1)
    assert np.abs(gt.cond_exp(z, gt.f0)).max() < 1e-12


def test_npiv_quadrature_matches_nested_mc():
    design = NpivDesign()
    p, gt = make_npiv(design, 0.0)
    f = init_gaussian(16, 3, 5, alpha=2.0).as_fn()
    rng = np.random.default_rng(6)
    for z in np.linspace(-0.9, 0.9, 20):
        u = rng.standard_normal(100_000)
        x = np.tanh(design.a * z + design.b * u).reshape(-1, 1)
        vals = design.f0(x[:, 0]) - f(x)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        quad = float(gt.cond_exp(np.array([[z]]), f)[0])
        assert abs(quad - vals.mean()) < 4.0 * se


def test_npiv_noise_mean_independent_of_instrument():
    # regression of the structural residual on Z over 1e5 draws
    p, gt = make_npiv(NpivDesign(), 0.0)
    plan = p.sample(np.random.default_rng(7), 100_000)
    eps = plan.phi0 - gt.f0(plan.phi_pts[:, 0, :])
    z = plan.z[:, 0]
    for lo, hi in [(-1, -0.5), (-0.5, 0), (0, 0.5), (0.5, 1)]:
        sel = (z >= lo) & (z < hi)
        m = eps[sel].mean()
        se = eps[sel].std(ddof=1) / np.sqrt(sel.sum())
        assert abs(m) < 4 * se
    assert np.abs(plan.phi_pts[:, 0, 0]).max() < 1.0  # X inside the box


def test_npiv_ridge_oracle_is_the_minimizer():
    lam = 0.05
    p, gt = make_npiv(NpivDesign(), lam)
    jstar = primal_j(p, gt, gt.f_star, 40_000, 0).value
    # any perturbation of the ridge solution increases the objective
    for c, seed in [(0.97, 1), (1.03, 2)]:
        scaled = lambda pts, c=c: c * gt.f_star(pts)  # noqa: E731
        assert primal_j(p, gt, scaled, 40_000, 0).value > jstar
    bumped = lambda pts: gt.f_star(pts) + 0.05 * np.cos(  # noqa: E731
        2.0 * np.atleast_2d(pts)[:, 0]
    )
    assert primal_j(p, gt, bumped, 40_000, 0).value > jstar
    assert primal_j(p, gt, gt.f0, 40_000, 0).value > jstar  # truth is not the ridge optimum


# --- CCAPM ----------------------------------------------------------------------


def test_ccapm_functional_is_homogeneous():
    p, _ = from_config("ccapm", {"lambda": 0.0, "seed": 0})
    plan = p.sample(np.random.default_rng(8), 100)
    assert np.all(p.phi_at_zero(plan) == 0.0)


def test_ccapm_three_state_hand_built_chain():
    # returns built from the target function f0 = (1, 1.2, 0.8)
    f0 = np.array([1.0, 1.2, 0.8])
    grid = np.array([0.9, 1.0, 1.1])
    P = np.array([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2], [0.3, 0.3, 0.4]])
    rt = f0[:, None] / f0[None, :]
    chain = CcapmChain(grid, P, rt, r_bound=1.5, ref_idx=0)
    p, gt = make_ccapm(chain, 0.0)
    recovered = gt.f0(grid.reshape(-1, 1))
    assert np.allclose(recovered, f0 / f0[0], atol=1e-10)
    assert np.abs(gt.cond_exp(grid.reshape(-1, 1), gt.f0)).max() < 1e-10


def test_ccapm_zero_function_is_degenerate_minimum():
    p, gt = from_config("ccapm", {"lambda": 0.0, "kappa": 0.0, "seed": 1})
    zero = lambda pts: np.zeros(np.atleast_2d(pts).shape[0])  # noqa: E731
    assert primal_j(p, gt, zero).value == 0.0


def test_ccapm_misspecified_chain_reported():
    grid = np.array([0.9, 1.1])
    P = np.array([[0.5, 0.5], [0.5, 0.5]])
    rt = np.full((2, 2), 0.5)  # spectral radius of P * rt is 0.5: no unit eigenvalue
    chain = CcapmChain(grid, P, rt, r_bound=1.0, ref_idx=0)
    with pytest.raises(ChainMisspecifiedError):
        make_ccapm(chain, 0.0)


def test_ccapm_return_bound_and_anchor_solution():
    chain = CcapmChain.random(24, r_bound=1.5, seed=0)
    assert np.abs(chain.rtilde).max() <= 1.5
    p, gt = make_ccapm(chain, 0.01, kappa=1.0)
    ref = chain.grid[chain.ref_idx]
    # anchored exact solution pins the reference value near one
    assert abs(float(gt.f_star(np.array([[ref]]))[0]) - 1.0) < 0.05
    # and solves the anchored first-order conditions
    v = gt.info["v_star"]
    M = chain.transition * chain.rtilde
    B = M - np.eye(chain.n)
    Pi = np.diag(chain.stationary)
    e = np.zeros(chain.n)
    e[chain.ref_idx] = 1.0
    grad = B.T @ Pi @ B @ v + 2 * 0.01 * Pi @ v + 2 * 1.0 * e * (v[chain.ref_idx] - 1.0)
    assert np.abs(grad).max() < 1e-10


# --- Riesz ------------------------------------------------------------------------


def test_riesz_zero_shift_trivial():
    spec = RieszShift(delta=0.0, sigma=1.0)
    p, gt = make_riesz(spec, 0.0)
    x = np.linspace(-3, 3, 50).reshape(-1, 1)
    assert np.all(gt.f0(x) == 0.0)
    plan = p.sample(np.random.default_rng(9), 100)
    assert np.all(plan.m_pts[:, 0] == plan.m_pts[:, 1])  # shifted point collapses


def test_riesz_representer_value_at_origin():
    spec = RieszShift(delta=0.5, sigma=1.0)
    assert spec.f0(0.0) == pytest.approx(RIESZ_F0_AT_ZERO, abs=1e-15)


def test_riesz_representer_identity():
    spec = RieszShift(delta=0.5, sigma=1.0)
    rng = np.random.default_rng(10)
    x = rng.normal(0, spec.sigma, 100_000)
    x = x[np.abs(x) <= spec.sample_halfwidth].reshape(-1, 1)
    for seed in range(20):
        g = init_gaussian(8, 3, seed, alpha=2.0).as_fn()
        diff = spec.f0(x[:, 0]) * g(x) - (g(x + spec.delta) - g(x))
        se = diff.std(ddof=1) / np.sqrt(diff.size)
        assert abs(diff.mean()) < 3 * se


def test_riesz_regularized_solution_is_pointwise_shrinkage():
    lam = 0.25
    p, gt = make_riesz(RieszShift(), lam)
    x = np.linspace(-2, 2, 30).reshape(-1, 1)
    assert np.allclose(gt.f_star(x), gt.f0(x) / 1.5, atol=1e-14)
    assert np.allclose(gt.g_star(x), gt.cond_exp(x, gt.f_star), atol=1e-14)


def test_riesz_samples_respect_shift_margin():
    spec = RieszShift(delta=0.5, sigma=1.0)
    p, _ = make_riesz(spec, 0.0)
    plan = p.sample(np.random.default_rng(11), 50_000)
    box = p.z_box
    assert plan.m_pts.min() >= box[0][0] and plan.m_pts.max() <= box[1][0]
    assert spec.truncation_mass < 1e-4
