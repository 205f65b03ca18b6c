import numpy as np
import pytest

from fcme.applications import FiniteMdp, from_config, make_policy_eval
from fcme.nets import init_gaussian
from fcme.problems import MomentProblem, SamplePlan, check_problem, phi_eval, zero_fn


@pytest.fixture(scope="module")
def npiv():
    return from_config("npiv", {"lambda": 0.1})


def _net(seed, dim_w=1, alpha=2.0):
    return init_gaussian(12, dim_w + 2, seed, alpha=alpha)


def test_phi_eval_zero_function_gives_offset(npiv):
    p, _ = npiv
    plan = p.sample(np.random.default_rng(0), 50)
    assert np.array_equal(phi_eval(p, plan, zero_fn), plan.phi0)


def test_policy_eval_phi_at_zero_is_reward():
    p, gt = make_policy_eval(FiniteMdp.random(8, 0.9, 0.3, 0), 0.0)
    plan, _ = p.support()
    mdp = gt.info["mdp"]
    # the affine offset of the moment functional is the observed reward
    idx = np.abs(plan.z[:, 0][:, None] - mdp.states[None, :]).argmin(axis=1)
    assert np.array_equal(p.phi_at_zero(plan), mdp.rewards[idx])


def test_phi_affinity_identity(npiv):
    p, _ = npiv
    plan = p.sample(np.random.default_rng(1), 200)
    f1, f2 = _net(2).as_fn(), _net(3).as_fn()
    comb = lambda pts: 2.0 * f1(pts) + 3.0 * f2(pts)  # noqa: E731
    zero = p.phi_at_zero(plan)
    lhs = p.phi_value(plan, comb) - zero
    rhs = 2.0 * (p.phi_value(plan, f1) - zero) + 3.0 * (p.phi_value(plan, f2) - zero)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_check_problem_passes_npiv(npiv):
    p, _ = npiv
    rep = check_problem(p, trials=10_000, seed=2)
    assert rep.passed, str(rep)


def test_check_problem_flags_shifted_regularizer(npiv):
    p, _ = npiv
    mutated = MomentProblem(
        **{
            **{f: getattr(p, f) for f in (
                "name", "lam", "dim_w", "dim_z", "w_box", "z_box", "sample",
                "support", "strong_convexity",
            )},
            "psi_value_fn": lambda plan, f: plan.psi_val(f) + 0.1,
        }
    )
    rep = check_problem(mutated, trials=500, seed=3)
    assert not rep.passed
    assert rep.violations["psi_at_zero"] == pytest.approx(0.1, abs=1e-12)
    assert "psi_at_zero" in rep.witnesses


def test_check_problem_flags_quadratic_functional(npiv):
    p, _ = npiv
    mutated = MomentProblem(
        **{
            **{f: getattr(p, f) for f in (
                "name", "lam", "dim_w", "dim_z", "w_box", "z_box", "sample",
                "support", "strong_convexity",
            )},
            "phi_value_fn": lambda plan, f: plan.phi0 + plan.phi_lin(f) ** 2,
        }
    )
    rep = check_problem(mutated, trials=500, seed=4)
    assert rep.violations["phi_affinity"] > 1e-3


def test_check_problem_rejects_bad_trials(npiv):
    with pytest.raises(ValueError):
        check_problem(npiv[0], trials=0)


def test_psi_pairing_linearity_and_convexity(npiv):
    p, _ = npiv
    plan = p.sample(np.random.default_rng(5), 100)
    f1, f2, h = _net(6).as_fn(), _net(7).as_fn(), _net(8).as_fn()
    comb = lambda pts: -1.5 * f1(pts) + 0.5 * f2(pts)  # noqa: E731
    lin = (
        p.psi_pairing(plan, comb, h)
        + 1.5 * p.psi_pairing(plan, f1, h)
        - 0.5 * p.psi_pairing(plan, f2, h)
    )
    assert np.abs(lin).max() < 1e-12
    mid = lambda pts: 0.5 * (f1(pts) + f2(pts))  # noqa: E731
    gap = p.psi_value(plan, mid) - 0.5 * (p.psi_value(plan, f1) + p.psi_value(plan, f2))
    assert gap.max() <= 1e-12


def test_strong_convexity_lower_bound(npiv):
    p, _ = npiv
    plan = p.sample(np.random.default_rng(9), 100)
    f = _net(10).as_fn()
    fw = f(plan.psi_pts[:, 0, :])
    assert np.all(p.psi_value(plan, f) >= p.strong_convexity * fw**2 - 1e-12)


def test_sample_plan_builder_shapes_and_slicing():
    n = 7
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, (n, 1))
    z = rng.uniform(-1, 1, (n, 1))
    plan = SamplePlan.build(
        z=z,
        phi0=rng.standard_normal(n),
        phi_terms=[(x, -1.0), (z, rng.standard_normal(n))],
        psi_terms=[(x, 1.0)],
        m_terms=[(z, 0.5)],
        resid=(0.0, [(x, -1.0)]),
    )
    assert plan.n == n and plan.dim_w == 1 and plan.dim_z == 1
    assert plan.phi_pts.shape == (n, 2, 1) and plan.psi_coef.shape == (n, 1)
    assert plan.m_pts.shape == (n, 1, 1) and plan.r_pts.shape == (n, 1, 1)
    assert np.all(plan.r0 == 0.0)
    sub = plan.rows(2, 5)
    assert sub.n == 3
    assert np.array_equal(sub.z, plan.z[2:5])
    f = _net(12).as_fn()
    assert np.allclose(sub.phi_lin(f), plan.phi_lin(f)[2:5])


def test_anchor_kept_outside_regularizer():
    p, _ = from_config("ccapm", {"lambda": 0.1, "kappa": 0.7, "seed": 0})
    # the identification penalty must not break the regularizer identities
    rep = check_problem(p, trials=5_000, seed=13)
    assert rep.passed, str(rep)
    assert p.anchor_weight == 0.7
    assert p.anchor_value(zero_fn) == pytest.approx(0.7)
    assert p.anchor_value(lambda pts: np.ones(np.atleast_2d(pts).shape[0])) == 0.0
