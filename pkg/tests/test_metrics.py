import itertools

import numpy as np
import pytest

from fcme.applications import from_config
from fcme.dynamics import DynConfig, run_sgda
from fcme.metrics import (
    default_test_dictionary,
    deviation_from_init,
    fenchel_gap,
    potential_v,
    primal_j,
    sliced_distance,
    stationarity_residual,
    target_l2_error,
    w2_exact,
    w2_sliced,
    weak_error,
)
from fcme.nets import init_gaussian
from fcme.problems import MomentProblem, SamplePlan

from pilot_thresholds import SLICED_MIN_CORRELATION, SLICED_RATIO_BAND


def brute_force_w2(a, b):
    """Independent oracle: enumerate all couplings of the two point sets."""
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(np.sum((a[i] - b[j]) ** 2) for i, j in enumerate(perm))
        best = min(best, cost)
    return np.sqrt(best / n)


def test_w2_identity_and_singletons():
    a = np.random.default_rng(0).standard_normal((12, 3))
    assert w2_exact(a, a.copy()) == 0.0
    u, v = np.array([[1.0, 2.0]]), np.array([[4.0, -2.0]])
    assert w2_exact(u, v) == pytest.approx(5.0, abs=1e-14)


def test_w2_one_dimensional_frozen_example():
    # permutation enumeration: (0->0, 1->3) costs (0 + 9)/2 = 4.5,
    # (0->3, 1->0) costs (9 + 1)/2 = 5, so the distance is sqrt(4.5)
    a = np.array([[0.0], [1.0]])
    b = np.array([[0.0], [3.0]])
    assert w2_exact(a, b) == pytest.approx(2.1213203435596424, abs=1e-14)


def test_w2_matches_brute_force_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(1, 4))
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        assert w2_exact(a, b) == pytest.approx(brute_force_w2(a, b), abs=1e-12)


def test_w2_metric_axioms_two_hundred_triples():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 65))
        d = int(rng.integers(1, 5))
        a, b, c = (rng.standard_normal((n, d)) for _ in range(3))
        dab = w2_exact(a, b)
        assert dab == w2_exact(b, a)  # exact symmetry via sorted summation
        assert dab <= w2_exact(a, c) + w2_exact(c, b) + 1e-9
        assert w2_exact(a, a.copy()) == 0.0


def test_w2_size_checks():
    with pytest.raises(ValueError):
        w2_exact(np.zeros((3, 2)), np.zeros((4, 2)))
    big = np.zeros((2000, 2))
    with pytest.raises(ValueError, match="w2_sliced"):
        w2_exact(big, big)


def test_sliced_identity_and_1d_exactness():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((64, 5))
    assert w2_sliced(a, a.copy(), projections=16, seed=0) == 0.0
    x = rng.standard_normal((100, 1))
    y = rng.standard_normal((100, 1))
    assert w2_sliced(x, y, projections=9, seed=1) == pytest.approx(
        w2_exact(x, y), abs=1e-12
    )


def test_sliced_deterministic_and_validated():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((32, 3)), rng.standard_normal((32, 3))
    assert w2_sliced(a, b, seed=7) == w2_sliced(a, b, seed=7)
    with pytest.raises(ValueError):
        w2_sliced(a, b, projections=0)


def test_sliced_calibration_band_and_correlation():
    rng = np.random.default_rng(42)
    exacts, sliceds = [], []
    for rep in range(20):
        mu = rng.standard_normal(8) * rng.uniform(0.1, 1.0)
        a = rng.standard_normal((512, 8))
        b = rng.standard_normal((512, 8)) + mu
        exacts.append(w2_exact(a, b))
        sliceds.append(w2_sliced(a, b, projections=256, seed=rep))
    ratios = np.array(sliceds) / np.array(exacts)
    lo, hi = SLICED_RATIO_BAND
    assert np.all((ratios > lo) & (ratios < hi))
    assert np.corrcoef(exacts, sliceds)[0, 1] > SLICED_MIN_CORRELATION


def test_sliced_absolute_cost_below_quadratic():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a, b = rng.standard_normal((48, 4)), rng.standard_normal((48, 4))
        w1 = sliced_distance(a, b, projections=64, seed=3, power=1)
        w2 = sliced_distance(a, b, projections=64, seed=3, power=2)
        assert w1 <= w2 + 1e-12


@pytest.fixture(scope="module")
def npiv_run():
    p, gt = from_config("npiv", {"lambda": 0.1})
    cfg = DynConfig(alpha=2.0, n_primal=24, n_dual=24, steps=400, seed=6, antithetic=False, n_checkpoints=10)
    return p, gt, run_sgda(p, cfg)


def test_deviation_zero_at_start_and_frozen(npiv_run):
    _, _, traj = npiv_run
    series = deviation_from_init(traj, "primal")
    assert series[0] == (0.0, 0.0)

    def frozen_sample(rng, n):
        z = rng.uniform(-1, 1, (n, 1))
        return SamplePlan.build(z=z, phi0=0.0, phi_terms=[(z, 0.0)], psi_terms=[(z, 1.0)])

    frozen = MomentProblem(
        name="frozen", lam=0.0, dim_w=1, dim_z=1,
        w_box=[[-1], [1]], z_box=[[-1], [1]], sample=frozen_sample,
    )
    traj2 = run_sgda(frozen, DynConfig(n_primal=8, n_dual=8, steps=50, seed=7, antithetic=True))
    for _, val in deviation_from_init(traj2, "joint"):
        assert val < 1e-12


def test_deviation_validates_which(npiv_run):
    _, _, traj = npiv_run
    with pytest.raises(ValueError):
        deviation_from_init(traj, "sideways")


def test_potential_zero_at_oracles_and_dual_reduction():
    p, gt = from_config("policy_eval", {"lambda": 0.1, "seed": 1})
    est = potential_v(p, gt, gt.f_star, gt.g_star)
    assert est.value == 0.0 and est.stderr == 0.0  # exact enumeration
    p0, gt0 = from_config("policy_eval", {"lambda": 0.0, "seed": 1})
    f = init_gaussian(8, 3, 8, alpha=2.0)
    g = init_gaussian(8, 3, 9, alpha=2.0, kind="dual")
    v = potential_v(p0, gt0, f, g)
    plan, w = p0.support()
    dual_mse = float(w @ (g.values(plan.z) - gt0.g_star(plan.z)) ** 2)
    assert v.value == pytest.approx(dual_mse, rel=1e-12)


def test_potential_mc_stderr_halves_with_doubled_batch():
    p, gt = from_config("npiv", {"lambda": 0.1})
    f = init_gaussian(8, 3, 10, alpha=2.0)
    g = init_gaussian(8, 3, 11, alpha=2.0, kind="dual")
    ratios = []
    for seed in range(50):
        a = potential_v(p, gt, f, g, eval_batch=2000, seed=seed)
        b = potential_v(p, gt, f, g, eval_batch=4000, seed=1000 + seed)
        ratios.append(b.stderr**2 / a.stderr**2)
    assert 0.4 < np.mean(ratios) < 0.6


def test_primal_j_at_truth_and_zero_function():
    p, gt = from_config("npiv", {"lambda": 0.0})
    assert primal_j(p, gt, gt.f0, 20_000, 0).value < 1e-20
    plan = p.sample(np.random.default_rng(12), 200_000)
    p01, gt01 = from_config("npiv", {"lambda": 0.3})
    zero = lambda pts: np.zeros(np.atleast_2d(pts).shape[0])  # noqa: E731
    expected = 0.5 * np.mean(gt01.cond_exp(plan.z, zero) ** 2)  # regularizer vanishes at zero
    got = primal_j(p01, gt01, zero, 100_000, 13)
    assert got.value == pytest.approx(expected, abs=4 * got.stderr + 1e-4)


def test_primal_j_finite_state_matches_brute_force():
    p, gt = from_config("policy_eval", {"lambda": 0.2, "seed": 2})
    f = init_gaussian(16, 3, 14, alpha=2.0)
    mdp = gt.info["mdp"]
    fv = f.values(mdp.states.reshape(-1, 1))
    delta = mdp.rewards + mdp.gamma * mdp.transition @ fv - fv
    pi = mdp.stationary
    brute = 0.5 * pi @ delta**2 + 0.2 * float(
        (pi[:, None] * mdp.transition).sum(axis=0) @ fv**2
    )
    got = primal_j(p, gt, f).value
    assert got == pytest.approx(brute, rel=1e-10)


def test_fenchel_gap_examples():
    p, gt = from_config("npiv", {"lambda": 0.1})
    f = init_gaussian(8, 3, 15, alpha=2.0)
    oracle_dual = lambda_dual(gt, f)
    assert fenchel_gap(p, gt, f, oracle_dual, 5000, 0).value < 1e-25
    shifted = lambda pts: oracle_dual(pts) + 0.3  # noqa: E731
    est = fenchel_gap(p, gt, f, shifted, 20_000, 1)
    assert est.value == pytest.approx(0.045, abs=1e-12)  # c^2 / 2 exactly, pointwise
    rng = np.random.default_rng(16)
    for _ in range(100):
        g = init_gaussian(6, 3, rng.integers(2**32), alpha=2.0, kind="dual")
        e = fenchel_gap(p, gt, f, g, 2000, rng.integers(2**32))
        assert e.value >= -3 * e.stderr


def lambda_dual(gt, f):
    fn = f.as_fn()
    return lambda pts: gt.cond_exp(np.atleast_2d(pts), fn)


def test_stationarity_residual_zero_dual_unregularized():
    p, _ = from_config("npiv", {"lambda": 0.0})
    primal = init_gaussian(8, 3, 17, alpha=2.0)
    dual_zero = lambda pts: np.zeros(np.atleast_2d(pts).shape[0])  # noqa: E731
    res = stationarity_residual(p, primal, dual_zero, eval_batch=2000, seed=0)
    assert res.primal == 0.0


def test_stationarity_residual_at_realizable_solution():
    p, gt = from_config("npiv", {"lambda": 0.0})
    dual0 = init_gaussian(32, 3, 18, antithetic=True, alpha=2.0, kind="dual")
    res = stationarity_residual(p, gt.f0, dual0, eval_batch=50_000, seed=1)
    assert res.primal <= 4 * max(res.primal_se, 1e-15)
    assert res.dual <= 4 * res.dual_se


def test_stationarity_decreases_over_converging_run(npiv_run):
    p, _, traj = npiv_run
    first = stationarity_residual(
        p, traj.checkpoints[0].primal, traj.checkpoints[0].dual, 20_000, 2
    )
    last = stationarity_residual(p, traj.final.primal, traj.final.dual, 20_000, 2)
    assert last.dual < first.dual


def test_weak_error_identity_lipschitz_and_dictionary_classes():
    dim = 4
    hd = default_test_dictionary(dim, seed=0)
    rng = np.random.default_rng(19)
    a = rng.standard_normal((40, dim))
    assert weak_error(hd, a, a.copy()) == 0.0
    u = rng.standard_normal((1, dim))
    v = rng.standard_normal((1, dim))
    assert weak_error(hd, u, v) <= np.linalg.norm(u - v) + 1e-12
    # every dictionary element is bounded by one and 1-Lipschitz (sampled)
    x = rng.standard_normal((500, dim)) * 3
    y = x + rng.standard_normal((500, dim)) * 0.1
    for h in hd:
        hx, hy = h(x), h(y)
        assert np.abs(hx).max() <= 1.0 + 1e-12
        assert np.all(np.abs(hx - hy) <= np.linalg.norm(x - y, axis=1) + 1e-12)


def test_weak_error_pseudometric_axioms():
    dim = 3
    hd = default_test_dictionary(dim, seed=1)
    rng = np.random.default_rng(20)
    a, b, c = (rng.standard_normal((30, dim)) for _ in range(3))
    assert weak_error(hd, a, b) == weak_error(hd, b, a)
    assert weak_error(hd, a, b) <= weak_error(hd, a, c) + weak_error(hd, c, b) + 1e-12
    with pytest.raises(ValueError):
        weak_error([], a, b)


def test_target_l2_error_against_manual_value():
    p, gt = from_config("policy_eval", {"lambda": 0.1, "seed": 3})
    f = init_gaussian(8, 3, 21, alpha=2.0)
    plan, w = p.support()
    diff = lambda pts: f.values(pts) - gt.f_star(pts)  # noqa: E731
    manual = float(w @ p.psi_value(plan, diff))
    assert target_l2_error(p, gt.f_star, f).value == pytest.approx(manual, rel=1e-12)
