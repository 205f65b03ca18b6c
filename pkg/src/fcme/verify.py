"""Fast invariant suite behind ``fcme verify``.

Every check is a cheap, seeded version of an invariant the test suite also
covers at full scale: analytic-gradient agreement with finite differences,
metric axioms, problem-structure identities, dynamics equivalences, and
stationarity at the oracles.  Budget: well under two minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import applications as apps
from . import kernels, metrics
from .dynamics import DynConfig, run_ctpgda, run_pgda, run_sgda, sgda_update_direction
from .nets import NeuronSpec, ParticleEnsemble, init_gaussian, neuron_eval, neuron_grad
from .problems import check_problem, zero_fn


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _problem_set(seed=0):
    return [
        apps.from_config("policy_eval", {"lambda": 0.1, "seed": seed}),
        apps.from_config("npiv", {"lambda": 0.1}),
        apps.from_config("ccapm", {"lambda": 0.1, "kappa": 0.5, "seed": seed}),
        apps.from_config("riesz", {"lambda": 0.1}),
    ]


# ---------------------------------------------------------------------------
# finite-difference oracle for the update direction
# ---------------------------------------------------------------------------


def sample_objective(p, plan, primal: ParticleEnsemble, dual: ParticleEnsemble) -> float:
    """Per-sample saddle integrand for the first plan row, evaluated through
    the problem closures (independent of the drift kernels)."""
    row = plan.rows(0, 1)
    f = primal.as_fn()
    g = dual.as_fn()
    gz = float(np.asarray(g(row.z))[0])
    resid = float(row.resid_val(f)[0])
    m_part = float(
        np.sum(row.m_coef[0] * np.asarray(g(row.m_pts[0])))
    )
    psi = float(p.psi_value(row, f)[0])
    return m_part + resid * gz - 0.5 * gz * gz + p.lam * psi + p.anchor_value(f)


def finite_difference_direction(p, plan, primal, dual, i, which, step=1e-5):
    """Central finite differences of the per-sample integrand in neuron i's
    parameter; sign-flipped for the descending primal leg."""
    base = primal if which == "primal" else dual
    grad = np.empty(base.dim)
    for c in range(base.dim):
        parts_hi = base.particles.copy()
        parts_lo = base.particles.copy()
        parts_hi[i, c] += step
        parts_lo[i, c] -= step
        hi = base.replace_particles(parts_hi)
        lo = base.replace_particles(parts_lo)
        if which == "primal":
            val_hi = sample_objective(p, plan, hi, dual)
            val_lo = sample_objective(p, plan, lo, dual)
        else:
            val_hi = sample_objective(p, plan, primal, hi)
            val_lo = sample_objective(p, plan, primal, lo)
        grad[c] = (val_hi - val_lo) / (2.0 * step)
    return -grad if which == "primal" else grad


def gradient_check(n_instances=40, seed=0, tol=1e-5):
    """Max relative error of the analytic update direction against the
    finite-difference oracle over random instances of every application."""
    rng = np.random.default_rng(seed)
    problems = _problem_set(seed)
    worst = 0.0
    per_app = n_instances // len(problems)
    for p, _gt in problems:
        for _ in range(per_app):
            n = int(rng.integers(2, 6))
            alpha = float(rng.uniform(0.5, 3.0))
            primal = init_gaussian(n, p.dim_w + 2, rng.integers(2**32), alpha=alpha)
            dual = init_gaussian(n, p.dim_z + 2, rng.integers(2**32), alpha=alpha, kind="dual")
            plan = p.sample(rng, 1)
            i = int(rng.integers(0, n))
            for which in ("primal", "dual"):
                got = sgda_update_direction(p, plan, primal, dual, i, which)
                want = finite_difference_direction(p, plan, primal, dual, i, which)
                scale = max(np.linalg.norm(want), 1e-8)
                worst = max(worst, float(np.linalg.norm(got - want) / scale))
    return worst, worst < tol


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------


def _check(name, fn):
    t0 = time.time()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failure with the exception as witness
        return CheckResult(name, False, f"exception: {exc!r}", time.time() - t0)
    return CheckResult(name, passed, detail, time.time() - t0)


def _neuron_oddness():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 4))
        w = rng.uniform(-1, 1, d)
        param = rng.standard_normal(d + 2) * 2
        flipped = param.copy()
        flipped[0] *= -1
        worst = max(worst, abs(neuron_eval(w, param) + neuron_eval(w, flipped)))
    return worst < 1e-12, f"max |phi(beta) + phi(-beta)| = {worst:.2e}"


def _neuron_bounds():
    spec = NeuronSpec(input_dim=2, c1=1.0)
    obs = spec.sample_bounds(seed=1, draws=10_000)
    ok = obs["max_abs_phi"] <= spec.B0 and obs["max_grad_norm"] <= spec.B1
    return ok, (
        f"|phi| {obs['max_abs_phi']:.4f} <= B0={spec.B0:.4f}, "
        f"|grad| {obs['max_grad_norm']:.4f} <= B1={spec.B1:.4f}"
    )


def _neuron_fd():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        w = rng.uniform(-1, 1, d)
        param = rng.standard_normal(d + 2)
        g = neuron_grad(w, param)
        fd = np.empty_like(g)
        for c in range(g.size):
            hi, lo = param.copy(), param.copy()
            hi[c] += 1e-5
            lo[c] -= 1e-5
            fd[c] = (neuron_eval(w, hi) - neuron_eval(w, lo)) / 2e-5
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def _measure_linearity():
    rng = np.random.default_rng(3)
    a = init_gaussian(6, 4, 10, alpha=2.0)
    b = init_gaussian(10, 4, 11, alpha=2.0)
    both = a.concat(b)
    pts = rng.uniform(-1, 1, (32, 2))
    lhs = both.values(pts)
    rhs = (a.n * a.values(pts) + b.n * b.values(pts)) / (a.n + b.n)
    worst = float(np.abs(lhs - rhs).max())
    return worst < 1e-12, f"concat vs weighted average: {worst:.2e}"


def _serialization():
    ens = init_gaussian(8, 3, 5, alpha=1.5, kind="dual")
    back = ParticleEnsemble.from_json(ens.to_json())
    ok = (
        np.array_equal(back.particles, ens.particles)
        and back.alpha == ens.alpha
        and back.kind == ens.kind
    )
    return ok, "JSON round trip bit-exact" if ok else "round trip mismatch"


def _problem_checks():
    details = []
    ok = True
    for p, _gt in _problem_set():
        rep = check_problem(p, trials=10_000, seed=4)
        ok = ok and rep.passed
        if not rep.passed:
            details.append(f"{p.name}: {rep.failures()}")
    return ok, "; ".join(details) if details else "all four applications pass"


def _psi_convexity():
    rng = np.random.default_rng(5)
    worst = 0.0
    for p, _gt in _problem_set():
        plan = p.sample(rng, 200)
        for _ in range(4):
            f1 = init_gaussian(8, p.dim_w + 2, rng.integers(2**32), alpha=2.0).as_fn()
            f2 = init_gaussian(8, p.dim_w + 2, rng.integers(2**32), alpha=2.0).as_fn()
            mid = lambda pts: 0.5 * (f1(pts) + f2(pts))  # noqa: E731
            gap = p.psi_value(plan, mid) - 0.5 * (
                p.psi_value(plan, f1) + p.psi_value(plan, f2)
            )
            worst = max(worst, float(gap.max()))
    return worst <= 1e-10, f"max midpoint violation {worst:.2e}"


def _cond_exp_vs_mc():
    rng = np.random.default_rng(6)
    p, gt = apps.from_config("npiv", {"lambda": 0.0})
    design = apps.NpivDesign()
    f = init_gaussian(16, 3, 12, alpha=2.0).as_fn()
    worst = 0.0
    for z in np.linspace(-0.9, 0.9, 7):
        u = rng.standard_normal(400_000)
        x = np.tanh(design.a * z + design.b * u).reshape(-1, 1)
        vals = design.f0(x[:, 0]) - f(x)
        mc, se = vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size)
        quad = float(gt.cond_exp(np.array([[z]]), f)[0])
        worst = max(worst, abs(quad - mc) / se)
    return worst < 3.0, f"max |quadrature - MC| = {worst:.2f} standard errors"


def _bellman_oracle():
    mdp = apps.FiniteMdp.random(n_states=16, gamma=0.9, seed=7)
    v = mdp.value_function()
    resid = mdp.rewards + mdp.gamma * mdp.transition @ v - v
    worst = float(np.abs(resid).max())
    return worst < 1e-10, f"max Bellman residual {worst:.2e}"


def _riesz_identity():
    rng = np.random.default_rng(8)
    spec = apps.RieszShift()
    p, _gt = apps.make_riesz(spec, 0.0)
    worst = 0.0
    x = rng.normal(0, spec.sigma, 100_000)
    x = x[np.abs(x) <= spec.sample_halfwidth].reshape(-1, 1)
    for _ in range(10):
        g = init_gaussian(8, 3, rng.integers(2**32), alpha=2.0).as_fn()
        lhs = spec.f0(x[:, 0]) * g(x)
        rhs = g(x + spec.delta) - g(x)
        diff = lhs - rhs
        se = diff.std(ddof=1) / np.sqrt(diff.size)
        worst = max(worst, abs(diff.mean()) / se)
    return worst < 3.0, f"max representer-identity deviation {worst:.2f} standard errors"


def _gradient_check():
    worst, ok = gradient_check(n_instances=40, seed=9)
    return ok, f"max rel err {worst:.2e} over 40 instances"


def _determinism():
    p, _gt = apps.from_config("npiv", {"lambda": 0.05})
    cfg = DynConfig(alpha=2.0, n_primal=16, n_dual=16, steps=200, seed=13, antithetic=False)
    t1 = run_sgda(p, cfg)
    t2 = run_sgda(p, cfg)
    same = np.array_equal(
        t1.final.primal.particles, t2.final.primal.particles
    ) and np.array_equal(t1.final.dual.particles, t2.final.dual.particles)
    return same, "two runs bit-identical" if same else "runs differ"


def _equivalences():
    p, _gt = apps.from_config("policy_eval", {"lambda": 0.05, "seed": 3})
    cfg = DynConfig(alpha=2.0, n_primal=16, n_dual=16, steps=150, seed=17, batch=1)
    sg = run_sgda(p, cfg)
    pg = run_pgda(p, cfg)
    ct = run_ctpgda(p, replace(cfg, integrator="euler", substeps=1))
    ok1 = np.array_equal(sg.final.primal.particles, pg.final.primal.particles)
    ok2 = np.array_equal(pg.final.primal.particles, ct.final.primal.particles) and np.array_equal(
        pg.final.dual.particles, ct.final.dual.particles
    )
    detail = f"pgda(batch=1)==sgda: {ok1}; ctpgda(euler)==pgda: {ok2}"
    return ok1 and ok2, detail


def _stationarity_at_oracle():
    p, gt = apps.from_config("npiv", {"lambda": 0.0})
    dual0 = init_gaussian(32, 3, 21, antithetic=True, alpha=2.0, kind="dual")
    res = metrics.stationarity_residual(p, gt.f0, dual0, eval_batch=20_000, seed=22)
    ok = res.primal <= 4 * max(res.primal_se, 1e-15) and res.dual <= 4 * res.dual_se
    return ok, (
        f"primal {res.primal:.2e} (se {res.primal_se:.2e}), "
        f"dual {res.dual:.2e} (se {res.dual_se:.2e})"
    )


def _boundedness():
    p, _gt = apps.from_config("ccapm", {"lambda": 0.05, "kappa": 0.5, "seed": 1})
    cfg = DynConfig(alpha=4.0, n_primal=32, n_dual=32, steps=400, seed=23)
    traj = run_sgda(p, cfg)
    worst = 0.0
    rng = np.random.default_rng(0)
    pts = rng.uniform(p.w_box[0], p.w_box[1], size=(64, p.dim_w))
    for c in traj.checkpoints:
        worst = max(worst, float(np.abs(c.primal.values(pts)).max()))
        if not np.all(np.isfinite(c.primal.particles)):
            return False, "non-finite parameters"
    ok = worst <= cfg.alpha * 1.0 + 1e-12
    return ok, f"sup |f| = {worst:.3f} <= alpha = {cfg.alpha}"


def _w2_axioms():
    rng = np.random.default_rng(24)
    worst_tri = 0.0
    worst_sym = 0.0
    for _ in range(60):
        n = int(rng.integers(2, 64))
        d = int(rng.integers(1, 5))
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        c = rng.standard_normal((n, d))
        dab, dba = metrics.w2_exact(a, b), metrics.w2_exact(b, a)
        worst_sym = max(worst_sym, abs(dab - dba))
        worst_tri = max(
            worst_tri, dab - metrics.w2_exact(a, c) - metrics.w2_exact(c, b)
        )
        if metrics.w2_exact(a, a.copy()) != 0.0:
            return False, "identity of indiscernibles failed"
    ok = worst_sym == 0.0 and worst_tri <= 1e-9
    return ok, f"symmetry gap {worst_sym:.1e}, triangle slack {worst_tri:.2e}"


def _sliced_1d_exact():
    rng = np.random.default_rng(25)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 200))
        a = rng.standard_normal((n, 1))
        b = rng.standard_normal((n, 1))
        worst = max(
            worst,
            abs(metrics.w2_sliced(a, b, projections=7, seed=1) - metrics.w2_exact(a, b)),
        )
    return worst < 1e-10, f"max |sliced - exact| = {worst:.2e}"


def _sliced_order():
    rng = np.random.default_rng(26)
    ok = True
    for _ in range(20):
        a = rng.standard_normal((64, 3))
        b = rng.standard_normal((64, 3))
        w1 = metrics.sliced_distance(a, b, projections=64, seed=2, power=1)
        w2 = metrics.sliced_distance(a, b, projections=64, seed=2, power=2)
        ok = ok and w1 <= w2 + 1e-12
    return ok, "sliced absolute cost <= sliced quadratic cost"


def _potential_and_gap_at_oracles():
    p, gt = apps.from_config("policy_eval", {"lambda": 0.1, "seed": 5})
    v = metrics.potential_v(p, gt, gt.f_star, gt.g_star, eval_batch=5000, seed=1)
    gap = metrics.fenchel_gap(p, gt, gt.f_star, gt.g_star, eval_batch=5000, seed=2)
    ok = abs(v.value) < 1e-18 and abs(gap.value) < 1e-18
    return ok, f"V = {v.value:.2e}, gap = {gap.value:.2e} at the saddle oracles"


def _weak_error_pseudometric():
    rng = np.random.default_rng(27)
    dim = 4
    hd = metrics.default_test_dictionary(dim, seed=3)
    a = rng.standard_normal((50, dim))
    b = rng.standard_normal((50, dim))
    c = rng.standard_normal((50, dim))
    ok = metrics.weak_error(hd, a, a) == 0.0
    ok = ok and abs(metrics.weak_error(hd, a, b) - metrics.weak_error(hd, b, a)) < 1e-15
    ok = ok and metrics.weak_error(hd, a, b) <= metrics.weak_error(
        hd, a, c
    ) + metrics.weak_error(hd, c, b) + 1e-12
    return ok, "symmetry, identity, triangle hold on the fixed dictionary"


ALL_CHECKS = [
    ("neuron_oddness", _neuron_oddness),
    ("neuron_uniform_bounds", _neuron_bounds),
    ("neuron_gradient_fd", _neuron_fd),
    ("network_measure_linearity", _measure_linearity),
    ("ensemble_serialization", _serialization),
    ("problem_structure", _problem_checks),
    ("psi_convexity", _psi_convexity),
    ("cond_exp_quadrature_vs_mc", _cond_exp_vs_mc),
    ("bellman_oracle", _bellman_oracle),
    ("riesz_representer_identity", _riesz_identity),
    ("drift_gradient_fd", _gradient_check),
    ("run_determinism", _determinism),
    ("dynamics_equivalences", _equivalences),
    ("stationarity_at_oracle", _stationarity_at_oracle),
    ("network_boundedness", _boundedness),
    ("w2_metric_axioms", _w2_axioms),
    ("sliced_1d_matches_exact", _sliced_1d_exact),
    ("sliced_cost_ordering", _sliced_order),
    ("oracle_potential_and_gap", _potential_and_gap_at_oracles),
    ("weak_error_pseudometric", _weak_error_pseudometric),
]


def run_all(names=None) -> list:
    selected = ALL_CHECKS if names is None else [c for c in ALL_CHECKS if c[0] in names]
    return [_check(name, fn) for name, fn in selected]


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"kernel backend: {kernels.backend()}"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status}  [{r.seconds:5.1f}s]  {r.detail}")
    n_bad = sum(not r.passed for r in results)
    lines.append(
        f"{len(results) - n_bad}/{len(results)} checks passed"
        + ("" if n_bad == 0 else f"; first failure: {next(r.name for r in results if not r.passed)}")
    )
    return "\n".join(lines)
