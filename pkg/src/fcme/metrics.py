"""Quantities the convergence theory speaks about.

Empirical Wasserstein distances (exact optimal assignment at small sizes,
sliced projections beyond), the Lyapunov potential, the primal objective,
the duality gap, stationarity residuals of the drift field, and weak errors
against reference ensembles.

Monte Carlo estimates come with standard errors; problems with finite
support are evaluated by exact enumeration instead (zero standard error),
which is what keeps acceptance thresholds noise-free on the finite-state
applications.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import expit

from .nets import ParticleEnsemble
from .problems import GroundTruth, MomentProblem, SamplePlan, as_fn

W2_EXACT_CAP = 1024
SLICED_PROJECTIONS = 256


@dataclass(frozen=True)
class MetricRecord:
    name: str
    t: float
    value: float
    aux: Optional[float] = None  # standard error when the value is an MC estimate

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite")
        if self.aux is not None and self.aux < 0:
            raise ValueError("standard error must be >= 0")


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __float__(self):
        return self.value


def _points(obj) -> np.ndarray:
    if isinstance(obj, ParticleEnsemble):
        return obj.particles
    return np.asarray(obj, dtype=np.float64)


# ---------------------------------------------------------------------------
# Wasserstein distances between equal-size empirical measures
# ---------------------------------------------------------------------------


def w2_exact(a, b, cap: int = W2_EXACT_CAP) -> float:
    """Quadratic-cost optimal assignment between equal-size point sets.

    Matched squared distances are summed in sorted order so the result is
    exactly symmetric in its arguments.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape != pb.shape:
        raise ValueError(f"size mismatch: {pa.shape} vs {pb.shape}")
    n = pa.shape[0]
    if n > cap:
        raise ValueError(
            f"{n} points exceeds the exact-solver cap {cap}; use w2_sliced"
        )
    cost = cdist(pa, pb, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    matched = np.sort(cost[rows, cols])
    return float(np.sqrt(matched.sum() / n))


def sliced_distance(a, b, projections: int = SLICED_PROJECTIONS, seed=0, power: int = 2) -> float:
    """Random-projection surrogate: rms (power=2) or mean absolute (power=1)
    one-dimensional transport cost over random unit directions."""
    if projections < 1:
        raise ValueError("projections must be >= 1")
    pa, pb = _points(a), _points(b)
    if pa.shape != pb.shape:
        raise ValueError(f"size mismatch: {pa.shape} vs {pb.shape}")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, pa.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj_a = np.sort(pa @ dirs.T, axis=0)
    proj_b = np.sort(pb @ dirs.T, axis=0)
    diff = proj_a - proj_b
    if power == 2:
        return float(np.sqrt(np.mean(diff * diff)))
    if power == 1:
        return float(np.mean(np.abs(diff)))
    raise ValueError("power must be 1 or 2")


def w2_sliced(a, b, projections: int = SLICED_PROJECTIONS, seed=0) -> float:
    return sliced_distance(a, b, projections=projections, seed=seed, power=2)


def deviation_from_init(traj, which: str) -> list:
    """W2 distance of each checkpoint's ensemble from the initial one,
    exact within the assignment cap, sliced beyond.  Returns (t, value) pairs."""
    if which not in ("primal", "dual", "joint"):
        raise ValueError("which must be 'primal', 'dual' or 'joint'")
    if not traj.checkpoints:
        raise ValueError("trajectory has no checkpoints")

    def dist(c0, c1):
        if which == "joint":
            # product-measure bound: root of summed squared marginal distances
            return float(
                np.sqrt(
                    dist_one(c0.primal, c1.primal) ** 2
                    + dist_one(c0.dual, c1.dual) ** 2
                )
            )
        return dist_one(getattr(c0, which), getattr(c1, which))

    def dist_one(e0, e1):
        if e0.n <= W2_EXACT_CAP:
            return w2_exact(e0, e1)
        return w2_sliced(e0, e1)

    first = traj.checkpoints[0]
    return [(c.t, dist(first, c)) for c in traj.checkpoints]


# ---------------------------------------------------------------------------
# objective-side metrics
# ---------------------------------------------------------------------------


def _draw(p: MomentProblem, batch, seed):
    """Finite support when available (exact weights), else a fresh MC batch."""
    if p.support is not None:
        plan, w = p.support()
        return plan, np.asarray(w, dtype=np.float64), True
    rng = np.random.default_rng(seed)
    plan = p.sample(rng, batch)
    return plan, np.full(plan.n, 1.0 / plan.n), False


def _estimate(vals, weights, exact) -> Estimate:
    mean = float(weights @ vals)
    if exact:
        return Estimate(mean, 0.0)
    n = vals.size
    var = float(np.sum(weights * (vals - mean) ** 2))  # weights are 1/n here
    return Estimate(mean, float(np.sqrt(var / max(n - 1, 1))))


def potential_v(p: MomentProblem, gt: GroundTruth, primal, dual, eval_batch=20_000, seed=0) -> Estimate:
    """Lyapunov potential: regularizer distance of the primal to its saddle
    value plus squared dual error.  Zero exactly at the saddle oracles."""
    f = as_fn(primal)
    g = as_fn(dual)
    fstar, gstar = gt.f_star, gt.g_star
    plan, w, exact = _draw(p, eval_batch, seed)
    diff = lambda pts: np.asarray(f(pts)) - np.asarray(fstar(pts))  # noqa: E731
    vals = p.lam * p.psi_value(plan, diff) + (
        np.asarray(g(plan.z)) - np.asarray(gstar(plan.z))
    ) ** 2
    return _estimate(vals, w, exact)


def primal_j(p: MomentProblem, gt: GroundTruth, primal, outer_batch=20_000, seed=0) -> Estimate:
    """Penalized minimum-distance criterion J(f), using the conditional
    expectation oracle for the inner moment."""
    if gt.cond_exp is None:
        raise ValueError("ground truth lacks a conditional-expectation oracle")
    f = as_fn(primal)
    plan, w, exact = _draw(p, outer_batch, seed)
    delta = np.asarray(gt.cond_exp(plan.z, f))
    vals = 0.5 * delta**2 + p.lam * p.psi_value(plan, f)
    est = _estimate(vals, w, exact)
    if p.anchor_weight:
        est = Estimate(est.value + p.anchor_value(f), est.stderr)
    return est


def fenchel_gap(p: MomentProblem, gt: GroundTruth, primal, dual, eval_batch=20_000, seed=0) -> Estimate:
    """J(f) - L(f, g) >= 0; vanishes iff the dual matches the conditional
    moment of the primal in L2.  Estimated pointwise as half the squared
    mismatch, which keeps the variance low."""
    f = as_fn(primal)
    g = as_fn(dual)
    plan, w, exact = _draw(p, eval_batch, seed)
    delta = np.asarray(gt.cond_exp(plan.z, f))
    vals = 0.5 * (delta - np.asarray(g(plan.z))) ** 2
    return _estimate(vals, w, exact)


def target_l2_error(p: MomentProblem, target_fn, primal, eval_batch=20_000, seed=0) -> Estimate:
    """Regularizer-weighted squared error E[Psi(X, Z; f - target)], the
    distance the strong-convexity results control."""
    f = as_fn(primal)
    t = as_fn(target_fn)
    plan, w, exact = _draw(p, eval_batch, seed)
    diff = lambda pts: np.asarray(f(pts)) - np.asarray(t(pts))  # noqa: E731
    return _estimate(p.psi_value(plan, diff), w, exact)


# ---------------------------------------------------------------------------
# stationarity of the drift field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationarityResidual:
    primal: float
    dual: float
    primal_se: float
    dual_se: float

    def __iter__(self):
        return iter((self.primal, self.dual))


def _grad_tensor(parts, pts):
    """Parameter gradient of each neuron at each point: (M, N, D)."""
    aug = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    u = aug @ parts[:, 1:].T
    s = expit(u)
    tb = np.tanh(parts[:, 0])
    out = np.empty((pts.shape[0], parts.shape[0], parts.shape[1]))
    out[:, :, 0] = (1.0 - tb * tb)[None, :] * s
    ds = s * (1.0 - s) * tb[None, :]
    out[:, :, 1:] = ds[:, :, None] * aug[:, None, :]
    return out


def _particles_or_probe(obj, dim, rng):
    if isinstance(obj, ParticleEnsemble):
        return obj.particles
    return rng.standard_normal((64, dim))


def _mean_and_se(parts, term_pts, term_scal, chunk=2048):
    """Per-particle mean drift and its norm-level standard error.

    ``term_pts`` has shape (S, T, d): T weighted point-gradients per sample.
    """
    s_tot, t_per, d = term_pts.shape
    n, dim = parts.shape
    acc = np.zeros((n, dim))
    acc2 = np.zeros((n, dim))
    for lo in range(0, s_tot, chunk):
        hi = min(s_tot, lo + chunk)
        g = _grad_tensor(parts, term_pts[lo:hi].reshape(-1, d)).reshape(
            hi - lo, t_per, n, dim
        )
        v = np.einsum("stnd,st->snd", g, term_scal[lo:hi])
        acc += v.sum(axis=0)
        acc2 += (v * v).sum(axis=0)
    mean = acc / s_tot
    var = np.maximum(acc2 / s_tot - mean**2, 0.0)
    se = np.sqrt(var.sum(axis=1) / s_tot)  # norm-level aggregation
    return mean, se


def stationarity_residual(
    p: MomentProblem, primal, dual, eval_batch=20_000, seed=0
) -> StationarityResidual:
    """Mean (over particles) norm of the batch-estimated drift field, for
    both legs, with matching Monte Carlo standard errors.

    Either side may be passed as a callable instead of an ensemble; the
    residual is then probed at auxiliary standard-normal particles, which
    matches the everywhere-zero requirement of stationarity.
    """
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_ss, probe_ss = base.spawn(2)
    rng = np.random.default_rng(data_ss)
    plan = p.sample(rng, eval_batch)
    alpha = primal.alpha if isinstance(primal, ParticleEnsemble) else (
        dual.alpha if isinstance(dual, ParticleEnsemble) else 1.0
    )
    f = as_fn(primal)
    g = as_fn(dual)
    probe_rng = np.random.default_rng(probe_ss)
    th = _particles_or_probe(primal, p.dim_w + 2, probe_rng)
    om = _particles_or_probe(dual, p.dim_z + 2, probe_rng)
    n_s = plan.n
    dw, dz = p.dim_w, p.dim_z

    gz = np.asarray(g(plan.z))
    f_psi = np.asarray(f(plan.psi_pts.reshape(-1, dw))).reshape(n_s, -1)
    f_r = np.asarray(f(plan.r_pts.reshape(-1, dw))).reshape(n_s, -1)
    resid = plan.r0 + np.sum(plan.r_coef * f_r, axis=1)

    prim_pts = np.concatenate([plan.phi_pts, plan.psi_pts], axis=1)
    prim_scal = np.concatenate(
        [
            (-alpha) * gz[:, None] * plan.phi_coef,
            (-alpha * p.lam * 2.0) * plan.psi_coef * f_psi,
        ],
        axis=1,
    )
    if p.anchor_weight:
        fa = float(np.asarray(f(p.anchor_pt.reshape(1, -1)))[0])
        a_scal = -alpha * 2.0 * p.anchor_weight * (fa - p.anchor_target)
        prim_pts = np.concatenate(
            [prim_pts, np.broadcast_to(p.anchor_pt, (n_s, 1, dw))], axis=1
        )
        prim_scal = np.concatenate(
            [prim_scal, np.full((n_s, 1), a_scal)], axis=1
        )
    vf, se_f = _mean_and_se(th, prim_pts, prim_scal)

    dual_pts = np.concatenate([plan.z[:, None, :], plan.m_pts], axis=1)
    dual_scal = np.concatenate(
        [(alpha * (resid - gz))[:, None], alpha * plan.m_coef], axis=1
    )
    vg, se_g = _mean_and_se(om, dual_pts, dual_scal)

    return StationarityResidual(
        primal=float(np.linalg.norm(vf, axis=1).mean()),
        dual=float(np.linalg.norm(vg, axis=1).mean()),
        primal_se=float(se_f.mean()),
        dual_se=float(se_g.mean()),
    )


# ---------------------------------------------------------------------------
# weak error against a reference ensemble
# ---------------------------------------------------------------------------


def default_test_dictionary(dim: int, seed=0, n_random_features: int = 16) -> list:
    """Bounded-Lipschitz test functions (sup norm and Lipschitz constant <= 1):
    rescaled per-coordinate tanh maps, products of two, and random Fourier
    features."""
    fns = []
    for j in range(min(dim, 8)):
        for c in (0.5, 1.0, 2.0):
            fns.append(_coord_tanh(j, c))
    rng = np.random.default_rng(seed)
    for _ in range(8):
        j1, j2 = rng.integers(0, dim, size=2)
        c1, c2 = rng.uniform(0.5, 2.0, size=2)
        fns.append(_prod_tanh(int(j1), c1, int(j2), c2))
    for _ in range(n_random_features):
        wvec = rng.standard_normal(dim) / np.sqrt(dim)
        b = rng.uniform(0.0, 2.0 * np.pi)
        fns.append(_fourier(wvec, b))
    return fns


def _coord_tanh(j, c):
    s = max(1.0, c)
    return lambda x: np.tanh(c * x[:, j]) / s


def _prod_tanh(j1, c1, j2, c2):
    s = max(1.0, float(np.hypot(c1, c2)))
    return lambda x: np.tanh(c1 * x[:, j1]) * np.tanh(c2 * x[:, j2]) / s


def _fourier(wvec, b):
    s = max(1.0, float(np.linalg.norm(wvec)))
    return lambda x: np.cos(x @ wvec + b) / s


def weak_error(h_dict, ens_a, ens_b) -> float:
    """Max over the dictionary of the difference in empirical means; a
    pseudometric surrogate for weak convergence."""
    if not h_dict:
        raise ValueError("test dictionary must be nonempty")
    a = _points(ens_a)
    b = _points(ens_b)
    errs = [abs(float(np.mean(h(a))) - float(np.mean(h(b)))) for h in h_dict]
    return max(errs)
