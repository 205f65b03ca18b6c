"""Ready-made problem instances with synthetic generators and exact oracles.

Four instantiations: policy evaluation on a finite Markov chain,
nonparametric instrumental-variable regression, consumption-based asset
pricing on a finite chain, and shift-functional Riesz representer
estimation.  Each builder returns a (MomentProblem, GroundTruth) pair whose
oracles are exact (finite-state linear solves, quadrature) rather than
nested Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problems import GroundTruth, MomentProblem, SamplePlan, as_fn


class ChainMisspecifiedError(ValueError):
    """The finite-state pricing equation has no positive unit-eigenvalue solution."""


def _grid_fn(grid: np.ndarray, values: np.ndarray):
    """Evaluator for functions known by their values on a 1-D grid."""
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)

    def fn(pts):
        pts = np.atleast_2d(pts)[:, 0]
        idx = np.abs(pts[:, None] - grid[None, :]).argmin(axis=1)
        return values[idx]

    return fn


def _nearest_idx(grid: np.ndarray, pts) -> np.ndarray:
    pts = np.atleast_2d(pts)[:, 0]
    return np.abs(pts[:, None] - np.asarray(grid)[None, :]).argmin(axis=1)


def _sample_categorical(rng, cdf, m):
    idx = np.searchsorted(cdf, rng.random(m), side="right")
    return np.minimum(idx, cdf.size - 1)


def _stationary(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, i])
    pi = np.abs(pi)
    return pi / pi.sum()


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteMdp:
    """Finite-state Markov chain induced by a fixed policy, states embedded in [-1, 1]."""

    states: np.ndarray  # (n,) grid in [-1, 1]
    transition: np.ndarray  # (n, n) row-stochastic
    rewards: np.ndarray  # (n,) in [0, 1]
    gamma: float
    stationary: np.ndarray = field(default=None)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        pi = self.stationary if self.stationary is not None else _stationary(P)
        pi = np.asarray(pi, dtype=np.float64)
        if np.abs(pi @ P - pi).max() > 1e-10:
            raise ValueError("stationary distribution is not a left fixed point")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "stationary", pi)
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.float64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.states.size

    @classmethod
    def random(cls, n_states=16, gamma=0.9, mixing=0.3, seed=0) -> "FiniteMdp":
        """Random ergodic chain: Dirichlet rows blended with the uniform kernel."""
        rng = np.random.default_rng(seed)
        raw = rng.dirichlet(np.ones(n_states) * 0.5, size=n_states)
        P = (1.0 - mixing) * raw + mixing / n_states
        P /= P.sum(axis=1, keepdims=True)
        return cls(
            states=np.linspace(-1.0, 1.0, n_states),
            transition=P,
            rewards=rng.uniform(0.0, 1.0, n_states),
            gamma=gamma,
        )

    def value_function(self) -> np.ndarray:
        return np.linalg.solve(np.eye(self.n) - self.gamma * self.transition, self.rewards)


def make_policy_eval(mdp: FiniteMdp, lam: float):
    """Bellman-residual moment problem; the functional pairs the next-state
    evaluation with weight gamma against the current-state evaluation."""
    n = mdp.n
    states = mdp.states
    P, r, gamma, pi = mdp.transition, mdp.rewards, mdp.gamma, mdp.stationary
    cdf_pi = np.cumsum(pi)
    cdf_rows = np.cumsum(P, axis=1)

    def build_plan(i_cur, i_next):
        s = states[i_cur].reshape(-1, 1)
        sp = states[i_next].reshape(-1, 1)
        return SamplePlan.build(
            z=s,
            phi0=r[i_cur],
            phi_terms=[(sp, gamma), (s, -1.0)],
            psi_terms=[(sp, 1.0)],
        )

    def sample(rng, m):
        i_cur = _sample_categorical(rng, cdf_pi, m)
        u = rng.random(m)
        i_next = np.minimum(
            (u[:, None] >= cdf_rows[i_cur]).sum(axis=1), n - 1
        )
        return build_plan(i_cur, i_next)

    def support():
        i_cur, i_next = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i_cur, i_next = i_cur.ravel(), i_next.ravel()
        weights = (pi[:, None] * P).ravel()
        return build_plan(i_cur, i_next), weights

    problem = MomentProblem(
        name="policy_eval",
        lam=lam,
        dim_w=1,
        dim_z=1,
        w_box=[[-1.0], [1.0]],
        z_box=[[-1.0], [1.0]],
        sample=sample,
        support=support,
        strong_convexity=1.0,
    )

    # exact saddle on the grid: minimize the stationary-weighted Bellman
    # residual plus the regularizer over the per-state values
    A = gamma * P - np.eye(n)
    Pi = np.diag(pi)
    if lam == 0.0:
        v_star = mdp.value_function()
    else:
        v_star = np.linalg.solve(A.T @ Pi @ A + 2.0 * lam * Pi, -A.T @ Pi @ r)
    delta_star = r + A @ v_star

    def cond_exp(z_pts, f):
        idx = _nearest_idx(states, z_pts)
        fvals = np.asarray(as_fn(f)(states.reshape(-1, 1)))
        return r[idx] + gamma * (P[idx] @ fvals) - fvals[idx]

    gt = GroundTruth(
        f_star=_grid_fn(states, v_star),
        g_star=_grid_fn(states, delta_star),
        cond_exp=cond_exp,
        f0=_grid_fn(states, mdp.value_function()),
        info={"v_star": v_star, "mdp": mdp},
    )
    return problem, gt


# ---------------------------------------------------------------------------
# nonparametric instrumental variables
# ---------------------------------------------------------------------------

_GH_NODES = 24
_NPIV_GRID = 401
_NPIV_ZNODES = 80


@dataclass(frozen=True)
class NpivDesign:
    """Synthetic design Y = f0(X) + noise with instrument Z.

    X = tanh(a Z + b U) with U standard normal, so the conditional law X | Z
    is available in closed form; the noise is correlated with U (endogeneity)
    but mean-independent of Z.
    """

    a: float = 1.0
    b: float = 0.5
    noise: float = 0.1
    endogeneity: float = 0.5

    def f0(self, x):
        x = np.asarray(x)
        return np.sin(np.pi * x) * (1.0 - x * x)

    def cond_density(self, x, z):
        """Density of X | Z = z at x, for x in (-1, 1)."""
        t = (np.arctanh(x) - self.a * z) / self.b
        return np.exp(-0.5 * t * t) / (np.sqrt(2 * np.pi) * self.b * (1.0 - x * x))


def make_npiv(design: NpivDesign, lam: float):
    gh_x, gh_w = np.polynomial.hermite.hermgauss(_GH_NODES)
    u_nodes = np.sqrt(2.0) * gh_x
    u_weights = gh_w / np.sqrt(np.pi)
    a, b = design.a, design.b
    rho = design.endogeneity

    def sample(rng, m):
        z = rng.uniform(-1.0, 1.0, m)
        u = rng.standard_normal(m)
        x = np.tanh(a * z + b * u)
        eps = design.noise * (rho * u + np.sqrt(1.0 - rho * rho) * rng.standard_normal(m))
        y = design.f0(x) + eps
        x = x.reshape(-1, 1)
        return SamplePlan.build(
            z=z.reshape(-1, 1),
            phi0=y,
            phi_terms=[(x, -1.0)],
            psi_terms=[(x, 1.0)],
        )

    problem = MomentProblem(
        name="npiv",
        lam=lam,
        dim_w=1,
        dim_z=1,
        w_box=[[-1.0], [1.0]],
        z_box=[[-1.0], [1.0]],
        sample=sample,
        strong_convexity=1.0,
    )

    def cond_exp(z_pts, f):
        z = np.atleast_2d(z_pts)[:, 0]
        xs = np.tanh(a * z[:, None] + b * u_nodes[None, :])  # (m, K)
        diff = design.f0(xs) - np.asarray(as_fn(f)(xs.reshape(-1, 1))).reshape(xs.shape)
        return diff @ u_weights

    if lam == 0.0:
        f_star = lambda pts: design.f0(np.atleast_2d(pts)[:, 0])  # noqa: E731
        g_star = lambda pts: np.zeros(np.atleast_2d(pts).shape[0])  # noqa: E731
        info = {}
    else:
        xg, vg, mass = _npiv_ridge_values(design, lam)
        f_star = lambda pts: np.interp(np.atleast_2d(pts)[:, 0], xg, vg)  # noqa: E731
        g_star = lambda pts: cond_exp(pts, f_star)  # noqa: E731
        info = {"grid": xg, "values": vg, "grid_mass": mass}

    gt = GroundTruth(
        f_star=f_star,
        g_star=g_star,
        cond_exp=cond_exp,
        f0=lambda pts: design.f0(np.atleast_2d(pts)[:, 0]),
        info=info,
    )
    return problem, gt


def _npiv_ridge_values(design: NpivDesign, lam: float):
    """Regularized solution on a dense grid: ridge-penalized least squares for
    the discretized conditional-expectation operator."""
    xg = np.linspace(-1.0 + 1e-3, 1.0 - 1e-3, _NPIV_GRID)
    wx = np.full(xg.size, xg[1] - xg[0])
    wx[0] *= 0.5
    wx[-1] *= 0.5
    zg, wz = np.polynomial.legendre.leggauss(_NPIV_ZNODES)
    wz = wz / 2.0  # uniform density on [-1, 1]
    K = design.cond_density(xg[None, :], zg[:, None]) * wx[None, :]
    mass = wz @ K  # marginal weight of each grid cell
    G = K.T @ (wz[:, None] * K)
    f0g = design.f0(xg)
    v = np.linalg.solve(G + 2.0 * lam * np.diag(mass), G @ f0g)
    return xg, v, mass


# ---------------------------------------------------------------------------
# asset pricing (consumption growth chain)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CcapmChain:
    """Finite-state consumption-growth chain with per-transition modified returns."""

    grid: np.ndarray  # (n,) consumption-growth values
    transition: np.ndarray  # (n, n)
    rtilde: np.ndarray  # (n, n), rtilde[i, j] observed on transition i -> j
    r_bound: float
    ref_idx: int
    stationary: np.ndarray = field(default=None)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if np.abs(self.rtilde).max() > self.r_bound + 1e-12:
            raise ValueError("modified returns exceed the stated bound")
        pi = self.stationary if self.stationary is not None else _stationary(P)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "stationary", np.asarray(pi, dtype=np.float64))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=np.float64))
        object.__setattr__(self, "rtilde", np.asarray(self.rtilde, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.grid.size

    @classmethod
    def random(cls, n_states=24, r_bound=1.5, seed=0) -> "CcapmChain":
        """Chain constructed so a positive unit-eigenvalue solution exists with
        return values inside the bound."""
        rng = np.random.default_rng(seed)
        grid = np.linspace(0.7, 1.3, n_states)
        raw = rng.dirichlet(np.ones(n_states), size=n_states)
        P = 0.8 * raw + 0.2 / n_states
        P /= P.sum(axis=1, keepdims=True)
        amp = 0.9 * (r_bound - 1.0) / (r_bound + 1.0)
        f0 = 1.0 + amp * np.sin(2.0 * np.pi * (grid - grid[0]) / (grid[-1] - grid[0]))
        rtilde = f0[:, None] / f0[None, :]
        ref_idx = int(np.abs(grid - 1.0).argmin())
        return cls(grid, P, rtilde, r_bound, ref_idx)


def make_ccapm(chain: CcapmChain, lam: float, kappa: float = 0.0):
    """Homogeneous pricing equation.  kappa > 0 adds an identification
    penalty pinning the function to 1 at the reference state; kappa = 0
    keeps the raw (scale-degenerate) equation."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    n = chain.n
    grid, P, R = chain.grid, chain.transition, chain.rtilde
    pi = chain.stationary
    cdf_pi = np.cumsum(pi)
    cdf_rows = np.cumsum(P, axis=1)

    M = P * R
    # structural solution: positive eigenvector at eigenvalue one
    w, V = np.linalg.eig(M)
    i_unit = int(np.argmin(np.abs(w - 1.0)))
    if abs(w[i_unit] - 1.0) > 1e-8:
        raise ChainMisspecifiedError(
            f"no unit eigenvalue (closest: {w[i_unit]:.6f})"
        )
    f0_vec = np.real(V[:, i_unit])
    f0_vec = f0_vec * np.sign(f0_vec[chain.ref_idx])
    if np.any(f0_vec <= 0):
        raise ChainMisspecifiedError("unit eigenvector is not positive")
    f0_vec = f0_vec / f0_vec[chain.ref_idx]

    def build_plan(i_cur, i_next):
        c = grid[i_cur].reshape(-1, 1)
        cp = grid[i_next].reshape(-1, 1)
        return SamplePlan.build(
            z=c,
            phi0=0.0,
            phi_terms=[(cp, R[i_cur, i_next]), (c, -1.0)],
            psi_terms=[(cp, 1.0)],
        )

    def sample(rng, m):
        i_cur = _sample_categorical(rng, cdf_pi, m)
        u = rng.random(m)
        i_next = np.minimum((u[:, None] >= cdf_rows[i_cur]).sum(axis=1), n - 1)
        return build_plan(i_cur, i_next)

    def support():
        i_cur, i_next = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i_cur, i_next = i_cur.ravel(), i_next.ravel()
        return build_plan(i_cur, i_next), (pi[:, None] * P).ravel()

    box = [[grid[0] - 0.1], [grid[-1] + 0.1]]
    problem = MomentProblem(
        name="ccapm",
        lam=lam,
        dim_w=1,
        dim_z=1,
        w_box=box,
        z_box=box,
        sample=sample,
        support=support,
        strong_convexity=1.0,
        anchor_pt=[grid[chain.ref_idx]] if kappa > 0 else None,
        anchor_weight=kappa,
        anchor_target=1.0,
    )

    # exact regularized solution on the grid
    B = M - np.eye(n)
    Pi = np.diag(pi)
    H = B.T @ Pi @ B + 2.0 * lam * Pi
    rhs = np.zeros(n)
    if kappa > 0:
        e = np.zeros(n)
        e[chain.ref_idx] = 1.0
        H = H + 2.0 * kappa * np.outer(e, e)
        rhs = 2.0 * kappa * e
    if kappa == 0.0 and lam == 0.0:
        v_star = np.zeros(n)  # degenerate minimum of the homogeneous objective
    else:
        v_star = np.linalg.solve(H, rhs)
    delta_star = M @ v_star - v_star

    def cond_exp(z_pts, f):
        idx = _nearest_idx(grid, z_pts)
        fvals = np.asarray(as_fn(f)(grid.reshape(-1, 1)))
        return M[idx] @ fvals - fvals[idx]

    gt = GroundTruth(
        f_star=_grid_fn(grid, v_star),
        g_star=_grid_fn(grid, delta_star),
        cond_exp=cond_exp,
        f0=_grid_fn(grid, f0_vec),
        info={"f0_vec": f0_vec, "v_star": v_star, "chain": chain},
    )
    return problem, gt


# ---------------------------------------------------------------------------
# Riesz representer (shift functional)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RieszShift:
    """Shift functional m(x; g) = g(x + delta) - g(x) under a truncated
    Gaussian base density; the representer is the density ratio minus one."""

    delta: float = 0.5
    sigma: float = 1.0

    @property
    def sample_halfwidth(self) -> float:
        return 4.0 * self.sigma

    @property
    def box_halfwidth(self) -> float:
        return 4.0 * self.sigma + 4.0 * abs(self.delta)

    def f0(self, x):
        x = np.asarray(x)
        return np.exp((2.0 * self.delta * x - self.delta**2) / (2.0 * self.sigma**2)) - 1.0

    @property
    def truncation_mass(self) -> float:
        from scipy.stats import norm

        return float(2.0 * norm.sf(self.sample_halfwidth / self.sigma))


def make_riesz(spec: RieszShift, lam: float):
    L = spec.sample_halfwidth
    B = spec.box_halfwidth

    def sample(rng, m):
        x = rng.normal(0.0, spec.sigma, m)
        bad = np.abs(x) > L
        while np.any(bad):
            x[bad] = rng.normal(0.0, spec.sigma, int(bad.sum()))
            bad = np.abs(x) > L
        x = x.reshape(-1, 1)
        # dual ascent uses the shift functional directly instead of the
        # representer-valued moment, which is what makes estimation tractable
        return SamplePlan.build(
            z=x,
            phi0=spec.f0(x[:, 0]),
            phi_terms=[(x, -1.0)],
            psi_terms=[(x, 1.0)],
            m_terms=[(x + spec.delta, 1.0), (x, -1.0)],
            resid=(0.0, [(x, -1.0)]),
        )

    problem = MomentProblem(
        name="riesz",
        lam=lam,
        dim_w=1,
        dim_z=1,
        w_box=[[-B], [B]],
        z_box=[[-B], [B]],
        sample=sample,
        strong_convexity=1.0,
    )

    scale = 1.0 / (1.0 + 2.0 * lam)

    def f_star(pts):
        return scale * spec.f0(np.atleast_2d(pts)[:, 0])

    def g_star(pts):
        return (1.0 - scale) * spec.f0(np.atleast_2d(pts)[:, 0])

    def cond_exp(z_pts, f):
        z = np.atleast_2d(z_pts)
        return spec.f0(z[:, 0]) - np.asarray(as_fn(f)(z))

    gt = GroundTruth(
        f_star=f_star,
        g_star=g_star,
        cond_exp=cond_exp,
        f0=lambda pts: spec.f0(np.atleast_2d(pts)[:, 0]),
        info={"truncation_mass": spec.truncation_mass},
    )
    return problem, gt


# ---------------------------------------------------------------------------
# config-driven construction
# ---------------------------------------------------------------------------

APPLICATIONS = ("policy_eval", "npiv", "ccapm", "riesz")


def from_config(application: str, params: dict):
    """Build a (problem, ground truth) pair from flat config keys."""
    lam = float(params.get("lambda", 0.05))
    seed = int(params.get("seed", 0))
    if application == "policy_eval":
        mdp = FiniteMdp.random(
            n_states=int(params.get("n_states", 16)),
            gamma=float(params.get("gamma", 0.9)),
            mixing=float(params.get("mixing", 0.3)),
            seed=seed,
        )
        return make_policy_eval(mdp, lam)
    if application == "npiv":
        design = NpivDesign(
            a=float(params.get("a", 1.0)),
            b=float(params.get("b", 0.5)),
            noise=float(params.get("noise", 0.1)),
        )
        return make_npiv(design, lam)
    if application == "ccapm":
        chain = CcapmChain.random(
            n_states=int(params.get("n_states", 24)),
            r_bound=float(params.get("R", 1.5)),
            seed=seed,
        )
        return make_ccapm(chain, lam, kappa=float(params.get("kappa", 0.0)))
    if application == "riesz":
        spec = RieszShift(
            delta=float(params.get("delta", 0.5)),
            sigma=float(params.get("sigma", 1.0)),
        )
        return make_riesz(spec, lam)
    raise ValueError(f"unknown application {application!r}; expected one of {APPLICATIONS}")
