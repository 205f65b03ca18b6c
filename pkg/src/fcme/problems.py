"""Linear functional conditional moment problems.

A problem bundles a synthetic data sampler with the affine moment functional
and the convex quadratic regularizer, both exposed through finite
point-evaluation structure ("sample plans", see :mod:`fcme.kernels`): the
variation of the functional is a signed combination of Dirac masses, so its
pairing with any test function is a finite sum of point evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .nets import ParticleEnsemble


def as_fn(obj) -> Callable[[np.ndarray], np.ndarray]:
    """Normalize an ensemble / callable / constant into a vectorized function."""
    if isinstance(obj, ParticleEnsemble):
        return obj.as_fn()
    if callable(obj):
        return obj
    val = float(obj)
    return lambda pts: np.full(np.atleast_2d(pts).shape[0], val)


def zero_fn(pts) -> np.ndarray:
    return np.zeros(np.atleast_2d(pts).shape[0])


def _stack_terms(terms, n, d):
    """[(pts (n, d), coef scalar | (n,)), ...] -> (n, T, d), (n, T) arrays."""
    if not terms:
        pts = np.zeros((n, 1, d))
        coef = np.zeros((n, 1))
        return pts, coef
    pts = np.stack(
        [np.ascontiguousarray(p, dtype=np.float64).reshape(n, d) for p, _ in terms],
        axis=1,
    )
    coef = np.stack(
        [np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)) for _, c in terms],
        axis=1,
    )
    return np.ascontiguousarray(pts), np.ascontiguousarray(coef)


@dataclass(frozen=True)
class SamplePlan:
    """A batch of data tuples reduced to evaluation points and coefficients."""

    phi0: np.ndarray
    phi_pts: np.ndarray
    phi_coef: np.ndarray
    psi_pts: np.ndarray
    psi_coef: np.ndarray
    z: np.ndarray
    m_pts: np.ndarray
    m_coef: np.ndarray
    r0: np.ndarray
    r_pts: np.ndarray
    r_coef: np.ndarray

    @classmethod
    def build(cls, z, phi0, phi_terms, psi_terms, m_terms=None, resid=None):
        """Assemble a plan.

        ``phi_terms`` / ``psi_terms`` are lists of (points, coefficient)
        pairs; ``resid`` optionally overrides the residual entering the dual
        drift as a (offset, terms) pair (defaults to the functional itself);
        ``m_terms`` adds direct dual-gradient points.
        """
        z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
        n, dz = z.shape
        phi0 = np.ascontiguousarray(
            np.broadcast_to(np.asarray(phi0, dtype=np.float64), (n,))
        )
        dw = np.asarray(phi_terms[0][0]).reshape(n, -1).shape[1]
        phi_pts, phi_coef = _stack_terms(phi_terms, n, dw)
        psi_pts, psi_coef = _stack_terms(psi_terms, n, dw)
        m_pts, m_coef = _stack_terms(m_terms or [], n, dz)
        if resid is None:
            r0, r_pts, r_coef = phi0, phi_pts, phi_coef
        else:
            r0_in, r_terms = resid
            r0 = np.ascontiguousarray(
                np.broadcast_to(np.asarray(r0_in, dtype=np.float64), (n,))
            )
            r_pts, r_coef = _stack_terms(r_terms, n, dw)
        return cls(
            phi0, phi_pts, phi_coef, psi_pts, psi_coef,
            z, m_pts, m_coef, r0, r_pts, r_coef,
        )

    @property
    def n(self) -> int:
        return self.phi0.shape[0]

    @property
    def dim_w(self) -> int:
        return self.phi_pts.shape[2]

    @property
    def dim_z(self) -> int:
        return self.z.shape[1]

    def rows(self, lo, hi) -> "SamplePlan":
        return SamplePlan(
            self.phi0[lo:hi], self.phi_pts[lo:hi], self.phi_coef[lo:hi],
            self.psi_pts[lo:hi], self.psi_coef[lo:hi], self.z[lo:hi],
            self.m_pts[lo:hi], self.m_coef[lo:hi],
            self.r0[lo:hi], self.r_pts[lo:hi], self.r_coef[lo:hi],
        )

    def _eval_terms(self, pts, f):
        n, t, d = pts.shape
        return np.asarray(f(pts.reshape(-1, d))).reshape(n, t)

    def phi_lin(self, f) -> np.ndarray:
        """Pairing of the functional's variation with ``f``: sum of c_j f(pt_j)."""
        return np.sum(self.phi_coef * self._eval_terms(self.phi_pts, as_fn(f)), axis=1)

    def psi_val(self, f) -> np.ndarray:
        vals = self._eval_terms(self.psi_pts, as_fn(f))
        return np.sum(self.psi_coef * vals * vals, axis=1)

    def psi_pair(self, f, h) -> np.ndarray:
        fv = self._eval_terms(self.psi_pts, as_fn(f))
        hv = self._eval_terms(self.psi_pts, as_fn(h))
        return np.sum(2.0 * self.psi_coef * fv * hv, axis=1)

    def resid_val(self, f) -> np.ndarray:
        return self.r0 + np.sum(
            self.r_coef * self._eval_terms(self.r_pts, as_fn(f)), axis=1
        )


@dataclass(frozen=True)
class GroundTruth:
    """Oracles for a problem instance: the saddle pair, the conditional
    expectation of the moment functional, and (when identified) the true
    structural function."""

    f_star: Callable
    g_star: Callable
    cond_exp: Callable  # (z_pts, f) -> conditional moment values at z_pts
    f0: Optional[Callable] = None
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MomentProblem:
    """One conditional moment problem: sampler, functional, regularizer."""

    name: str
    lam: float
    dim_w: int
    dim_z: int
    w_box: np.ndarray  # (2, dim_w): lower / upper rows
    z_box: np.ndarray
    sample: Callable  # (rng, n) -> SamplePlan
    support: Optional[Callable] = None  # () -> (SamplePlan, weights), finite problems
    strong_convexity: Optional[float] = None
    anchor_pt: Optional[np.ndarray] = None
    anchor_weight: float = 0.0
    anchor_target: float = 1.0
    # overridable functionals; defaults derive from the plan structure
    phi_value_fn: Optional[Callable] = None
    psi_value_fn: Optional[Callable] = None
    psi_pairing_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        object.__setattr__(
            self, "w_box", np.asarray(self.w_box, dtype=np.float64).reshape(2, self.dim_w)
        )
        object.__setattr__(
            self, "z_box", np.asarray(self.z_box, dtype=np.float64).reshape(2, self.dim_z)
        )
        if self.anchor_pt is not None:
            object.__setattr__(
                self,
                "anchor_pt",
                np.ascontiguousarray(self.anchor_pt, dtype=np.float64).reshape(
                    self.dim_w
                ),
            )

    # --- functional surface ------------------------------------------------

    def phi_value(self, plan: SamplePlan, f) -> np.ndarray:
        if self.phi_value_fn is not None:
            return self.phi_value_fn(plan, as_fn(f))
        return plan.phi0 + plan.phi_lin(f)

    def phi_at_zero(self, plan: SamplePlan) -> np.ndarray:
        return self.phi_value(plan, zero_fn)

    def phi_pairing(self, plan: SamplePlan, h) -> np.ndarray:
        return plan.phi_lin(h)

    def psi_value(self, plan: SamplePlan, f) -> np.ndarray:
        if self.psi_value_fn is not None:
            return self.psi_value_fn(plan, as_fn(f))
        return plan.psi_val(f)

    def psi_pairing(self, plan: SamplePlan, f, h) -> np.ndarray:
        if self.psi_pairing_fn is not None:
            return self.psi_pairing_fn(plan, as_fn(f), as_fn(h))
        return plan.psi_pair(f, h)

    def anchor_value(self, f) -> float:
        """Optional identification penalty, kept outside the regularizer so
        the regularizer identities stay exact."""
        if self.anchor_weight == 0.0:
            return 0.0
        fa = float(as_fn(f)(self.anchor_pt.reshape(1, -1))[0])
        return self.anchor_weight * (fa - self.anchor_target) ** 2

    @property
    def kernel_anchor(self):
        if self.anchor_weight == 0.0:
            return (np.zeros(self.dim_w), 0.0, 0.0)
        return (self.anchor_pt, self.anchor_weight, self.anchor_target)


def phi_eval(p: MomentProblem, plan: SamplePlan, f) -> np.ndarray:
    """Value of the moment functional at each data tuple of ``plan``."""
    return p.phi_value(plan, f)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    """Max violations of the structural identities over random draws."""

    trials: int
    violations: dict
    witnesses: dict
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    def failures(self) -> dict:
        return {k: v for k, v in self.violations.items() if v > self.tol}

    def __str__(self):
        lines = [f"problem check over {self.trials} draws:"]
        for k in sorted(self.violations):
            flag = "ok" if self.violations[k] <= self.tol else "FAIL"
            lines.append(f"  {k:24s} {self.violations[k]:.3e}  {flag}")
            if self.violations[k] > self.tol and k in self.witnesses:
                lines.append(f"    witness: {self.witnesses[k]}")
        return "\n".join(lines)


def _rand_net(rng, dim_w, width=16, alpha=1.5):
    from .nets import init_gaussian

    return init_gaussian(
        width, dim_w + 2, rng.integers(2**32), alpha=alpha
    ).as_fn()


def check_problem(p: MomentProblem, trials: int = 10_000, seed=0) -> CheckReport:
    """Verify affinity of the functional, the regularizer identities, the
    strong-convexity lower bound and box membership on random draws."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    plan = p.sample(rng, trials)

    viol = {}
    wit = {}

    def record(key, values):
        values = np.atleast_1d(values)
        j = int(np.argmax(values))
        if key not in viol or values[j] > viol[key]:
            viol[key] = float(values[j])
            wit[key] = _witness(plan, j if values.size > 1 else 0)

    for _ in range(4):
        f1 = _rand_net(rng, p.dim_w)
        f2 = _rand_net(rng, p.dim_w)
        h = _rand_net(rng, p.dim_w)
        a, b = rng.uniform(-2, 2, size=2)
        comb = lambda pts: a * f1(pts) + b * f2(pts)  # noqa: E731

        zero = p.phi_at_zero(plan)
        lhs = p.phi_value(plan, comb) - zero
        rhs = a * (p.phi_value(plan, f1) - zero) + b * (p.phi_value(plan, f2) - zero)
        record("phi_affinity", np.abs(lhs - rhs))

        record("psi_at_zero", np.abs(p.psi_value(plan, zero_fn)))
        record("psi_nonneg", np.maximum(0.0, -p.psi_value(plan, f1)))
        lin = (
            p.psi_pairing(plan, comb, h)
            - a * p.psi_pairing(plan, f1, h)
            - b * p.psi_pairing(plan, f2, h)
        )
        record("psi_pairing_linear", np.abs(lin))

        if p.strong_convexity is not None:
            fw = plan._eval_terms(plan.psi_pts, f1)[:, 0]
            gap = p.strong_convexity * fw**2 - p.psi_value(plan, f1)
            record("psi_strong_convexity", np.maximum(0.0, gap))

        # finiteness of the variation's total mass (integrability condition)
        mass = np.sum(np.abs(plan.phi_coef), axis=1)
        record("phi_variation_mass_finite", np.where(np.isfinite(mass), 0.0, np.inf))

    record("w_box", _box_violation(plan.phi_pts, p.w_box))
    record("w_box_psi", _box_violation(plan.psi_pts, p.w_box))
    record("z_box", _box_violation(plan.z[:, None, :], p.z_box))

    return CheckReport(trials=trials, violations=viol, witnesses=wit)


def _box_violation(pts, box):
    below = np.maximum(0.0, box[0] - pts).max(axis=(1, 2))
    above = np.maximum(0.0, pts - box[1]).max(axis=(1, 2))
    return np.maximum(below, above)


def _witness(plan: SamplePlan, j: int) -> dict:
    return {
        "row": j,
        "z": plan.z[j].tolist(),
        "phi_pts": plan.phi_pts[j].tolist(),
        "phi_coef": plan.phi_coef[j].tolist(),
        "phi0": float(plan.phi0[j]),
    }
