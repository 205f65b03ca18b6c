"""Descent-ascent dynamics over particle ensembles.

Four related dynamics share one drift definition (see :mod:`fcme.kernels`):

* ``run_sgda``   - one fresh data tuple per iteration (the estimator).
* ``run_pgda``   - batch Monte Carlo estimate of the population drift.
* ``run_ctpgda`` - continuous-time integration of the population drift.
* ``run_ip``     - particles driven by the drift field of a frozen
  reference trajectory instead of their own empirical law.

``couple_dynamics`` runs all four under common random numbers and a shared
initialization and reports the pairwise coupling gaps plus a weak error
against a wide reference, the quantities whose decay certifies the
mean-field limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .metrics import default_test_dictionary, weak_error
from .nets import ParticleEnsemble, init_gaussian
from .problems import MomentProblem

_MAX_SEGMENT_ROWS = 1 << 20


class DivergenceError(RuntimeError):
    """A parameter left the divergence guard; signals a stepsize too large."""

    def __init__(self, iteration: int, guard: float):
        super().__init__(
            f"parameter norm exceeded {guard:g} at iteration {iteration}"
        )
        self.iteration = iteration


class GridMismatchError(ValueError):
    """Reference trajectory does not cover the requested time grid."""


@dataclass
class DynConfig:
    """Configuration of one dynamics run.

    ``eta`` defaults to alpha^-2 and ``eps`` to 1/width (per network); both
    are overridable.  ``steps`` counts iterations of length ``eps`` in
    continuous time, so t = k * eps exactly.
    """

    alpha: float = 4.0
    n_primal: int = 256
    n_dual: int = 256
    steps: int = 10_000
    eta: Optional[float] = None
    eps: Optional[float] = None
    batch: int = 1
    integrator: str = "euler"
    substeps: int = 1
    seed: int = 0
    checkpoint_every: Optional[int] = None  # None -> geometric schedule
    n_checkpoints: int = 100
    antithetic: bool = True
    guard: float = 1e6
    freeze_primal: bool = False
    freeze_dual: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.n_primal < 1 or self.n_dual < 1:
            raise ValueError("widths must be >= 1")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError("integrator must be 'euler' or 'rk4'")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def eta_resolved(self) -> float:
        return self.eta if self.eta is not None else self.alpha**-2

    @property
    def eps_primal(self) -> float:
        return self.eps if self.eps is not None else 1.0 / self.n_primal

    @property
    def eps_dual(self) -> float:
        return self.eps if self.eps is not None else 1.0 / self.n_dual

    @property
    def eps_time(self) -> float:
        """The time-scale step: t advances by this per iteration."""
        return self.eps if self.eps is not None else 1.0 / self.n_primal


@dataclass(frozen=True)
class Checkpoint:
    k: int
    t: float
    primal: ParticleEnsemble
    dual: ParticleEnsemble


@dataclass
class Trajectory:
    kind: str
    problem_name: str
    config: DynConfig
    checkpoints: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def append(self, k, t, th, om, alpha):
        if self.checkpoints and k <= self.checkpoints[-1].k:
            raise ValueError("checkpoint iterations must be strictly increasing")
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(om))):
            raise DivergenceError(k, np.inf)
        self.checkpoints.append(
            Checkpoint(
                k=k,
                t=t,
                primal=ParticleEnsemble(th.copy(), alpha, "primal"),
                dual=ParticleEnsemble(om.copy(), alpha, "dual"),
            )
        )

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def checkpoint_schedule(steps, every=None, n_checkpoints=100):
    """Iteration indices at which snapshots are taken, always covering 0 and
    ``steps``.  The default is geometric so log-log rate plots stay
    well-sampled."""
    if steps == 0:
        return [0]
    if every is not None:
        ks = list(range(0, steps + 1, every))
        if ks[-1] != steps:
            ks.append(steps)
        return ks
    raw = np.geomspace(1, steps, num=min(n_checkpoints, steps))
    ks = sorted(set([0] + [int(round(v)) for v in raw]))
    if ks[-1] != steps:
        ks.append(steps)
    return ks


def _seeded_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _init_pair(p: MomentProblem, cfg: DynConfig):
    primal = init_gaussian(
        cfg.n_primal,
        p.dim_w + 2,
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)),
        antithetic=cfg.antithetic,
        alpha=cfg.alpha,
        kind="primal",
    )
    dual = init_gaussian(
        cfg.n_dual,
        p.dim_z + 2,
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)),
        antithetic=cfg.antithetic,
        alpha=cfg.alpha,
        kind="dual",
    )
    return primal.particles.copy(), dual.particles.copy()


# ---------------------------------------------------------------------------
# update direction (single sample, single neuron)
# ---------------------------------------------------------------------------


def sgda_update_direction(
    p: MomentProblem, sample, primal: ParticleEnsemble, dual: ParticleEnsemble,
    i: int, which: str,
) -> np.ndarray:
    """Per-neuron stochastic update direction for the first row of ``sample``.

    Returns the drift including the width scale 1/N; the caller applies the
    stepsize eta.  ``which`` selects the descending (primal) or ascending
    (dual) leg.
    """
    if which not in ("primal", "dual"):
        raise ValueError("which must be 'primal' or 'dual'")
    n = primal.n if which == "primal" else dual.n
    if not 0 <= i < n:
        raise IndexError(f"neuron index {i} out of range for width {n}")
    vf = np.zeros_like(primal.particles)
    vg = np.zeros_like(dual.particles)
    kernels.drift(
        primal.particles, dual.particles, primal.particles, dual.particles,
        sample, 0, 1, primal.alpha, p.lam, p.kernel_anchor, vf, vg,
    )
    if which == "primal":
        return vf[i] / primal.n
    return vg[i] / dual.n


# ---------------------------------------------------------------------------
# discrete dynamics (SGDA / PGDA)
# ---------------------------------------------------------------------------


def _run_discrete(p: MomentProblem, cfg: DynConfig, batch: int, kind: str) -> Trajectory:
    th, om = _init_pair(p, cfg)
    data_rng = _seeded_rng(cfg.seed, 2)
    traj = Trajectory(kind=kind, problem_name=p.name, config=cfg)
    eps_t = cfg.eps_time
    traj.append(0, 0.0, th, om, cfg.alpha)
    ks = checkpoint_schedule(cfg.steps, cfg.checkpoint_every, cfg.n_checkpoints)
    chunk_iters = max(1, _MAX_SEGMENT_ROWS // batch)
    for k0, k1 in zip(ks[:-1], ks[1:]):
        k = k0
        while k < k1:
            kc = min(k1, k + chunk_iters)
            plan = p.sample(data_rng, (kc - k) * batch)
            bad = kernels.gda_segment(
                th, om, plan, batch,
                cfg.eta_resolved, cfg.eps_primal, cfg.eps_dual,
                cfg.alpha, p.lam, p.kernel_anchor,
                guard=cfg.guard,
                freeze_primal=cfg.freeze_primal,
                freeze_dual=cfg.freeze_dual,
            )
            if bad >= 0:
                raise DivergenceError(k + bad, cfg.guard)
            k = kc
        traj.append(k1, k1 * eps_t, th, om, cfg.alpha)
    return traj


def run_sgda(p: MomentProblem, cfg: DynConfig) -> Trajectory:
    """Stochastic iteration: one fresh data tuple per step."""
    return _run_discrete(p, cfg, batch=1, kind="sgda")


def run_pgda(p: MomentProblem, cfg: DynConfig) -> Trajectory:
    """Population iteration: batch-mean drift per step.  With batch = 1 and
    the same seed the iterates coincide with ``run_sgda`` bit for bit."""
    return _run_discrete(p, cfg, batch=cfg.batch, kind="pgda")


# ---------------------------------------------------------------------------
# continuous-time dynamics
# ---------------------------------------------------------------------------


def _stage_drift(th_eval, om_eval, th_src, om_src, plan, lo, hi, alpha, lam, anchor):
    vf = np.empty_like(th_eval)
    vg = np.empty_like(om_eval)
    kernels.drift(th_eval, om_eval, th_src, om_src, plan, lo, hi, alpha, lam, anchor, vf, vg)
    return vf, vg


def _interval_steps(cfg) -> tuple:
    """Per-substep increments eta * eps / substeps for each network.

    Computed as (eta * eps) / substeps so that substeps = 1 reproduces the
    discrete iteration's step product bit for bit.
    """
    eta = cfg.eta_resolved
    return (eta * cfg.eps_primal) / cfg.substeps, (eta * cfg.eps_dual) / cfg.substeps


def _advance_interval(th, om, plan, lo, hi, cfg, p):
    """One iteration interval of length eps, integrated in ``substeps`` steps.

    The population drift is frozen to this interval's batch, matching the
    discretizations being coupled.
    """
    anchor = p.kernel_anchor
    hf, hg = _interval_steps(cfg)
    for _ in range(cfg.substeps):
        if cfg.integrator == "euler":
            vf, vg = _stage_drift(th, om, th, om, plan, lo, hi, cfg.alpha, p.lam, anchor)
            th += hf * vf
            om += hg * vg
        else:
            _rk4_self(th, om, plan, lo, hi, hf, hg, cfg, p)


def _rk4_self(th, om, plan, lo, hi, hf, hg, cfg, p):
    anchor = p.kernel_anchor
    k1f, k1g = _stage_drift(th, om, th, om, plan, lo, hi, cfg.alpha, p.lam, anchor)
    t2, o2 = th + 0.5 * hf * k1f, om + 0.5 * hg * k1g
    k2f, k2g = _stage_drift(t2, o2, t2, o2, plan, lo, hi, cfg.alpha, p.lam, anchor)
    t3, o3 = th + 0.5 * hf * k2f, om + 0.5 * hg * k2g
    k3f, k3g = _stage_drift(t3, o3, t3, o3, plan, lo, hi, cfg.alpha, p.lam, anchor)
    t4, o4 = th + hf * k3f, om + hg * k3g
    k4f, k4g = _stage_drift(t4, o4, t4, o4, plan, lo, hi, cfg.alpha, p.lam, anchor)
    th += (hf / 6.0) * (k1f + 2 * k2f + 2 * k3f + k4f)
    om += (hg / 6.0) * (k1g + 2 * k2g + 2 * k3g + k4g)


def run_ctpgda(p: MomentProblem, cfg: DynConfig) -> Trajectory:
    """Continuous-time population dynamics integrated over t in [0, steps*eps].

    With the euler integrator and substeps = 1 the iterates equal
    ``run_pgda``'s exactly (the discrete iteration is the Euler scheme)."""
    th, om = _init_pair(p, cfg)
    data_rng = _seeded_rng(cfg.seed, 2)
    traj = Trajectory(kind="ctpgda", problem_name=p.name, config=cfg)
    eps_t = cfg.eps_time
    traj.append(0, 0.0, th, om, cfg.alpha)
    ks = checkpoint_schedule(cfg.steps, cfg.checkpoint_every, cfg.n_checkpoints)
    batch = cfg.batch
    chunk_iters = max(1, _MAX_SEGMENT_ROWS // batch)
    for k0, k1 in zip(ks[:-1], ks[1:]):
        k = k0
        while k < k1:
            kc = min(k1, k + chunk_iters)
            plan = p.sample(data_rng, (kc - k) * batch)
            for j in range(kc - k):
                _advance_interval(th, om, plan, j * batch, (j + 1) * batch, cfg, p)
            if np.abs(th).max() > cfg.guard or np.abs(om).max() > cfg.guard:
                raise DivergenceError(kc, cfg.guard)
            k = kc
        traj.append(k1, k1 * eps_t, th, om, cfg.alpha)
    return traj


def run_ip(p: MomentProblem, cfg: DynConfig, reference: Trajectory) -> Trajectory:
    """Ideal-particle dynamics: each particle follows the drift field computed
    against the reference trajectory's ensembles (frozen per interval),
    integrated with the Euler scheme on the reference grid.  Particles are
    mutually independent given the reference."""
    ref_cfg = reference.config
    if abs(ref_cfg.eps_time - cfg.eps_time) > 1e-15:
        raise GridMismatchError("reference eps does not match the requested grid")
    if abs(ref_cfg.alpha - cfg.alpha) > 0 or abs(
        ref_cfg.eta_resolved - cfg.eta_resolved
    ) > 0:
        raise GridMismatchError("reference alpha/eta do not match")
    ref_ks = [c.k for c in reference.checkpoints]
    if ref_ks != list(range(len(ref_ks))) or ref_ks[-1] < cfg.steps:
        raise GridMismatchError(
            "reference must checkpoint every iteration and cover the run length"
        )

    th, om = _init_pair(p, cfg)
    data_rng = _seeded_rng(cfg.seed, 2)
    traj = Trajectory(kind="ip", problem_name=p.name, config=cfg)
    eps_t = cfg.eps_time
    hf = cfg.eta_resolved * cfg.eps_primal
    hg = cfg.eta_resolved * cfg.eps_dual
    traj.append(0, 0.0, th, om, cfg.alpha)
    ks = checkpoint_schedule(cfg.steps, cfg.checkpoint_every, cfg.n_checkpoints)
    batch = cfg.batch
    for k0, k1 in zip(ks[:-1], ks[1:]):
        plan = p.sample(data_rng, (k1 - k0) * batch)
        for j, k in enumerate(range(k0, k1)):
            ref = reference.checkpoints[k]
            vf, vg = _stage_drift(
                th, om, ref.primal.particles, ref.dual.particles,
                plan, j * batch, (j + 1) * batch, cfg.alpha, p.lam, p.kernel_anchor,
            )
            th += hf * vf
            om += hg * vg
        if np.abs(th).max() > cfg.guard or np.abs(om).max() > cfg.guard:
            raise DivergenceError(k1, cfg.guard)
        traj.append(k1, k1 * eps_t, th, om, cfg.alpha)
    return traj


# ---------------------------------------------------------------------------
# coupling harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingRecord:
    width: int
    eps: float
    k: int
    t: float
    gap_ip_ctpgda: float
    gap_ctpgda_pgda: float
    gap_pgda_sgda: float
    weak_error_vs_ref: float


@dataclass
class CouplingReport:
    widths: list
    n_ref: int
    t_total: float
    records: list

    def rows_for(self, width):
        return [r for r in self.records if r.width == width]

    def finals(self):
        return [self.rows_for(w)[-1] for w in self.widths]


def _supnorm_gap(th_a, om_a, th_b, om_b) -> float:
    d2 = ((th_a - th_b) ** 2).sum(axis=1) + ((om_a - om_b) ** 2).sum(axis=1)
    return float(np.sqrt(d2.max()))


def couple_dynamics(
    p: MomentProblem, cfg: DynConfig, widths, n_ref: int, t_total=None
) -> CouplingReport:
    """Run the four dynamics per width under shared initialization and one
    common sample stream, against a width ``n_ref`` continuous-time reference
    (the surrogate for the mean-field law).  Reports the three coupling gaps
    and the weak error of the stochastic iterate against the reference at
    each checkpoint."""
    widths = list(widths)
    if t_total is None:
        t_total = cfg.steps * cfg.eps_time
    records = []
    for width in widths:
        eps_n = cfg.eps if cfg.eps is not None else 1.0 / width
        steps_n = max(1, int(round(t_total / eps_n)))
        wcfg = replace(
            cfg, n_primal=width, n_dual=width, eps=eps_n, steps=steps_n
        )
        records.extend(_couple_one_width(p, wcfg, n_ref))
    return CouplingReport(widths=widths, n_ref=n_ref, t_total=t_total, records=records)


def _couple_one_width(p: MomentProblem, cfg: DynConfig, n_ref: int):
    eta = cfg.eta_resolved
    anchor = p.kernel_anchor
    lam = p.lam
    alpha = cfg.alpha
    batch = cfg.batch
    step_f = eta * cfg.eps_primal
    step_g = eta * cfg.eps_dual
    hf, hg = _interval_steps(cfg)

    th0, om0 = _init_pair(p, cfg)
    sg_th, sg_om = th0.copy(), om0.copy()
    pg_th, pg_om = th0.copy(), om0.copy()
    ct_th, ct_om = th0.copy(), om0.copy()
    ip_th, ip_om = th0.copy(), om0.copy()
    ref_cfg = replace(cfg, n_primal=n_ref, n_dual=n_ref)
    ref_th, ref_om = _init_pair(p, ref_cfg)

    data_rng = _seeded_rng(cfg.seed, 2)
    hdict = default_test_dictionary(
        (p.dim_w + 2) + (p.dim_z + 2), seed=cfg.seed
    )
    ks = checkpoint_schedule(cfg.steps, cfg.checkpoint_every, min(cfg.n_checkpoints, 40))
    records = [
        _coupling_record(
            cfg, 0, sg_th, sg_om, pg_th, pg_om, ct_th, ct_om, ip_th, ip_om,
            ref_th, ref_om, hdict,
        )
    ]
    for k0, k1 in zip(ks[:-1], ks[1:]):
        plan = p.sample(data_rng, (k1 - k0) * batch)
        for j in range(k1 - k0):
            lo, hi = j * batch, (j + 1) * batch
            # stochastic iterate: single-sample drift (first column of the batch)
            vf, vg = _stage_drift(sg_th, sg_om, sg_th, sg_om, plan, lo, lo + 1, alpha, lam, anchor)
            sg_th += step_f * vf
            sg_om += step_g * vg
            # population iterate: batch-mean drift, Euler
            vf, vg = _stage_drift(pg_th, pg_om, pg_th, pg_om, plan, lo, hi, alpha, lam, anchor)
            pg_th += step_f * vf
            pg_om += step_g * vg
            # continuous-time iterate, reference and ideal particles advance
            # together so the ideal particles read the reference's stages
            for _ in range(cfg.substeps):
                if cfg.integrator == "euler":
                    vf, vg = _stage_drift(ct_th, ct_om, ct_th, ct_om, plan, lo, hi, alpha, lam, anchor)
                    ivf, ivg = _stage_drift(ip_th, ip_om, ref_th, ref_om, plan, lo, hi, alpha, lam, anchor)
                    rvf, rvg = _stage_drift(ref_th, ref_om, ref_th, ref_om, plan, lo, hi, alpha, lam, anchor)
                    ct_th += hf * vf
                    ct_om += hg * vg
                    ip_th += hf * ivf
                    ip_om += hg * ivg
                    ref_th += hf * rvf
                    ref_om += hg * rvg
                else:
                    _rk4_self(ct_th, ct_om, plan, lo, hi, hf, hg, cfg, p)
                    _rk4_coupled(
                        ip_th, ip_om, ref_th, ref_om, plan, lo, hi, hf, hg, cfg, p
                    )
        for arrs in ((sg_th, sg_om), (pg_th, pg_om), (ct_th, ct_om), (ip_th, ip_om), (ref_th, ref_om)):
            if max(np.abs(a).max() for a in arrs) > cfg.guard:
                raise DivergenceError(k1, cfg.guard)
        records.append(
            _coupling_record(
                cfg, k1, sg_th, sg_om, pg_th, pg_om, ct_th, ct_om, ip_th, ip_om,
                ref_th, ref_om, hdict,
            )
        )
    return records


def _rk4_coupled(ip_th, ip_om, ref_th, ref_om, plan, lo, hi, hf, hg, cfg, p):
    """Classical four-stage step advancing the reference and the ideal
    particles together; ideal-particle stage drifts read the reference's
    matching stage ensembles."""
    anchor = p.kernel_anchor
    a, lam = cfg.alpha, p.lam

    k1r = _stage_drift(ref_th, ref_om, ref_th, ref_om, plan, lo, hi, a, lam, anchor)
    k1i = _stage_drift(ip_th, ip_om, ref_th, ref_om, plan, lo, hi, a, lam, anchor)
    r2 = (ref_th + 0.5 * hf * k1r[0], ref_om + 0.5 * hg * k1r[1])
    i2 = (ip_th + 0.5 * hf * k1i[0], ip_om + 0.5 * hg * k1i[1])
    k2r = _stage_drift(r2[0], r2[1], r2[0], r2[1], plan, lo, hi, a, lam, anchor)
    k2i = _stage_drift(i2[0], i2[1], r2[0], r2[1], plan, lo, hi, a, lam, anchor)
    r3 = (ref_th + 0.5 * hf * k2r[0], ref_om + 0.5 * hg * k2r[1])
    i3 = (ip_th + 0.5 * hf * k2i[0], ip_om + 0.5 * hg * k2i[1])
    k3r = _stage_drift(r3[0], r3[1], r3[0], r3[1], plan, lo, hi, a, lam, anchor)
    k3i = _stage_drift(i3[0], i3[1], r3[0], r3[1], plan, lo, hi, a, lam, anchor)
    r4 = (ref_th + hf * k3r[0], ref_om + hg * k3r[1])
    i4 = (ip_th + hf * k3i[0], ip_om + hg * k3i[1])
    k4r = _stage_drift(r4[0], r4[1], r4[0], r4[1], plan, lo, hi, a, lam, anchor)
    k4i = _stage_drift(i4[0], i4[1], r4[0], r4[1], plan, lo, hi, a, lam, anchor)

    ip_th += (hf / 6.0) * (k1i[0] + 2 * k2i[0] + 2 * k3i[0] + k4i[0])
    ip_om += (hg / 6.0) * (k1i[1] + 2 * k2i[1] + 2 * k3i[1] + k4i[1])
    ref_th += (hf / 6.0) * (k1r[0] + 2 * k2r[0] + 2 * k3r[0] + k4r[0])
    ref_om += (hg / 6.0) * (k1r[1] + 2 * k2r[1] + 2 * k3r[1] + k4r[1])


def _coupling_record(
    cfg, k, sg_th, sg_om, pg_th, pg_om, ct_th, ct_om, ip_th, ip_om,
    ref_th, ref_om, hdict,
):
    joint_sg = np.concatenate([sg_th, sg_om], axis=1)
    joint_ref = np.concatenate([ref_th, ref_om], axis=1)
    return CouplingRecord(
        width=cfg.n_primal,
        eps=cfg.eps_time,
        k=k,
        t=k * cfg.eps_time,
        gap_ip_ctpgda=_supnorm_gap(ip_th, ip_om, ct_th, ct_om),
        gap_ctpgda_pgda=_supnorm_gap(ct_th, ct_om, pg_th, pg_om),
        gap_pgda_sgda=_supnorm_gap(pg_th, pg_om, sg_th, sg_om),
        weak_error_vs_ref=weak_error(hdict, joint_sg, joint_ref),
    )
