"""Hot numeric kernels for the particle dynamics.

Two interchangeable backends implement the same operations:

* ``numba`` (default): ``@njit``-compiled loops; the per-iteration update of
  every neuron runs inside compiled code, which is what makes long runs
  (10^5+ iterations) cheap.
* ``numpy``: pure-vectorized fallback, selected with ``FCME_BACKEND=numpy``.
  Bitwise determinism holds within a backend; across backends results agree
  to float accumulation order (~1e-13 relative).

All kernels consume "sample plans": per-sample arrays of evaluation points
and coefficients that encode the Dirac-mass variations of the moment
functional and regularizer, so the loops stay application-independent.

Plan layout (n = number of sample rows):
  phi0     (n,)         affine offset of the moment functional
  phi_pts  (n, P, dw)   points of the functional's variation, with
  phi_coef (n, P)       their signed coefficients
  psi_pts  (n, Q, dw)   points of the quadratic regularizer, with
  psi_coef (n, Q)       their nonnegative weights
  z        (n, dz)      dual evaluation point
  m_pts    (n, M, dz)   extra dual-ascent gradient points (zero coef if unused)
  m_coef   (n, M)
  r0       (n,)         offset of the residual entering the dual drift
  r_pts    (n, R, dw)   points of that residual's linear part
  r_coef   (n, R)

The drift convention follows the stochastic update direction with the
network scaling ``alpha`` on both the functional and regularizer terms;
the caller applies the stepsize ``eta`` and the width scale ``eps``.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import expit

DEFAULT_BACKEND = "numba"

_requested = os.environ.get("FCME_BACKEND", "").strip().lower() or DEFAULT_BACKEND
if _requested not in ("numba", "numpy"):
    raise RuntimeError(
        f"FCME_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

_HAVE_NUMBA = False
if _requested == "numba":
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # fall back silently; the numpy path is complete
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def backend() -> str:
    """Name of the active kernel backend."""
    return BACKEND


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _np_net_values(parts, alpha, pts):
    aug = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    u = aug @ parts[:, 1:].T
    vals = expit(u) @ np.tanh(parts[:, 0])
    return vals * (alpha / parts.shape[0])


def _np_accum(parts, pts, scal):
    """sum_t scal[t] * grad_param neuron(pts[t]; parts[i]) for every neuron i."""
    out = np.zeros_like(parts)
    if pts.shape[0] == 0:
        return out
    aug = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    u = aug @ parts[:, 1:].T  # (T, N)
    s = expit(u)
    tb = np.tanh(parts[:, 0])
    out[:, 0] = (1.0 - tb * tb) * (s.T @ scal)
    w = (s * (1.0 - s)) * tb[None, :] * scal[:, None]
    out[:, 1:] = w.T @ aug
    return out


def _np_drift(
    th_eval, om_eval, th_src, om_src,
    phi0, phi_pts, phi_coef, psi_pts, psi_coef,
    z, m_pts, m_coef, r0, r_pts, r_coef,
    lo, hi, alpha, lam, a_pt, a_w, a_tgt,
    out_vf, out_vg,
):
    m = hi - lo
    dw = phi_pts.shape[2]
    dz = z.shape[1]

    gz = _np_net_values(om_src, alpha, z[lo:hi])
    f_psi = _np_net_values(
        th_src, alpha, psi_pts[lo:hi].reshape(-1, dw)
    ).reshape(m, -1)
    f_r = _np_net_values(
        th_src, alpha, r_pts[lo:hi].reshape(-1, dw)
    ).reshape(m, -1)
    phi_val = r0[lo:hi] + np.sum(r_coef[lo:hi] * f_r, axis=1)

    # primal: functional term pairs with the variation points, regularizer
    # term with its own points
    scal_phi = (-alpha) * gz[:, None] * phi_coef[lo:hi]
    scal_psi = (-alpha * lam * 2.0) * psi_coef[lo:hi] * f_psi
    pts_f = np.concatenate(
        [phi_pts[lo:hi].reshape(-1, dw), psi_pts[lo:hi].reshape(-1, dw)]
    )
    scal_f = np.concatenate([scal_phi.ravel(), scal_psi.ravel()])
    out_vf[...] = _np_accum(th_eval, pts_f, scal_f) / m
    if a_w != 0.0:
        fa = _np_net_values(th_src, alpha, a_pt.reshape(1, -1))[0]
        out_vf += _np_accum(
            th_eval, a_pt.reshape(1, -1), np.array([-alpha * 2.0 * a_w * (fa - a_tgt)])
        )

    scal_z = alpha * (phi_val - gz)
    pts_g = np.concatenate([z[lo:hi], m_pts[lo:hi].reshape(-1, dz)])
    scal_g = np.concatenate([scal_z, alpha * m_coef[lo:hi].ravel()])
    out_vg[...] = _np_accum(om_eval, pts_g, scal_g) / m


def _np_gda_segment(
    th, om,
    phi0, phi_pts, phi_coef, psi_pts, psi_coef,
    z, m_pts, m_coef, r0, r_pts, r_coef,
    batch, eta, eps_f, eps_g, alpha, lam,
    a_pt, a_w, a_tgt, guard, freeze_primal, freeze_dual,
):
    n_iter = phi0.shape[0] // batch
    vf = np.empty_like(th)
    vg = np.empty_like(om)
    for k in range(n_iter):
        _np_drift(
            th, om, th, om,
            phi0, phi_pts, phi_coef, psi_pts, psi_coef,
            z, m_pts, m_coef, r0, r_pts, r_coef,
            k * batch, (k + 1) * batch, alpha, lam, a_pt, a_w, a_tgt,
            vf, vg,
        )
        if not freeze_primal:
            th += (eta * eps_f) * vf
        if not freeze_dual:
            om += (eta * eps_g) * vg
        if not (
            np.all(np.abs(th) <= guard) and np.all(np.abs(om) <= guard)
        ):
            return k
    return -1


# ---------------------------------------------------------------------------
# numba backend (same math, explicit loops)
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_sigmoid(u):
        if u >= 0.0:
            return 1.0 / (1.0 + np.exp(-u))
        e = np.exp(u)
        return e / (1.0 + e)

    @njit(cache=True)
    def _nb_net_at(parts, tb, alpha, pt):
        # tb holds tanh of the output-layer parameter, precomputed per call
        n, dim = parts.shape
        d = dim - 2
        acc = 0.0
        for i in range(n):
            u = parts[i, dim - 1]
            for c in range(d):
                u += parts[i, 1 + c] * pt[c]
            acc += tb[i] * _nb_sigmoid(u)
        return alpha * acc / n

    @njit(cache=True)
    def _nb_net_values(parts, alpha, pts):
        tb = np.tanh(parts[:, 0])
        out = np.empty(pts.shape[0])
        for j in range(pts.shape[0]):
            out[j] = _nb_net_at(parts, tb, alpha, pts[j])
        return out

    @njit(cache=True)
    def _nb_accum(parts, tb, pt, scal, out):
        n, dim = parts.shape
        d = dim - 2
        for i in range(n):
            u = parts[i, dim - 1]
            for c in range(d):
                u += parts[i, 1 + c] * pt[c]
            s = _nb_sigmoid(u)
            out[i, 0] += scal * (1.0 - tb[i] * tb[i]) * s
            ds = scal * tb[i] * s * (1.0 - s)
            for c in range(d):
                out[i, 1 + c] += ds * pt[c]
            out[i, dim - 1] += ds

    @njit(cache=True)
    def _nb_drift(
        th_eval, om_eval, th_src, om_src,
        phi0, phi_pts, phi_coef, psi_pts, psi_coef,
        z, m_pts, m_coef, r0, r_pts, r_coef,
        lo, hi, alpha, lam, a_pt, a_w, a_tgt,
        out_vf, out_vg,
    ):
        out_vf[...] = 0.0
        out_vg[...] = 0.0
        tb_f_src = np.tanh(th_src[:, 0])
        tb_g_src = np.tanh(om_src[:, 0])
        tb_f_ev = np.tanh(th_eval[:, 0])
        tb_g_ev = np.tanh(om_eval[:, 0])
        m = hi - lo
        inv_m = 1.0 / m
        for j in range(lo, hi):
            gz = _nb_net_at(om_src, tb_g_src, alpha, z[j])
            for p in range(phi_pts.shape[1]):
                c = phi_coef[j, p]
                if c != 0.0:
                    _nb_accum(
                        th_eval, tb_f_ev, phi_pts[j, p], -alpha * gz * c * inv_m, out_vf
                    )
            if lam != 0.0:
                for q in range(psi_pts.shape[1]):
                    c = psi_coef[j, q]
                    if c != 0.0:
                        fq = _nb_net_at(th_src, tb_f_src, alpha, psi_pts[j, q])
                        _nb_accum(
                            th_eval, tb_f_ev, psi_pts[j, q],
                            -alpha * lam * 2.0 * c * fq * inv_m, out_vf,
                        )
            phi_val = r0[j]
            for r in range(r_pts.shape[1]):
                c = r_coef[j, r]
                if c != 0.0:
                    phi_val += c * _nb_net_at(th_src, tb_f_src, alpha, r_pts[j, r])
            _nb_accum(om_eval, tb_g_ev, z[j], alpha * (phi_val - gz) * inv_m, out_vg)
            for t in range(m_pts.shape[1]):
                c = m_coef[j, t]
                if c != 0.0:
                    _nb_accum(om_eval, tb_g_ev, m_pts[j, t], alpha * c * inv_m, out_vg)
        if a_w != 0.0:
            fa = _nb_net_at(th_src, tb_f_src, alpha, a_pt)
            _nb_accum(th_eval, tb_f_ev, a_pt, -alpha * 2.0 * a_w * (fa - a_tgt), out_vf)

    @njit(cache=True)
    def _nb_gda_segment(
        th, om,
        phi0, phi_pts, phi_coef, psi_pts, psi_coef,
        z, m_pts, m_coef, r0, r_pts, r_coef,
        batch, eta, eps_f, eps_g, alpha, lam,
        a_pt, a_w, a_tgt, guard, freeze_primal, freeze_dual,
    ):
        n_iter = phi0.shape[0] // batch
        vf = np.zeros_like(th)
        vg = np.zeros_like(om)
        step_f = eta * eps_f
        step_g = eta * eps_g
        for k in range(n_iter):
            _nb_drift(
                th, om, th, om,
                phi0, phi_pts, phi_coef, psi_pts, psi_coef,
                z, m_pts, m_coef, r0, r_pts, r_coef,
                k * batch, (k + 1) * batch, alpha, lam, a_pt, a_w, a_tgt,
                vf, vg,
            )
            ok = True
            if not freeze_primal:
                for i in range(th.shape[0]):
                    for c in range(th.shape[1]):
                        v = th[i, c] + step_f * vf[i, c]
                        th[i, c] = v
                        if not (abs(v) <= guard):
                            ok = False
            if not freeze_dual:
                for i in range(om.shape[0]):
                    for c in range(om.shape[1]):
                        v = om[i, c] + step_g * vg[i, c]
                        om[i, c] = v
                        if not (abs(v) <= guard):
                            ok = False
            if not ok:
                return k
        return -1


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def net_values(parts, alpha, pts) -> np.ndarray:
    parts = np.ascontiguousarray(parts, dtype=np.float64)
    pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    if BACKEND == "numba":
        return _nb_net_values(parts, alpha, pts)
    return _np_net_values(parts, alpha, pts)


def drift(
    th_eval, om_eval, th_src, om_src, plan, lo, hi,
    alpha, lam, anchor, out_vf, out_vg,
):
    """Batch-mean update direction over plan rows [lo, hi).

    The drift is evaluated at the particles of ``th_eval`` / ``om_eval``
    while the networks appearing in the scalar factors are read from
    ``th_src`` / ``om_src`` (identical for the self-driven dynamics; the
    reference ensembles for ideal particles).  Results are written into
    ``out_vf`` / ``out_vg``.
    """
    a_pt, a_w, a_tgt = anchor
    args = (
        th_eval, om_eval, th_src, om_src,
        plan.phi0, plan.phi_pts, plan.phi_coef, plan.psi_pts, plan.psi_coef,
        plan.z, plan.m_pts, plan.m_coef, plan.r0, plan.r_pts, plan.r_coef,
        lo, hi, alpha, lam, a_pt, a_w, a_tgt, out_vf, out_vg,
    )
    if BACKEND == "numba":
        _nb_drift(*args)
    else:
        _np_drift(*args)


def gda_segment(
    th, om, plan, batch, eta, eps_f, eps_g, alpha, lam, anchor,
    guard=1e6, freeze_primal=False, freeze_dual=False,
) -> int:
    """Advance the coupled descent-ascent iteration over a whole plan segment.

    Mutates ``th`` and ``om`` in place, one update per ``batch`` consecutive
    plan rows (batch = 1 gives the fully stochastic iteration).  Returns -1
    on success, else the 0-based iteration index within the segment at which
    a parameter left [-guard, guard] (divergence).
    """
    a_pt, a_w, a_tgt = anchor
    args = (
        th, om,
        plan.phi0, plan.phi_pts, plan.phi_coef, plan.psi_pts, plan.psi_coef,
        plan.z, plan.m_pts, plan.m_coef, plan.r0, plan.r_pts, plan.r_coef,
        batch, eta, eps_f, eps_g, alpha, lam,
        a_pt, a_w, a_tgt, guard, freeze_primal, freeze_dual,
    )
    if BACKEND == "numba":
        return int(_nb_gda_segment(*args))
    return int(_np_gda_segment(*args))
