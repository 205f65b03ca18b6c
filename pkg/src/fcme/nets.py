"""Scaled two-layer networks over particle ensembles.

A neuron with parameter vector ``[beta, w_1..w_d, bias]`` maps an input
``x`` to ``tanh(beta) * sigmoid(w . x + bias)``.  A network of width N with
scaling ``alpha`` is the scaled average ``(alpha / N) * sum_i neuron_i``, so
a network is fully described by an (N, D) parameter matrix, D = d + 2.  The
empirical distribution of the rows is the object the dynamics move.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid


def _augment(pts: np.ndarray) -> np.ndarray:
    """Append the constant-1 coordinate: (m, d) -> (m, d + 1)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)


@dataclass(frozen=True)
class NeuronParam:
    """One neuron's parameter: output-layer scalar and hidden vector (weights + bias)."""

    beta: float
    hidden: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hidden, dtype=np.float64)
        if not np.isfinite(self.beta) or not np.all(np.isfinite(h)):
            raise ValueError("neuron parameters must be finite")
        object.__setattr__(self, "hidden", h)

    @property
    def dim(self) -> int:
        return 1 + self.hidden.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.beta], self.hidden])

    @classmethod
    def from_array(cls, arr) -> "NeuronParam":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(beta=float(arr[0]), hidden=arr[1:].copy())


def _param_array(param) -> np.ndarray:
    if isinstance(param, NeuronParam):
        return param.as_array()
    return np.asarray(param, dtype=np.float64)


def neuron_eval(x, param) -> float:
    """tanh(beta) * sigmoid(hidden . (x, 1)).  Value lies in (-1, 1)."""
    p = _param_array(param)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != p.size - 2:
        raise ValueError(
            f"input dimension {x.size} does not match neuron dimension {p.size} - 2"
        )
    u = p[1:-1] @ x + p[-1]
    return float(np.tanh(p[0]) * sigmoid(u))


def neuron_grad(x, param) -> np.ndarray:
    """Gradient of neuron_eval in the parameter, laid out like the parameter."""
    p = _param_array(param)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != p.size - 2:
        raise ValueError(
            f"input dimension {x.size} does not match neuron dimension {p.size} - 2"
        )
    u = p[1:-1] @ x + p[-1]
    s = sigmoid(u)
    tb = np.tanh(p[0])
    g = np.empty_like(p)
    g[0] = (1.0 - tb * tb) * s
    ds = tb * s * (1.0 - s)
    g[1:-1] = ds * x
    g[-1] = ds
    return g


@dataclass(frozen=True)
class ParticleEnsemble:
    """N neurons plus the scaling alpha; immutable snapshot of one network.

    ``kind`` records which leg of the saddle problem the ensemble
    parameterizes ("primal" over W or "dual" over Z).
    """

    particles: np.ndarray
    alpha: float
    kind: str = "primal"

    def __post_init__(self):
        parts = np.asarray(self.particles, dtype=np.float64)
        if parts.ndim != 2 or parts.shape[0] < 1:
            raise ValueError("particles must be a nonempty (N, D) array")
        if not np.all(np.isfinite(parts)):
            raise ValueError("particles must be finite")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.kind not in ("primal", "dual"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        object.__setattr__(self, "particles", parts)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def input_dim(self) -> int:
        return self.dim - 2

    def values(self, pts) -> np.ndarray:
        """Network value at each row of ``pts``; scalar input gives a scalar."""
        scalar = np.ndim(pts) <= 1 and np.size(pts) == self.input_dim
        aug = _augment(np.reshape(pts, (-1, self.input_dim)))
        hidden_t = self.particles[:, 1:].T
        out_weights = np.tanh(self.particles[:, 0]) * (self.alpha / self.n)
        # chunked so the (m, N) intermediate stays small for large batches
        m = aug.shape[0]
        chunk = max(1, (1 << 21) // max(self.n, 1))
        vals = np.empty(m)
        for lo in range(0, m, chunk):
            hi = min(m, lo + chunk)
            vals[lo:hi] = sigmoid(aug[lo:hi] @ hidden_t) @ out_weights
        return float(vals[0]) if scalar else vals

    def as_fn(self):
        return lambda pts: self.values(pts)

    def replace_particles(self, parts: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(parts, self.alpha, self.kind)

    def concat(self, other: "ParticleEnsemble") -> "ParticleEnsemble":
        if other.alpha != self.alpha or other.dim != self.dim or other.kind != self.kind:
            raise ValueError("can only concatenate compatible ensembles")
        return self.replace_particles(
            np.concatenate([self.particles, other.particles], axis=0)
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "alpha": self.alpha,
                "N": self.n,
                "D": self.dim,
                "particles": self.particles.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ParticleEnsemble":
        rec = json.loads(text)
        parts = np.asarray(rec["particles"], dtype=np.float64).reshape(
            rec["N"], rec["D"]
        )
        return cls(parts, float(rec["alpha"]), rec["kind"])


def network_eval(ens: ParticleEnsemble, x):
    """Value of the ensemble's network at ``x``; |value| <= alpha."""
    return ens.values(x)


def init_gaussian(
    n: int,
    dim: int,
    seed,
    antithetic: bool = False,
    alpha: float = 1.0,
    kind: str = "primal",
) -> ParticleEnsemble:
    """Standard-normal ensemble of ``n`` particles in R^dim.

    With ``antithetic`` the particles come in (beta, h) / (-beta, h) pairs so
    the initial network is exactly the zero function; ``n`` must then be even.
    Deterministic given ``seed`` (an int or a SeedSequence).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if antithetic and n % 2 != 0:
        raise ValueError("antithetic initialization needs an even particle count")
    rng = np.random.default_rng(seed)
    if antithetic:
        half = rng.standard_normal((n // 2, dim))
        parts = np.empty((n, dim))
        parts[0::2] = half
        parts[1::2] = half
        parts[1::2, 0] *= -1.0  # adjacent pairs cancel exactly in ordered sums
    else:
        parts = rng.standard_normal((n, dim))
    return ParticleEnsemble(parts, alpha=alpha, kind=kind)


@dataclass(frozen=True)
class NeuronSpec:
    """The fixed neuron shape and its uniform regularity constants.

    b = tanh is odd with range (-1, 1); the activation is the logistic
    sigmoid.  B0, B1, B2 bound |phi|, the parameter gradient norm and the
    parameter Hessian Frobenius norm uniformly over the compact input box
    [-c1, c1]^d, and are computed from closed-form derivative bounds.
    """

    input_dim: int
    c1: float
    B0: float = field(init=False)
    B1: float = field(init=False)
    B2: float = field(init=False)

    # closed-form extrema of tanh/sigmoid derivatives
    _MAX_ABS_TANH2 = 4.0 / (3.0 * np.sqrt(3.0))  # max |tanh''|
    _MAX_ABS_SIG2 = 1.0 / (6.0 * np.sqrt(3.0))  # max |sigmoid''|

    def __post_init__(self):
        r2 = self.input_dim * self.c1 ** 2 + 1.0  # sup ||(x, 1)||^2 over the box
        b0 = 1.0
        b1 = float(np.sqrt(1.0 * 1.0 + 1.0 * (r2 / 16.0)))
        # Hessian blocks: b''s | b's'(x,1) | b s''(x,1)(x,1)^T
        b2 = float(
            np.sqrt(
                self._MAX_ABS_TANH2 ** 2
                + 2.0 * (1.0 / 16.0) * r2
                + self._MAX_ABS_SIG2 ** 2 * r2 ** 2
            )
        )
        object.__setattr__(self, "B0", b0)
        object.__setattr__(self, "B1", b1)
        object.__setattr__(self, "B2", b2)

    @staticmethod
    def rescale(x):
        return np.tanh(x)

    @staticmethod
    def activation(x):
        return sigmoid(x)

    def sample_bounds(self, seed=0, draws: int = 10_000) -> dict:
        """Empirical maxima of |phi| and ||grad phi|| over random (input, param) draws."""
        rng = np.random.default_rng(seed)
        xs = rng.uniform(-self.c1, self.c1, size=(draws, self.input_dim))
        params = rng.standard_normal((draws, self.input_dim + 2)) * 3.0
        max_phi = 0.0
        max_grad = 0.0
        for x, p in zip(xs, params):
            max_phi = max(max_phi, abs(neuron_eval(x, p)))
            max_grad = max(max_grad, float(np.linalg.norm(neuron_grad(x, p))))
        return {"max_abs_phi": max_phi, "max_grad_norm": max_grad}
