"""Mean-field stochastic descent-ascent for linear functional conditional
moment equations over scaled two-layer networks."""

__version__ = "0.1.0"

from .applications import (
    CcapmChain,
    FiniteMdp,
    NpivDesign,
    RieszShift,
    make_ccapm,
    make_npiv,
    make_policy_eval,
    make_riesz,
)
from .dynamics import (
    DivergenceError,
    DynConfig,
    Trajectory,
    couple_dynamics,
    run_ctpgda,
    run_ip,
    run_pgda,
    run_sgda,
    sgda_update_direction,
)
from .kernels import backend
from .metrics import (
    deviation_from_init,
    fenchel_gap,
    potential_v,
    primal_j,
    stationarity_residual,
    w2_exact,
    w2_sliced,
    weak_error,
)
from .nets import (
    NeuronParam,
    NeuronSpec,
    ParticleEnsemble,
    init_gaussian,
    network_eval,
    neuron_eval,
    neuron_grad,
)
from .problems import GroundTruth, MomentProblem, SamplePlan, check_problem, phi_eval

__all__ = [
    "CcapmChain",
    "DivergenceError",
    "DynConfig",
    "FiniteMdp",
    "GroundTruth",
    "MomentProblem",
    "NeuronParam",
    "NeuronSpec",
    "NpivDesign",
    "ParticleEnsemble",
    "RieszShift",
    "SamplePlan",
    "Trajectory",
    "backend",
    "check_problem",
    "couple_dynamics",
    "deviation_from_init",
    "fenchel_gap",
    "init_gaussian",
    "make_ccapm",
    "make_npiv",
    "make_policy_eval",
    "make_riesz",
    "network_eval",
    "neuron_eval",
    "neuron_grad",
    "phi_eval",
    "potential_v",
    "primal_j",
    "run_ctpgda",
    "run_ip",
    "run_pgda",
    "run_sgda",
    "sgda_update_direction",
    "stationarity_residual",
    "w2_exact",
    "w2_sliced",
    "weak_error",
]
