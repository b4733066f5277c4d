"""Natural-gradient variational inference and drift estimation for latent
stochastic differential equation models."""

from .chain import (
    GaussianPotential,
    MeanParams,
    NaturalParams,
    combine_potentials,
    kl_divergence,
    lds_chain,
    log_normalizer_parallel,
    log_normalizer_sequential,
    mean_to_natural,
    natural_to_mean,
)
from .dynamics import (
    DiffusionSpec,
    DuffingDrift,
    EmbeddedLorenzDrift,
    InitialState,
    LinearDrift,
    LorenzDrift,
    PolynomialDrift,
    VanDerPolDrift,
    euler_maruyama_sample,
)
from .errors import (
    ConfigError,
    Diverged,
    NotPositiveDefinite,
    StepFailed,
)
from .expectations import (
    DriftMoments,
    ExpectationConfig,
    drift_moments,
    transition_expectation,
    transition_expectation_gradients,
)
from .gp import (
    GPDrift,
    InducingPoints,
    InducingPosterior,
    RBFKernel,
    kernel_expectations,
    posterior_drift,
    slow_point_probability,
    update_inducing_posterior,
)
from .grids import TimeGrid
from .inference import (
    InferenceState,
    ModelBundle,
    RhoSchedule,
    SINGConfig,
    elbo_approx,
    fit,
    latents_rmse,
    ngvi_step,
)
from .baselines import VDPState, kalman_smooth, vdp_fit
from .learning import (
    AdamState,
    VEMConfig,
    drift_param_gradient,
    dynamics_rmse,
    update_output_params,
    vem_fit,
)
from .observations import (
    GaussianObservation,
    PoissonExpObservation,
    PoissonRBFObservation,
    simulate_observations,
)

__version__ = "0.1.0"
