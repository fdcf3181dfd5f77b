//! Heat-bath Glauber dynamics of the two-dimensional discrete Gaussian free
//! field: graphical construction, backward random-walk representation,
//! monotone couplings and cutoff experiments.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod btrw;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod seed;
pub mod spectral;
pub mod stats;

pub use btrw::{
    backward_propagate, backward_propagate_with, covariance_gap_check, quenched_covariance, quenched_mean,
    representation_check, sample_btrw, survival_experiment, BackwardOptions, BtrwTrajectory, PropagatorBundle,
    SurvivalConfig, SurvivalReport,
};
pub use coupling::{
    angle_bracket_rate, dominated_bernoulli_check, run_two_stage, step_coupled, sticky_gaussian,
    supermartingale_drift_check, CoalescenceRecord, CoupledTrace, CouplingMode, StickyDraw, SwitchRule, TwoStageParams,
};
pub use dynamics::{
    heat_flow, run_forward, sample_schedule, sample_stationary, Event, EventStream, InitialCondition,
    StationarySampler, Trajectory, UpdateSchedule,
};
pub use error::{DgffError, Result};
pub use experiments::{
    coalescence_scaling_study, cutoff_profile_study, mean_decay_study, shifted_stationary_init, DecayConfig,
    ExperimentConfig, ProfileConfig, ProfilePoint, ScalingConfig, SwitchPolicy,
};
pub use lattice::{harmonic_extension, HeightField, LatticeBox, Neighbor, Site};
pub use seed::{derive_seed, rng_for, Role, SimRng};
pub use spectral::{
    eigenpair, greens_column, lambda_1, phi_1, phi_hat_1, survival_prediction, t_star, GreensMatrix, GreensMethod,
    SpectralData,
};

/// Version of the simulation core, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
