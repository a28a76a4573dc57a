//! Probabilistic prediction of a highway lag vehicle's longitudinal
//! trajectory during ramp merges.
//!
//! A proportional car-following controller is fitted to a handful of
//! observations by solving a tight convex relaxation of a nonconvex least
//! squares problem ([`gtrs`]). Trajectories are then sampled around the
//! estimate and importance-weighted against the regularized likelihood
//! ([`sampler`]), and scored with ADE/RMSE/calibration ([`eval`]).


pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gtrs;
pub mod likelihood;
pub mod model;
pub mod roots;
pub mod sampler;

pub use error::{Error, Result};
pub use gtrs::{assemble_system, check_rank, solve_equality_gtrs, solve_nonnegative, QuadraticSystem, SolveStatus, SolverResult};
pub use likelihood::{default_hyperparams, neg_log_likelihood, LikelihoodBreakdown};
pub use model::{ControllerParams, Hyperparams, JointState, Scenario, VehicleState};

pub use sampler::{predict, LeadMode, Prediction, SamplerConfig, WeightedTrajectorySet};
pub use eval::{aggregate, MetricsReport};
