//! Most-likely-path boundary-value problem.

pub mod path;
pub mod shoot;
pub mod system;
pub mod variational;

pub use path::{
    analytic_undriven, analytic_undriven_from, discrete_action, integrate_path, optimal_signal, path_action,
    trajectory_log_likelihood, OptimalPath,
};
pub use shoot::{shoot, shoot_system, BoundaryConditions, Root, ShootOptions, ShootReport, StartOutcome};
pub use system::{ode_rhs, stochastic_energy, DecayModel, PathSystem, PhasePoint};
pub use variational::{default_deltas, variational_check, Classification, ProfilePoint, VariationalReport};
