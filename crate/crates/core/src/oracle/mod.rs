//! Implicit finite-difference reference solver, mass audit and synthetic
//! observation generator.

mod dataset;
mod solver;
mod tridiag;

pub use dataset::{
    sample_dataset, synthesize_dataset, Dataset, Observation, ObservationKind, DATASET_HEADER,
};
pub use solver::{
    grid, grid_spacing, interpolate, mass_balance, solve_forward, solve_with, step_plan,
    FieldState, InletMode, MassAudit, SolveOptions, SolveOutput,
};
