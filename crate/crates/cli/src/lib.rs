//! Configuration, orchestration and file output for the `mixot` command.

pub mod config;
pub mod error;
pub mod export;
pub mod run;

pub use config::{DensitySpec, MeshSource, RunConfig};
pub use error::CliError;
pub use export::export_vtk;
pub use run::{run_dual_comparison, run_refinement_study, run_solve, StudyReference, StudyRow};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "MIXOT_OUTPUT_ROOT";
