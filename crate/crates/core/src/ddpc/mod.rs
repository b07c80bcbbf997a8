//! Data-driven predictive control from a single excitation trajectory.

mod controller;
mod library;
mod regularized;

pub use controller::{DdpcController, InitBuffer, WarmupPolicy};
pub use library::{
    check_lifted_excitation, collect_excitation, hankel, load_data, save_data, DataDescriptor, DataLibrary,
    DataTrajectory, ExcitationReport,
};
pub use regularized::{OrientationSwitcher, RegDdpcController, RegDdpcParams};
