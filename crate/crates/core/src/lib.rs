pub mod ddpc;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod offline;
pub mod qp;
pub mod reference;
pub mod regret;
pub mod riccati;
pub mod rng;
pub mod systems;
pub mod tracking;

pub use error::{Error, Result};
