pub mod cli;
pub mod dgp;
pub mod estimators;
pub mod harness;
pub mod error;
pub mod io;
pub mod market;
pub mod nuisance;
pub mod optim;
pub mod orthogonal;
pub mod shares;
pub mod sparse_reg;

pub use error::{HdBlpError, Result};
