pub mod allocation;
pub mod arch;
pub mod calib;
pub mod container;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod masking;
pub mod net;
pub mod repair;
pub mod tensor;
pub mod transition;

pub use error::{Error, Result};
