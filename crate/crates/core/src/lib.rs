//! One-shot black-box minimization via marginal means of a transformed
//! approximate additive Gaussian process.

pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod marginal;
pub mod optim;
pub mod taag;
pub mod testbed;
pub mod transform;

pub use data::{Dataset, DesignMatrix, Domain, RngState};
pub use error::{BommError, Result};
pub use kernels::KernelParams;
pub use taag::{fit, FitConfig, FittedTaag, ModelVariant, TaagParams};
pub use testbed::{Objective, TestFunction};
pub use transform::BoxCox;
