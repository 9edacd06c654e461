//! Bayesian joint modelling of longitudinal and time-to-event data under
//! skew-normal/independent random effects.

pub mod error;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod priors;
pub mod quad;
pub mod simgen;
pub mod sni;
pub mod special;
pub mod study;

pub use error::{Error, ErrorClass, Result};
