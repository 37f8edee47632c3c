//! Bayesian tabulation audits: ballot sampling, Dirichlet-multinomial risk
//! measurement, sample planning and a round-based audit driver.

pub mod audit;
pub mod bayes;
pub mod election;
pub mod error;
pub mod fuzz;
pub mod parallel;
pub mod planner;
pub mod prng;
pub mod rules;
pub mod sim;

pub use error::{AuditError, Result};
