//! Data, kinematics and pure-math pieces of the text-to-motion pipeline.
//!
//! Nothing in this crate depends on a tensor library: it owns the skeleton,
//! the synthetic captioned motion corpus, the on-disk motion format, the
//! closed caption vocabulary, kinematic evaluation metrics, the theory
//! oracles and the rule-based prompt difficulty scorer.

pub mod dataset;
pub mod difficulty;
pub mod error;
pub mod families;
pub mod metrics;
pub mod motion;
pub mod oracle;
pub mod rng;
pub mod skeleton;
pub mod vocab;

pub use error::{CoreError, Result};
