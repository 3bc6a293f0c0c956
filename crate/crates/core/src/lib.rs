//! Continual test-time adaptation of a frozen image classifier through two
//! additive visual prompts: a domain-specific prompt trained by teacher-student
//! self-training, and a domain-agnostic prompt additionally anchored by a
//! homeostatic importance penalty that is consolidated whenever the stream's
//! prediction confidence jumps.

pub mod adapt;
pub mod checkpoint;
pub mod classifier;
pub mod data;
mod error;
pub mod hexfloat;
pub mod homeostasis;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod prompt;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
