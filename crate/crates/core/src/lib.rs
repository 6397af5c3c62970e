//! Adaptive memory policy for frozen agents: a token-level policy that either
//! abstains or writes guidance, distilled from an experience bank and then
//! refined against task outcomes.

pub mod advantage;
pub mod bank;
pub mod env;
pub mod error;
pub mod eval;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod runner;
pub mod stage1;
pub mod stage2;

pub use error::{Error, ProtocolError, Result};
