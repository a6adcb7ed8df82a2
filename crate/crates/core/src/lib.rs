pub mod error;
pub mod game;
pub mod harness;
pub mod mle;
pub mod offline;
pub mod oracle;
pub mod online;
pub mod planner;
pub mod response;

pub use error::{Error, Result};
