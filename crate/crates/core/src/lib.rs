//! Decoupled visual-inertial odometry with a learned VO scheduler and a
//! learned fusion policy, driven by a simulated VO source.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod imu;
pub mod ingest;
pub mod init;
pub mod mlp;
pub mod pipeline;
pub mod ppo;
pub mod select;
pub mod sim;

pub use error::{Error, Result};
