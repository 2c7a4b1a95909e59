//! Robust tube MPC expert, tube-guided sampling augmentation and imitation
//! learning for quadrotor trajectory tracking.

pub mod augment;
pub mod error;
pub mod evalbench;
pub mod expert;
pub mod il;
pub mod linmodel;
pub mod mlp;
pub mod qp;
pub mod quadsim;
pub mod riccati;
pub mod rtmpc;
pub mod tube;

pub use error::{Error, Result};
