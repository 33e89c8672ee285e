//! Desk-scale laboratory for cost-aware RL fine-tuning of discrete-diffusion
//! heatmap solvers on small combinatorial optimization problems (TSP and MIS).
//!
//! The pipeline: generate labeled instances with exact oracles, pre-train a
//! message-passing denoiser by supervised imitation, fine-tune it with
//! REINFORCE on the true post-decoded solution cost, then analyze how the
//! imitation loss and the solution cost diverge.

pub mod analysis;
pub mod config;
pub mod decoders;
pub mod diffusion;
pub mod error;
pub mod gnn;
pub mod instances;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
