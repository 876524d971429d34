//! Learned translation of trajectory-level natural-language constraints into
//! cost signals for safe reinforcement learning.
//!
//! The crate covers the whole pipeline: hazard gridworlds, a ground-truth
//! constraint checker with a template renderer, corpus collection, a
//! two-tower trajectory/text model trained with contrastive, within-trajectory
//! and cost-assignment losses, ROC-calibrated cost prediction, and a
//! Lagrangian PPO trainer that consumes the predicted cost.

pub mod checkpoint;
pub mod constraint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod grid;
pub mod predictor;
pub mod saferl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
