//! Few-shot surrogate modelling and discrete Bayesian optimization for design
//! tasks whose trials return auxiliary feedback alongside the reward.

pub mod cli;
pub mod engine;
pub mod gp;
pub mod model;
pub mod numerics;
mod par;
pub mod tasks;
