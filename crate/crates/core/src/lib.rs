//! A desk-scale mixture-of-experts routing laboratory.
//!
//! The crate implements sparse expert routing strategies (per-token TopK,
//! sequence-level TopK in bounded and unbounded form, batch-level TopK, and a
//! causal online variant backed by an expert-score cache), embeds them in a
//! small trainable MoE feed-forward layer, and ships the analysis and
//! verification machinery used to audit their structural guarantees: budget
//! conservation, per-token bounds, the cumulative decoding budget, entropy and
//! load statistics, and exact gradients through the gating weights.
//!
//! Modules:
//! - [`routing`] — score matrices, budgets, and the pure selection algorithms
//! - [`online`] — the expert cache and step-wise causal routing
//! - [`layer`] / [`model`] — the toy MoE layer and the stacked toy LM
//! - [`tape`] — a minimal reverse-mode autodiff engine
//! - [`task`] / [`train`] — synthetic sequence tasks and the training loop
//! - [`analytics`] — entropy, load, and activation-distribution reports
//! - [`checkpoint`] / [`report`] / [`config`] — stable file formats
//! - [`verify`] — the acceptance checks run by `moe-lab verify`

pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layer;
pub mod mat;
pub mod model;
pub mod online;
pub mod report;
pub mod routing;
pub mod tape;
pub mod task;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mat::Mat;
pub use routing::{BudgetConfig, RoutingMask, RoutingStrategy, ScoreMatrix};
