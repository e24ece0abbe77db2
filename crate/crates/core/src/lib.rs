//! Channel-of-experts GUI agent at desk scale: a small deterministic
//! training and evaluation stack built on an in-crate reverse-mode tape.
//!
//! The crate provides, bottom up:
//! - `rng`, `tensor`, `kernels`, `tape`, `params`, `gradcheck`: the
//!   differentiable-array engine, Adam, checkpoints and finite-difference
//!   verification;
//! - `vocab`, `action`, `trace`, `synthgui`: a closed-vocabulary synthetic
//!   mobile-GUI task with gold four-stage reasoning traces;
//! - `model`: the channel-of-experts network, dense and token-routed
//!   baselines, assembly from specialists, and incremental decoding;
//! - `training`: the Expert-FT / Router-FT / CoT-FT curriculum;
//! - `reward`: stage-conditioned reward models, information-gain and
//!   action-accuracy rewards;
//! - `dpo`: trajectory sampling, preference-pair construction and the
//!   information-gain-driven DPO objective;
//! - `eval`: action metrics, router diagnostics, reward statistics and the
//!   analytic/measured FLOPs model;
//! - `config`, `report`: run configuration and CSV/SVG reporting for the
//!   CLI.

pub mod action;
pub mod config;
pub mod dpo;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod par;
pub mod params;
pub mod report;
pub mod reward;
pub mod rng;
pub mod synthgui;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod training;
pub mod vocab;

pub use tensor::{Error, Result, Tensor};
