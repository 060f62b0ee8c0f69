//! Model-agnostic engine for reward-guided GUI-agent data generation.
//!
//! The crate provides the full pipeline around a pluggable policy and reward
//! model: a unified action space with rule-based verification, deterministic
//! synthetic GUI environments, reward-model training-data generation
//! (rule-verified samples, trajectory corruption, hard-negative mining),
//! reward-guided beam-search exploration, continuation-rollout step labeling,
//! iterative self-improvement orchestration, and evaluation harnesses.
//!
//! Backends are abstractions: [`backend::PolicyBackend`] proposes candidate
//! actions and [`backend::RewardBackend`] scores them. The built-in
//! [`oracle`] backends answer from the synthetic world's ground truth, which
//! makes every downstream stage testable without any model; [`http`] speaks
//! a small JSON protocol to a real model server.

/// Engine version, recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod action;
pub mod backend;
pub mod eval;
pub mod explore;
pub mod http;
pub mod io;
pub mod label;
pub mod oracle;
pub mod reward_data;
pub mod rounds;
pub mod seed;
pub mod session;
pub mod trajectory;
pub mod world;
