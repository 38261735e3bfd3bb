//! Modality-aware policy optimization on a desk-scale multimodal transformer.
//!
//! The crate trains a miniature decoder-only transformer over a joint
//! `[audio prefix | text prompt | completion]` sequence using a dual-branch
//! RL objective: a relevance-reweighted clipped policy gradient plus an
//! auxiliary attention penalty that keeps generation grounded in the audio
//! prefix. Everything runs on a small reverse-mode tape ([`tape`]) so the
//! full objective is differentiable end to end and checkable against
//! central finite differences.
//!
//! Module map:
//! - [`tape`] — reverse-mode autodiff over dense `f64` matrices.
//! - [`model`] — the toy transformer, sampling, and checkpoint I/O.
//! - [`task`] — synthetic audio-key recall environment and rewards.
//! - [`metrics`] — token entropy, differential entropy, audio attention mass.
//! - [`masks`] — relevance mask, inverse relevance weight, POS gate.
//! - [`objective`] — group advantages, clipped surrogate, KL, loss assembly.
//! - [`trainer`] — warm-up, rollouts, the optimization loop.
//! - [`diagnostics`] — occlusion scoring, gradient structure checks, traces.
//! - [`config`] / [`runio`] — run configuration and artifact persistence.

pub mod config;
pub mod diagnostics;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod runio;
pub mod tape;
pub mod task;
pub mod trainer;
pub mod util;

use thiserror::Error;

/// Crate-wide error type. Variant choice drives the CLI exit code:
/// config problems exit 1, numeric failures exit 2, failed checks exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("consistency checker error: {0}")]
    Checker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
