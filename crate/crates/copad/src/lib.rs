//! Cooperative trajectory prediction toolkit for V2X scenes.
//!
//! The pipeline fuses vehicle-view and infrastructure-view track sets with a
//! Hungarian + Kalman early-fusion stage, encodes per-timestep scene graphs
//! with multi-layer graph attention and past-time attention, expands agent
//! embeddings to multiple modes, and decodes multi-modal future trajectories
//! with an anchor-conditioned MLP-Mixer head. A seeded synthetic scene
//! generator with per-view noise, dropout, and occlusion makes every stage
//! testable end to end without external data.

pub mod anchor_decoder;
pub mod cli;
pub mod config;
pub mod data_model;
pub mod diffcore;
pub mod fusion;
pub mod mode_attention;
pub mod model;
pub mod objective;
pub mod plot;
pub mod scene_encoder;
pub mod synth;

/// Crate-wide error type. The CLI maps variants onto process exit codes:
/// validation/parse/config problems are data errors (2), everything else a
/// runtime failure (3); usage errors (1) are produced by argument parsing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
