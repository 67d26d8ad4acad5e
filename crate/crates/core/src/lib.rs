//! Speculative Jacobi decoding with a verification-prediction drafter,
//! exercised on seeded toy autoregressive models.
//!
//! * [`prob`] — distributions, sampling, TV distance, seeded RNG.
//! * [`model`] — the model trait and seeded Markov models with exact
//!   sequence laws.
//! * [`engine`] — Jacobi and speculative Jacobi decoding.
//! * [`drafter`] — history buffers, growth masks and fusion.
//! * [`theory`] — the perturbation view of drafting, checked numerically.
//! * [`dynamics`] — statistics over trajectory logs.
//! * [`trajectory`] — the JSON Lines log format.

pub mod drafter;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod model;
pub mod prob;
pub mod theory;
pub mod trajectory;

pub use drafter::{vp_draft, GrowthReading, VpConfig, VpDrafter};
pub use engine::{
    run_greedy_jacobi, run_speculative_jacobi, DecodeOutput, Drafter, EngineConfig, RunStats,
    SjdDrafter, VerifyMode,
};
pub use error::{Error, Result};
pub use model::{AutoregressiveModel, MarkovModel, ModelSpec, Prompt};
pub use prob::{Distribution, SeededRng, Token};
