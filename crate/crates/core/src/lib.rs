//! Leviathan: a continuous token generator for decoder-only transformers,
//! a matched dense baseline, and the analysis machinery to compare them.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and a reverse-mode tape with
//!   finite-difference-verified primitives.
//! - [`coords`]: base-b decomposition of token ids into latent coordinates.
//! - [`splines`]: univariate B-spline bases on `[0,1]` (Cox-de Boor).
//! - [`corpus`]: tokenization, token files, seeded shuffle-buffer streams.
//! - [`generator`]: the separable embedding generator (codebooks, latent
//!   coordinate, spline modes, output/residual projection).
//! - [`backbone`]: pre-LN decoder blocks with RoPE attention and SwiGLU.
//! - [`training`]: AdamW, cosine schedule, paired runs, checkpoints.
//! - [`scaling`]: power-law fits, effective size, perplexity reduction.
//! - [`approx`]: separable-surface fitting fixtures on the unit cube.

pub mod approx;
pub mod backbone;
pub mod checkpoint;
pub mod coords;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod rope;
pub mod scaling;
pub mod splines;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;
