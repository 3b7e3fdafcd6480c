//! Multi-fidelity neural emulators.
//!
//! This crate builds high-fidelity surrogate models from scarce high-fidelity
//! data plus one or more cheap low-fidelity information sources. A surrogate
//! has the form
//!
//! ```text
//! ŷ_H(x) = F( x, ŷ_L1(T_1(x)), …, ŷ_Ln(T_n(x)) )
//! ```
//!
//! where each `T_i` is a trainable coordinate encoding initialized at the
//! identity, each `ŷ_Li` is either an exact closed-form source or a learned
//! surrogate, and the fusion map `F` splits into an affine part (which exposes
//! an interpretable cross-fidelity relation) plus a nonlinear correction
//! network. Everything is trained end to end with reverse-mode automatic
//! differentiation.
//!
//! Module map:
//!
//! - [`tensor`] — minimal reverse-mode autodiff over `f64` matrices.
//! - [`gradcheck`] — central finite-difference verification of gradients.
//! - [`network`] — MLP, Siren, and KAN architectures with their
//!   initialization schemes.
//! - [`encoding`] — identity-initialized linear and residual-nonlinear
//!   coordinate encoders.
//! - [`field`] — differentiable scalar fields (closed-form sources, lookup
//!   tables) and axis-aligned domains.
//! - [`benchmarks`] — the analytical and tabulated test problems.
//! - [`sampling`] — Sobol designs, boundary augmentation, dataset assembly,
//!   and affine normalization with coefficient recovery.
//! - [`mfmodel`] — the multi-fidelity surrogate assembled from the pieces
//!   above, plus single-fidelity baselines.
//! - [`loss`] — data-fit, regularization, and encoding losses.
//! - [`training`] — Adam, the training loop, random hyperparameter search,
//!   and the experiment grid runner.
//! - [`archive`] — exact-roundtrip JSON parameter archives.
//! - [`report`] — experiment configuration and CSV/manifest emission.

pub mod archive;
pub mod benchmarks;
pub mod encoding;
pub mod field;
pub mod gradcheck;
pub mod loss;
pub mod mfmodel;
pub mod network;
pub mod report;
pub mod sampling;
pub mod spline;
pub mod tensor;
pub mod training;

mod sobol_tables;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape for a binary tensor operation.
    #[error("shape mismatch in `{op}`: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has an unusable shape.
    #[error("`{op}` expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    /// A point lies outside the domain box of a function or table.
    #[error("{what}: coordinate {index} = {value} outside [{lo}, {hi}]")]
    OutOfDomain {
        what: String,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    /// Requested benchmark name is not registered.
    #[error("unknown benchmark problem `{0}`")]
    UnknownProblem(String),
    /// Sobol generator asked for more dimensions than provisioned.
    #[error("dimension {dim} exceeds the {max} provisioned Sobol dimensions")]
    SobolDim { dim: usize, max: usize },
    /// Invalid experiment or model configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Parameter archive is malformed or inconsistent with the model.
    #[error("archive error: {0}")]
    Archive(String),
    /// Tabulated data file is malformed.
    #[error("table error: {0}")]
    Table(String),
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Mixes a master seed with a stream tag into an independent 64-bit seed.
///
/// SplitMix64 finalizer over the XOR of the two inputs; used everywhere a
/// component needs its own deterministic RNG stream derived from one master
/// seed (per-trial, per-repetition, per-network-component streams).
pub fn mix_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
