//! Function-approximation substrate: flat parameter storage, a reverse-mode
//! tape over small dense matrices, tanh MLPs, Adam, and policy distributions.

mod adam;
mod dist;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use dist::{
    categorical_kl, categorical_log_probs, gaussian_logprob, kl_diag_gaussian, softmax,
    GaussianPolicyOutput,
};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpSpec, OutputActivation};
pub use params::{ParamSlice, ParamStore, SliceId};
pub use tape::{Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("variable does not belong to this tape")]
    UntapedVariable,
    #[error("loss must be a 1x1 value, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite gradient in parameter slice `{slice}`")]
    NonFiniteGradient { slice: String },
    #[error("parameter layout is inconsistent: {0}")]
    BadLayout(String),
}
