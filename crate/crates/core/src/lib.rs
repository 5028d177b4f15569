//! Malware-family classification from opcode sequences with a hybrid HMM /
//! random-forest architecture.
//!
//! One discrete hidden Markov model is trained per family on that family's
//! opcode sequences. A sample is then featurized by posterior-decoding its
//! first `L` opcodes against every family model and concatenating the hidden
//! state sequences; the scaled `n * L` vectors feed a random forest that
//! votes on the family.
//!
//! Modules:
//! - [`hmm`]: discrete HMMs with scaled forward/backward, posterior and
//!   Viterbi decoding, and Baum-Welch training.
//! - [`forest`]: decision trees and random forests with Gini/entropy splits.
//! - [`pipeline`]: per-family HMM training, hidden-state feature extraction,
//!   standard scaling, and the trained classifiers (hybrid and raw-opcode
//!   baseline).
//! - [`corpus`]: on-disk corpus ingestion, vocabulary construction,
//!   stratified splitting with short-sample dropping, and a synthetic
//!   planted-model corpus generator.
//! - [`eval`]: confusion matrices, accuracy and weighted F1, and the grid
//!   search harness with per-axis sweep summaries.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod forest;
pub mod hmm;
pub mod pipeline;
pub(crate) mod util;

pub use error::{Error, Result};
