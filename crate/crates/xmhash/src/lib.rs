//! Cross-modal hashing with unified binary codes.
//!
//! The crate trains, from pairs of image and text feature vectors with shared
//! label sets, a single set of k-bit binary codes for the database plus two
//! small MLP encoders that map each modality onto those codes. Retrieval then
//! reduces to Hamming ranking: hash a query from one modality, rank database
//! codes from the other (or the same) collection by Hamming distance.
//!
//! Training alternates three steps until the budgeted number of outer
//! iterations runs out:
//!
//! 1. mini-batch SGD on the two encoder networks against a sampled query set,
//! 2. a discrete coordinate-descent sweep over the code matrix, one bit
//!    column at a time, each column solved exactly,
//! 3. a closed-form ridge solve for the linear classifier that ties codes to
//!    labels.
//!
//! Everything is deterministic given a master seed: per-stage RNG streams are
//! derived from it, so training runs, checkpoint resumes and CLI round trips
//! reproduce byte-identical artifacts.

pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod matrix;
pub mod objective;
pub mod retrieval;
pub mod selfcheck;
pub mod solver;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
