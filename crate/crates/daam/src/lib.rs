//! Domain adaptive attention for unsupervised cross-domain retrieval.
//!
//! A small convolutional backbone produces a feature map that a learned
//! spatial × channel attention splits into a domain-shared part (used for
//! retrieval) and a domain-specific remainder. Training alternates k-means++
//! weak labelling of the unlabeled target domain with joint optimization of
//! five losses.

pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod weak_labels;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
