//! Transferring domain-invariant inter-pixel correlations with a
//! source-trained self-attention module, for self-training based
//! unsupervised domain adaptation of semantic segmentation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pnm;
pub mod pseudo;
pub mod report;
pub mod sam;
pub mod scenegen;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
