//! Speaker embeddings from SE-Res2Block and Transformer-encoder frame
//! features, pooled by multi-head channel- and context-dependent attentive
//! statistics, trained with AAM-softmax plus an attention-diversity penalty
//! and scored by cosine similarity with EER and MinDCF.

pub mod architecture;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod numerics;
pub mod objective;
pub mod pooling;
pub mod training;
pub mod verify;

pub use architecture::{Model, NetworkConfig};
pub use error::{Error, Result};
pub use numerics::{Gradients, NamedTensor, Tape, Tensor, Var};
