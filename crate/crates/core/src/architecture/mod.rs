//! Frame-level network: initial TDNN layer, SE-Res2Blocks with dense
//! residual inputs, Transformer encoder branch, MFA and the embedding layer.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use checkpoint::{load_model, save_model, topology_hash, ModelHeader};
pub use config::{BlockSpec, EncoderInput, NetworkConfig};
pub use layers::{aggregate_branches, dense_residual_input};
pub use network::{EmbeddingOutput, FrameLevel, Model, Network};
pub use params::{Bindings, ForwardCtx, Mode, ParamId, ParamStore};
