//! The gated toy transformer, its tokenizer, cache and checkpoint format.

mod cache;
pub mod checkpoint;
mod config;
pub mod tokenizer;
mod train;
mod transformer;

pub use cache::KVCache;
pub use config::{BlockId, BlockKind, Granularity, ModelConfig};
pub use train::{sample_window, train_base, Adam, BaseTrainConfig};
pub use transformer::{
    argmax, LayerWeights, ParamVars, TrainOutput, Transformer, Weights, NORM_EPS,
};
