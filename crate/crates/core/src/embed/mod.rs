//! Text embeddings and clustering of calibration data.

mod encoder;
mod kmeans;
mod metrics;

pub use encoder::{
    Encoder, EncoderConfig, ExternalEncoder, HashedNgramEncoder, TextEncoder, DEFAULT_DIM,
    MAX_ENCODE_BYTES,
};
pub use kmeans::{
    kmeans_fit, nearest_centroid, squared_distance, ClusterModel, MAX_LLOYD_ITERATIONS,
};
pub use metrics::adjusted_rand_index;
