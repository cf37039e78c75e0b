//! Network assembly: configuration, ablation variants and the two-stream
//! forward pass.

mod config;
mod net;

pub use config::{Aggregation, FusionLevel, ModelConfig, Streams, Variant};
pub use net::{
    argmax_rows, softmax_rows, Architecture, ForwardOptions, ForwardPass, Stream, StreamInput, Trace, TsgcNet,
};
