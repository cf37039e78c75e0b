//! Parameters, forward sessions and the per-cell building blocks (shared
//! MLPs, edge MLPs, batch norm).

mod layers;
mod modules;
mod params;

pub use layers::{AggregationLayer, GraphAttentionLayer, GraphMaxPoolLayer, LayerOutput};
pub use modules::{BatchNorm, EdgeMlp, Linear, SharedMlp};
pub use params::{gradient_check_params, BufferId, Mode, ParamId, ParamStore, Parameter, Session};
