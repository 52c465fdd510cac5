//! The task encoder, the frozen aligned encoder, parameter bookkeeping and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::EncoderConfig;
pub use params::{Bound, NamedTensor, ParamGroup, ParameterPartition};
pub use transformer::{init_plm, init_vl_encoder, EncoderOutputs, TextEncoder, Trace, Transformer};
