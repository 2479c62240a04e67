//! Minimal f64 tensor library with reverse-mode autodiff for small 3D
//! convolutional networks: tape graph, AdamW, and checkpointing. Serial on
//! purpose — identical seeds give bit-identical runs.

pub mod checkpoint;
pub mod graph;
pub mod matmul;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, peek_config, save_checkpoint, CheckpointError, CheckpointInfo};
pub use graph::{Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{kaiming, PSlot, ParamId, ParamStore};
pub use tensor::{bcs, Tensor};
