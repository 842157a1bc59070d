//! Minimal differentiable network stack: convolution, ReLU, max-pool,
//! fully-connected, dropout and softmax cross-entropy, trained with momentum
//! SGD.

mod checkpoint;
mod layers;
mod network;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{load_network, Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use layers::{dropout_apply, LayerSpec, Mode};
pub use network::{softmax, softmax_xent, ArchSpec, ForwardCache, Network};
pub use optim::{OptimConstants, OptimState};
pub use scalar::Scalar;
pub use tensor::TensorBuf;
