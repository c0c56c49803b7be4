//! Binary convolutions, bit-packed inference and the model zoo.

pub mod checkpoint;
pub mod layer;
pub mod model;
pub mod pack;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layer::{binarize, AdapterConfig, BinaryConv2d, ScaleMode};
pub use model::{build_model, Arch, InferencePath, Model, ModelConfig, ParamKind};
pub use pack::{bitpack, unpack, xnor_popcount_conv, PackedTensor};
