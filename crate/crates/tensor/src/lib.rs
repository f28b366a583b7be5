//! Minimal dense f64 tensors with reverse-mode autodiff.
//!
//! Everything the generative models need and nothing more: broadcasting
//! elementwise ops, batched matmul, 3D convolution, normalization layers,
//! Adam, and a safetensors-backed archive for checkpoints. Numeric buffers
//! are accounted in [`storage`] so training memory can be measured.

pub mod archive;
pub mod conv;
pub mod gradcheck;
mod gemm;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod storage;
pub mod tensor;
pub mod var;

pub use archive::{file_hash, TensorArchive};
pub use nn::{Conv2d, Conv3d, Embedding, GroupNorm, Linear, Module, ModuleGroup, Param, ParamId};
pub use ops::mse;
pub use optim::Adam;
pub use tensor::Tensor;
pub use var::{grad_enabled, no_grad, Gradients, Var};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("missing metadata key `{0}`")]
    MissingMetadata(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("archive format: {0}")]
    Format(String),
    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
