//! Pixel-embedding instance segmentation: pairwise similarity on embedding
//! fields, the embedding and classification losses, diversity-aware seed
//! selection with mask growing, and region-level AP/AR evaluation.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metric;
pub mod proposer;
pub mod scene;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{BinaryMask, Rle};
pub use scene::{ClassScoreStack, EmbeddingField, InstanceLabelMap};
pub use tensor::{read_tensor, write_tensor, DType, DenseTensor};
