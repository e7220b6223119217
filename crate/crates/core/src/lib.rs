//! Fine-grained image hashing.
//!
//! A small convolutional network attends to object parts, refines each part
//! into a local feature and hashes the concatenated part and global
//! features into `q`-bit codes. Training alternates between the network,
//! the database codes and per-class part anchors; during training, part
//! features are randomly swapped with their class anchors so that each part
//! slot stays semantically aligned across images. Codes are searched with a
//! packed Hamming index, optionally re-ranked on real features, and
//! compared against a product-quantization baseline.

pub mod anchor;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod model;
pub mod pq;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use anchor::AnchorBank;
pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, SimilarityMatrix, Split, SynthConfig};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use model::{ModelConfig, ModelParams};
pub use pq::{PqCodebook, PqIndex};
pub use retrieval::{FeatureMatrix, PackedCodes, RetrievalIndex};
pub use tensor::Tensor;
pub use trainer::{CodeMatrix, TrainConfig, Trainer};
