//! Query-adaptive convolutional image matching over pre-extracted feature maps.
//!
//! The crate covers the full scoring stack for person re-identification:
//!
//! - [`tensor`]: channel normalization, query kernels, adaptive convolution and
//!   bidirectional global max pooling.
//! - [`matching`]: the BN-FC-BN + sigmoid head, batched query×gallery matching
//!   and local-correspondence interpretation.
//! - [`train`]: class memory, focal binary cross-entropy, analytic head
//!   gradients and a small SGD loop.
//! - [`tlift`]: temporal lifting of appearance scores from within-camera
//!   co-occurrence.
//! - [`rerank`]: k-reciprocal encoding re-ranking.
//! - [`eval`]: single-query CMC / mAP.
//! - [`augment`]: random occlusion and horizontal flipping of image tensors.
//! - [`io`] and [`config`]: the little-endian binary formats and key=value
//!   configuration used by the command line tool.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod matching;
pub mod rerank;
pub mod store;
pub mod tensor;
pub mod tlift;
pub mod train;

pub use error::{Error, Result};
pub use matching::{HeadParams, SimilarityMatrix, Stage};
pub use store::{GalleryStore, MetaRecord};
pub use tensor::{FeatureMap, QueryKernel, SimilarityMap};
