//! Dataset manifests and the synthetic generator, plus word-vector files.

pub mod embedding;
pub mod manifest;
pub mod synthetic;

pub use embedding::load_embeddings;
pub use manifest::{
    load_manifest, write_manifest, Manifest, SampleRecord, Split, SplitPairs, INDEX_HEADER,
};
pub use synthetic::{generate, Latents, SyntheticSpec};
