//! On-disk storage: the "CBMB" container, the embedding bundle schema built
//! on it, and synthetic bundle generation.

mod bundle;
pub mod container;
mod synthetic;

pub use bundle::{read_bundle, write_bundle, EmbeddingBundle, Split, BUNDLE_KIND};
pub use container::{ArrayData, BundleHeader, Container, DType, DirectoryEntry, NamedArray};
pub use synthetic::{make_synthetic_bundle, SyntheticSpec};
