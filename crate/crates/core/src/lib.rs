//! Concept bottleneck models over precomputed embeddings.
//!
//! Bundles of image features, image and concept embeddings live in CBMB
//! containers ([`store`]). From them the crate computes standardized concept
//! activations ([`activation`]), scores and prunes concept sets by entropy
//! ([`goodness`]), and trains, explains and audits bottleneck models
//! ([`cbm`]) using the small dense-network toolkit in [`nn`].
//!
//! ```
//! use cbmkit::activation::{concept_activations, NormMode, DEFAULT_EPSILON};
//! use cbmkit::goodness::task_agnostic_goodness;
//! use cbmkit::store::{make_synthetic_bundle, SyntheticSpec};
//!
//! let bundle = make_synthetic_bundle(&SyntheticSpec::mixed(0))?;
//! let acts = concept_activations(&bundle, NormMode::PerConcept, DEFAULT_EPSILON)?;
//! let report = task_agnostic_goodness(&acts, 100)?;
//! assert!(report.mean_entropy < 100f64.ln());
//! # Ok::<(), cbmkit::Error>(())
//! ```

pub mod activation;
pub mod cbm;
pub mod cli;
pub mod error;
pub mod goodness;
pub mod nn;
pub mod store;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/goodness.md")]
    mod goodness {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inspection.md")]
    mod inspection {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
