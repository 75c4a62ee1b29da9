//! Canonical ICA for multi-subject data.
//!
//! Each subject is reduced by PCA to its stable patterns, the patterns shared
//! across subjects are isolated by generalized canonical correlation analysis
//! (thresholded against a bootstrap null built from observation noise), and
//! FastICA rotates the shared subspace into independent component maps.
//! Half-split cross-validation and the `e`/`t` similarity metrics quantify how
//! reproducible the maps are, and [`synth`] samples the generative model so
//! every stage can be checked against ground truth.

pub mod crossval;
pub mod dataio;
pub mod decomp;
pub mod error;
pub mod group_cca;
pub mod ica;
pub mod linalg;
pub mod metrics;
pub mod model_order;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use dataio::{RunConfig, SubjectDataset};
pub use error::{Error, Result};
