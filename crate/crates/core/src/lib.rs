//! Keypoint recognition with random ferns.
//!
//! Patches around keypoints of a reference image are classified by groups of
//! random pixel-pair comparisons ("ferns"), each fern contributing a learned
//! per-class leaf distribution, combined as independent evidence in log space.
//! A randomized-trees baseline and an evaluation harness compare flat ferns
//! against hierarchical trees, and multiplicative against averaged combination.

pub mod cli;
mod codec;
pub mod dataset;
pub mod eval;
pub mod ferns;
pub mod forest;
pub mod image;
pub mod keypoints;
pub mod model;
pub mod rng;
pub mod tables;

pub use dataset::{DatasetSpec, PatchSample, ViewGenerator};
pub use eval::{EvalRecord, Method};
pub use ferns::{ClassScore, Combination, FeatureTest, Fern, FernModel, ModelError};
pub use forest::{RandomTree, TreeForest};
pub use image::{AffineDeform, DeformRange, GrayImage};
pub use keypoints::{ClassSet, Keypoint};
pub use model::PatchModel;
