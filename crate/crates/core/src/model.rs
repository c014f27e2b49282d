//! Common surface of fern models and tree forests used by training and evaluation.

use crate::ferns::{patch_center, Combination, FernModel, ModelError};
use crate::forest::TreeForest;
use crate::image::GrayImage;
use crate::keypoints::{ClassSet, Keypoint};
use crate::tables::{argmax, softmax, LeafCounts};

/// A classifier built from independent units (ferns or trees) whose leaf
/// outcomes are combined into class scores.
pub trait PatchModel: Clone + Send + Sync {
    fn classes(&self) -> &ClassSet;
    fn num_units(&self) -> usize;
    /// Binary tests evaluated per unit for one patch.
    fn tests_per_unit(&self) -> usize;
    fn leaves(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<usize>, ModelError>;
    fn scores_from_leaves(&self, leaves: &[usize], mode: Combination) -> Vec<f64>;
    fn new_counts(&self) -> LeafCounts;
    fn accumulate(&self, shard: &mut LeafCounts, patch: &GrayImage, label: usize) -> Result<(), ModelError>;
    fn add_counts(&mut self, shard: &LeafCounts) -> Result<(), ModelError>;
    fn truncated(&self, k: usize) -> Self;

    /// Starting scores before any unit contributes.
    fn initial_scores(&self, mode: Combination) -> Vec<f64>;
    /// Adds the evidence of `unit` landing in `leaf`. Under `Average` the
    /// running values are sums of posteriors; dividing by the unit count does
    /// not change the argmax.
    fn add_unit_evidence(&self, scores: &mut [f64], unit: usize, leaf: usize, mode: Combination);

    fn num_classes(&self) -> usize {
        self.classes().len()
    }

    fn patch_size(&self) -> usize {
        self.classes().patch_size
    }

    /// Predicted class for a patch image, using its center pixel.
    fn predict(&self, patch: &GrayImage, mode: Combination) -> Result<usize, ModelError> {
        let leaves = self.leaves(patch, &patch_center(patch))?;
        Ok(argmax(&self.scores_from_leaves(&leaves, mode)))
    }
}

impl PatchModel for FernModel {
    fn classes(&self) -> &ClassSet {
        FernModel::classes(self)
    }
    fn num_units(&self) -> usize {
        self.num_ferns()
    }
    fn tests_per_unit(&self) -> usize {
        self.fern_size()
    }
    fn leaves(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<usize>, ModelError> {
        FernModel::leaves(self, img, center)
    }
    fn scores_from_leaves(&self, leaves: &[usize], mode: Combination) -> Vec<f64> {
        FernModel::scores_from_leaves(self, leaves, mode)
    }
    fn new_counts(&self) -> LeafCounts {
        FernModel::new_counts(self)
    }
    fn accumulate(&self, shard: &mut LeafCounts, patch: &GrayImage, label: usize) -> Result<(), ModelError> {
        FernModel::accumulate(self, shard, patch, label)
    }
    fn add_counts(&mut self, shard: &LeafCounts) -> Result<(), ModelError> {
        FernModel::add_counts(self, shard)
    }
    fn truncated(&self, k: usize) -> Self {
        FernModel::truncated(self, k)
    }
    fn initial_scores(&self, mode: Combination) -> Vec<f64> {
        match mode {
            Combination::NaiveBayes => self.log_prior().to_vec(),
            Combination::Average => vec![0.0; self.num_classes()],
        }
    }
    fn add_unit_evidence(&self, scores: &mut [f64], unit: usize, leaf: usize, mode: Combination) {
        let h = self.num_classes();
        let start = (unit * self.num_leaves() + leaf) * h;
        let row = &self.log_table()[start..start + h];
        match mode {
            Combination::NaiveBayes => scores.iter_mut().zip(row).for_each(|(a, b)| *a += b),
            Combination::Average => {
                let joint: Vec<f64> = row.iter().zip(self.log_prior()).map(|(a, b)| a + b).collect();
                scores.iter_mut().zip(softmax(&joint)).for_each(|(a, b)| *a += b);
            }
        }
    }
}

impl PatchModel for TreeForest {
    fn classes(&self) -> &ClassSet {
        TreeForest::classes(self)
    }
    fn num_units(&self) -> usize {
        self.num_trees()
    }
    fn tests_per_unit(&self) -> usize {
        self.depth()
    }
    fn leaves(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<usize>, ModelError> {
        TreeForest::leaves(self, img, center)
    }
    fn scores_from_leaves(&self, leaves: &[usize], mode: Combination) -> Vec<f64> {
        TreeForest::scores_from_leaves(self, leaves, mode)
    }
    fn new_counts(&self) -> LeafCounts {
        TreeForest::new_counts(self)
    }
    fn accumulate(&self, shard: &mut LeafCounts, patch: &GrayImage, label: usize) -> Result<(), ModelError> {
        TreeForest::accumulate(self, shard, patch, label)
    }
    fn add_counts(&mut self, shard: &LeafCounts) -> Result<(), ModelError> {
        TreeForest::add_counts(self, shard)
    }
    fn truncated(&self, k: usize) -> Self {
        TreeForest::truncated(self, k)
    }
    fn initial_scores(&self, mode: Combination) -> Vec<f64> {
        match mode {
            Combination::NaiveBayes => self.log_prior().to_vec(),
            Combination::Average => vec![0.0; self.num_classes()],
        }
    }
    fn add_unit_evidence(&self, scores: &mut [f64], unit: usize, leaf: usize, mode: Combination) {
        let row = self.leaf_posterior(unit, leaf);
        match mode {
            Combination::NaiveBayes => scores.iter_mut().zip(row).for_each(|(a, b)| *a += b.ln()),
            Combination::Average => scores.iter_mut().zip(row).for_each(|(a, b)| *a += b),
        }
    }
}
