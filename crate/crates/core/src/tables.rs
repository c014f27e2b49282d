//! Per-unit leaf/class count tables shared by ferns and randomized trees.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("count tables have incompatible shapes: {0:?} vs {1:?}")]
pub struct ShapeMismatch(pub (usize, usize, usize), pub (usize, usize, usize));

/// Training counts laid out as `[unit][leaf][class]`.
///
/// Shards accumulated on disjoint sample subsets combine with [`LeafCounts::merge`],
/// which is associative and commutative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafCounts {
    units: usize,
    leaves: usize,
    classes: usize,
    counts: Vec<u64>,
    class_samples: Vec<u64>,
}

impl LeafCounts {
    pub fn new(units: usize, leaves: usize, classes: usize) -> Self {
        Self {
            units,
            leaves,
            classes,
            counts: vec![0; units * leaves * classes],
            class_samples: vec![0; classes],
        }
    }

    pub(crate) fn from_raw(units: usize, leaves: usize, classes: usize, counts: Vec<u64>) -> Self {
        debug_assert_eq!(counts.len(), units * leaves * classes);
        let mut class_samples = vec![0; classes];
        if units > 0 {
            for leaf in 0..leaves {
                for (c, total) in class_samples.iter_mut().enumerate() {
                    *total += counts[leaf * classes + c];
                }
            }
        }
        Self {
            units,
            leaves,
            classes,
            counts,
            class_samples,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.units, self.leaves, self.classes)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, unit: usize, leaf: usize, class: usize) -> u64 {
        self.counts[(unit * self.leaves + leaf) * self.classes + class]
    }

    /// Samples recorded for each class.
    pub fn class_samples(&self) -> &[u64] {
        &self.class_samples
    }

    /// Records one sample of `class` that reached `leaves[u]` in every unit `u`.
    pub fn record(&mut self, leaves: &[usize], class: usize) {
        debug_assert_eq!(leaves.len(), self.units);
        for (unit, &leaf) in leaves.iter().enumerate() {
            self.counts[(unit * self.leaves + leaf) * self.classes + class] += 1;
        }
        self.class_samples[class] += 1;
    }

    pub fn merge(&mut self, other: &LeafCounts) -> Result<(), ShapeMismatch> {
        if self.shape() != other.shape() {
            return Err(ShapeMismatch(self.shape(), other.shape()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.class_samples.iter_mut().zip(&other.class_samples) {
            *a += b;
        }
        Ok(())
    }

    /// Keeps only the first `units` units.
    pub fn truncated(&self, units: usize) -> LeafCounts {
        let units = units.min(self.units);
        LeafCounts {
            units,
            leaves: self.leaves,
            classes: self.classes,
            counts: self.counts[..units * self.leaves * self.classes].to_vec(),
            class_samples: self.class_samples.clone(),
        }
    }

    /// Every unit must account for exactly the per-class sample totals.
    pub fn is_conserved(&self) -> bool {
        (0..self.units).all(|u| {
            (0..self.classes).all(|c| (0..self.leaves).map(|l| self.get(u, l, c)).sum::<u64>() == self.class_samples[c])
        })
    }

    /// Laplace-regularized `ln P(leaf | class) = ln((n + 1) / (N_c + leaves))`,
    /// in the same layout as the counts.
    pub fn log_likelihoods(&self) -> Vec<f64> {
        let denom: Vec<f64> = self
            .class_samples
            .iter()
            .map(|&n| ((n + self.leaves as u64) as f64).ln())
            .collect();
        self.counts
            .chunks(self.classes)
            .flat_map(|row| row.iter().zip(&denom).map(|(&n, &d)| ((n + 1) as f64).ln() - d))
            .collect()
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularized_estimate() {
        let mut c = LeafCounts::new(1, 2, 1);
        for _ in 0..3 {
            c.record(&[0], 0);
        }
        c.record(&[1], 0);
        let ll = c.log_likelihoods();
        assert!((ll[1].exp() - 1.0 / 3.0).abs() < 1e-15);
        assert!((ll[0].exp() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn merge_shape_checked() {
        let mut a = LeafCounts::new(2, 4, 3);
        assert!(a.merge(&LeafCounts::new(2, 4, 2)).is_err());
        let mut b = LeafCounts::new(2, 4, 3);
        b.record(&[1, 3], 2);
        a.merge(&b).unwrap();
        assert_eq!(a, b);
        assert!(a.is_conserved());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
