//! Randomized-trees baseline: complete binary trees of random pixel-pair tests,
//! combined either by averaging per-tree posteriors or naive-Bayes style.

use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::ferns::{
    check_classes, check_patch_size, read_classes, read_counts, read_tests, write_classes, write_tests, ClassScore,
    Combination, CostCounter, FeatureTest, ModelError, ModelHeader, PatchRef, MAX_FERN_SIZE, MODEL_VERSION,
};
use crate::image::GrayImage;
use crate::keypoints::{ClassSet, Keypoint};
use crate::rng::stream_rng;
use crate::tables::{argmax, softmax, LeafCounts};

pub const FOREST_MAGIC: &[u8; 8] = b"RTRFMDL1";

/// Complete binary tree; node tests are stored breadth-first, children of node
/// `i` at `2i + 1` (test false) and `2i + 2` (test true).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomTree {
    depth: usize,
    node_tests: Vec<FeatureTest>,
}

impl RandomTree {
    pub fn new(depth: usize, node_tests: Vec<FeatureTest>) -> Result<Self, ModelError> {
        if depth == 0 || depth > MAX_FERN_SIZE {
            return Err(ModelError::InvalidArgument(format!(
                "tree depth must be in 1..={MAX_FERN_SIZE}, got {depth}"
            )));
        }
        if node_tests.len() != (1 << depth) - 1 {
            return Err(ModelError::InvalidArgument(format!(
                "depth-{depth} tree needs {} tests, got {}",
                (1 << depth) - 1,
                node_tests.len()
            )));
        }
        Ok(Self { depth, node_tests })
    }

    /// Depth-`depth` tree with independent random tests at every node.
    pub fn random<R: Rng + ?Sized>(depth: usize, patch_size: usize, rng: &mut R) -> Result<Self, ModelError> {
        check_patch_size(patch_size)?;
        let half = (patch_size / 2) as i16;
        let tests = (0..(1usize << depth.min(MAX_FERN_SIZE + 1)) - 1)
            .map(|_| loop {
                let d1 = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
                let d2 = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
                if d1 != d2 {
                    break FeatureTest::new(d1, d2);
                }
            })
            .collect();
        Self::new(depth, tests)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_tests(&self) -> &[FeatureTest] {
        &self.node_tests
    }

    #[inline]
    pub(crate) fn leaf(&self, patch: &PatchRef<'_>) -> usize {
        let mut node = 0;
        for _ in 0..self.depth {
            node = 2 * node + 1 + patch.bit(&self.node_tests[node]);
        }
        node - self.node_tests.len()
    }
}

/// Leaf reached by the patch around `center`.
pub fn eval_tree(
    img: &GrayImage,
    center: &Keypoint,
    tree: &RandomTree,
    patch_size: usize,
) -> Result<usize, ModelError> {
    let patch = PatchRef::new(img, center.pixel(), patch_size)?;
    Ok(tree.leaf(&patch))
}

/// Combines per-unit class posteriors.
///
/// `Average` returns the mean posterior; `NaiveBayes` returns
/// `log_prior + Σ ln P_t(class | leaf_t)`.
pub fn combine_posteriors(posteriors: &[&[f64]], log_prior: &[f64], mode: Combination) -> Vec<f64> {
    match mode {
        Combination::Average => {
            let mut acc = vec![0.0; log_prior.len()];
            for p in posteriors {
                for (a, v) in acc.iter_mut().zip(p.iter()) {
                    *a += v;
                }
            }
            let n = posteriors.len().max(1) as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
        Combination::NaiveBayes => {
            let mut acc = log_prior.to_vec();
            for p in posteriors {
                for (a, v) in acc.iter_mut().zip(p.iter()) {
                    *a += v.ln();
                }
            }
            acc
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeForest {
    classes: ClassSet,
    trees: Vec<RandomTree>,
    depth: usize,
    combination: Combination,
    counts: LeafCounts,
    /// `P(class | leaf)` laid out as `[tree][leaf][class]`.
    leaf_tables: Vec<f64>,
    log_prior: Vec<f64>,
}

impl TreeForest {
    pub fn new(classes: ClassSet, trees: Vec<RandomTree>, combination: Combination) -> Result<Self, ModelError> {
        check_patch_size(classes.patch_size)?;
        check_classes(&classes).map_err(ModelError::InvalidArgument)?;
        let depth = trees
            .first()
            .map(RandomTree::depth)
            .ok_or_else(|| ModelError::InvalidArgument("forest needs at least one tree".into()))?;
        for t in &trees {
            if t.depth() != depth {
                return Err(ModelError::InvalidArgument("trees differ in depth".into()));
            }
            for test in t.node_tests() {
                test.check(classes.patch_size).map_err(ModelError::InvalidArgument)?;
            }
        }
        let counts = LeafCounts::new(trees.len(), 1 << depth, classes.len());
        let mut forest = Self {
            classes,
            trees,
            depth,
            combination,
            counts,
            leaf_tables: Vec::new(),
            log_prior: Vec::new(),
        };
        forest.rebuild_tables();
        Ok(forest)
    }

    /// `t` random trees of depth `d`, independent tests per node, drawn from `seed`.
    pub fn random(
        classes: ClassSet,
        t: usize,
        d: usize,
        combination: Combination,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if t == 0 {
            return Err(ModelError::InvalidArgument("forest needs at least one tree".into()));
        }
        let mut rng = stream_rng(seed, "trees", 0);
        let trees = (0..t)
            .map(|_| RandomTree::random(d, classes.patch_size, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(classes, trees, combination)
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn patch_size(&self) -> usize {
        self.classes.patch_size
    }

    pub fn trees(&self) -> &[RandomTree] {
        &self.trees
    }

    pub fn combination(&self) -> Combination {
        self.combination
    }

    pub fn with_combination(mut self, combination: Combination) -> Self {
        self.combination = combination;
        self
    }

    pub fn counts(&self) -> &LeafCounts {
        &self.counts
    }

    pub fn leaf_tables(&self) -> &[f64] {
        &self.leaf_tables
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    /// Class posterior stored at one leaf of one tree.
    #[inline]
    pub fn leaf_posterior(&self, tree: usize, leaf: usize) -> &[f64] {
        let h = self.num_classes();
        let start = (tree * self.num_leaves() + leaf) * h;
        &self.leaf_tables[start..start + h]
    }

    fn rebuild_tables(&mut self) {
        let h = self.num_classes();
        self.log_prior = vec![-(h as f64).ln(); h];
        let lik = self.counts.log_likelihoods();
        let prior = &self.log_prior;
        self.leaf_tables = lik
            .chunks(h)
            .flat_map(|row| {
                let joint: Vec<f64> = row.iter().zip(prior).map(|(a, b)| a + b).collect();
                softmax(&joint)
            })
            .collect();
    }

    pub fn new_counts(&self) -> LeafCounts {
        LeafCounts::new(self.num_trees(), self.num_leaves(), self.num_classes())
    }

    pub fn accumulate(&self, shard: &mut LeafCounts, patch: &GrayImage, label: usize) -> Result<(), ModelError> {
        if label >= self.num_classes() {
            return Err(ModelError::InvalidLabel {
                label,
                classes: self.num_classes(),
            });
        }
        let ps = self.patch_size();
        if patch.width() < ps || patch.height() < ps {
            return Err(ModelError::InvalidPatch {
                width: patch.width(),
                height: patch.height(),
                patch_size: ps,
            });
        }
        let leaves = self.leaves(patch, &crate::ferns::patch_center(patch))?;
        shard.record(&leaves, label);
        Ok(())
    }

    pub fn add_counts(&mut self, shard: &LeafCounts) -> Result<(), ModelError> {
        self.counts
            .merge(shard)
            .map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
        self.rebuild_tables();
        Ok(())
    }

    /// All-or-nothing training on `(patch, label)` pairs.
    pub fn train<'a, I>(&mut self, samples: I) -> Result<(), ModelError>
    where
        I: IntoIterator<Item = (&'a GrayImage, usize)>,
    {
        let mut shard = self.new_counts();
        for (patch, label) in samples {
            self.accumulate(&mut shard, patch, label)?;
        }
        self.add_counts(&shard)
    }

    pub fn leaves(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<usize>, ModelError> {
        let patch = PatchRef::new(img, center.pixel(), self.patch_size())?;
        Ok(self.trees.iter().map(|t| t.leaf(&patch)).collect())
    }

    pub fn scores_from_leaves(&self, leaves: &[usize], mode: Combination) -> Vec<f64> {
        let rows: Vec<&[f64]> = leaves
            .iter()
            .enumerate()
            .map(|(t, &leaf)| self.leaf_posterior(t, leaf))
            .collect();
        combine_posteriors(&rows, &self.log_prior, mode)
    }

    /// Classifies with the forest's configured combination rule.
    pub fn classify(&self, img: &GrayImage, center: &Keypoint) -> Result<ClassScore, ModelError> {
        self.classify_counted(img, center, &mut ())
    }

    pub fn classify_counted<C: CostCounter>(
        &self,
        img: &GrayImage,
        center: &Keypoint,
        counter: &mut C,
    ) -> Result<ClassScore, ModelError> {
        let leaves = self.leaves(img, center)?;
        counter.pixel_pairs((self.num_trees() * self.depth) as u64);
        counter.table_lookups(self.num_trees() as u64);
        let scores = self.scores_from_leaves(&leaves, self.combination);
        let class_id = argmax(&scores);
        Ok(ClassScore {
            class_id,
            log_score: scores[class_id],
        })
    }

    pub fn truncated(&self, k: usize) -> TreeForest {
        let k = k.clamp(1, self.num_trees());
        let width = self.num_leaves() * self.num_classes();
        TreeForest {
            classes: self.classes.clone(),
            trees: self.trees[..k].to_vec(),
            depth: self.depth,
            combination: self.combination,
            counts: self.counts.truncated(k),
            leaf_tables: self.leaf_tables[..k * width].to_vec(),
            log_prior: self.log_prior.clone(),
        }
    }

    /// Serializes to the little-endian `RTRFMDL1` format.
    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(FOREST_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.num_classes() as u32);
        w.u32(self.num_trees() as u32);
        w.u32(self.depth as u32);
        w.u32(self.patch_size() as u32);
        w.u32(match self.combination {
            Combination::Average => 0,
            Combination::NaiveBayes => 1,
        });
        write_classes(&mut w, &self.classes, &self.log_prior);
        for t in &self.trees {
            write_tests(&mut w, t.node_tests());
        }
        for &c in self.counts.counts() {
            w.u64(c);
        }
        for &p in &self.leaf_tables {
            w.f64(p);
        }
        w.0
    }

    pub fn load(bytes: &[u8]) -> Result<TreeForest, ModelError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != FOREST_MAGIC {
            return Err(ModelError::Format("bad magic, expected RTRFMDL1".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let h = r.u32()? as usize;
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let patch_size = r.u32()? as usize;
        let combination = match r.u32()? {
            0 => Combination::Average,
            1 => Combination::NaiveBayes,
            other => return Err(ModelError::Format(format!("unknown combination mode {other}"))),
        };
        let nodes = if (1..=MAX_FERN_SIZE).contains(&d) {
            (1 << d) - 1
        } else {
            0
        };
        let header = ModelHeader::check(h, t, d, patch_size, r.remaining(), nodes)?;
        let (classes, log_prior) = read_classes(&mut r, h, patch_size)?;
        let mut trees = Vec::with_capacity(t);
        for _ in 0..t {
            let tests = read_tests(&mut r, nodes, patch_size)?;
            trees.push(RandomTree::new(d, tests).map_err(|e| ModelError::Corrupt(e.to_string()))?);
        }
        let counts = read_counts(&mut r, header.table_len)?;
        let leaf_tables = (0..header.table_len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.remaining() != 0 {
            return Err(ModelError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let counts = LeafCounts::from_raw(t, 1 << d, h, counts);
        if !counts.is_conserved() {
            return Err(ModelError::Corrupt("per-tree class totals disagree".into()));
        }
        for (i, row) in leaf_tables.chunks(h).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p <= 0.0 || *p > 1.0) || (total - 1.0).abs() > 1e-9 {
                return Err(ModelError::Corrupt(format!(
                    "tree {}, leaf {}: class distribution sums to {total}",
                    i / (1 << d),
                    i % (1 << d)
                )));
            }
        }
        Ok(TreeForest {
            classes,
            trees,
            depth: d,
            combination,
            counts,
            leaf_tables,
            log_prior,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ferns::eval_fern;

    fn classes(n: usize, patch_size: usize) -> ClassSet {
        ClassSet {
            keypoints: (0..n).map(|i| Keypoint::new(20.0 + 20.0 * i as f64, 20.0)).collect(),
            patch_size,
        }
    }

    fn pick(scores: Vec<f64>) -> usize {
        argmax(&scores)
    }

    #[test]
    fn constant_image_reaches_leftmost_leaf() {
        let mut rng = stream_rng(1, "t", 0);
        let tree = RandomTree::random(5, 15, &mut rng).unwrap();
        let img = GrayImage::filled(30, 30, 42);
        assert_eq!(eval_tree(&img, &Keypoint::new(15.0, 15.0), &tree, 15).unwrap(), 0);
    }

    #[test]
    fn shared_level_tests_match_fern() {
        let mut rng = stream_rng(2, "t", 0);
        let fern = crate::ferns::make_random_ferns(1, 4, 15, &mut rng).unwrap().remove(0);
        let mut node_tests = Vec::new();
        for level in 0..4 {
            for _ in 0..(1 << level) {
                node_tests.push(fern.tests()[level]);
            }
        }
        let tree = RandomTree::new(4, node_tests).unwrap();
        for i in 0..200u64 {
            let mut r = stream_rng(3, "img", i);
            let img = GrayImage::from_fn(15, 15, |_, _| r.gen());
            let c = Keypoint::new(7.0, 7.0);
            assert_eq!(
                eval_tree(&img, &c, &tree, 15).unwrap(),
                eval_fern(&img, &c, &fern).unwrap()
            );
        }
    }

    #[test]
    fn hand_combination_examples() {
        let prior = [0.5f64.ln(), 0.5f64.ln()];
        let cases: [([f64; 2], [f64; 2], usize, usize); 3] = [
            ([0.6, 0.4], [0.1, 0.9], 1, 1),
            ([0.9, 0.1], [0.35, 0.65], 0, 0),
            // products 0.18 vs 0.08: both rules pick class 0 here
            ([0.9, 0.1], [0.2, 0.8], 0, 0),
        ];
        for (a, b, avg, nb) in cases {
            let rows: [&[f64]; 2] = [&a, &b];
            let mean = combine_posteriors(&rows, &prior, Combination::Average);
            assert_eq!(pick(mean.clone()), avg, "{a:?} {b:?}");
            assert!((mean[0] - (a[0] + b[0]) / 2.0).abs() < 1e-15);
            let nbs = combine_posteriors(&rows, &prior, Combination::NaiveBayes);
            assert_eq!(pick(nbs.clone()), nb, "{a:?} {b:?}");
            assert!(((nbs[1] - prior[1]).exp() - a[1] * b[1]).abs() < 1e-12);
        }
        // three trees where the rules disagree: mean 0.55 for class 0, but the
        // products are 0.032 (class 0) against 0.038 (class 1)
        let rows: [&[f64]; 3] = [&[0.8, 0.2], &[0.8, 0.2], &[0.05, 0.95]];
        assert_eq!(pick(combine_posteriors(&rows, &prior, Combination::Average)), 0);
        assert_eq!(pick(combine_posteriors(&rows, &prior, Combination::NaiveBayes)), 1);
    }

    #[test]
    fn training_and_normalization() {
        let mut f = TreeForest::random(classes(3, 15), 4, 3, Combination::NaiveBayes, 9).unwrap();
        for t in 0..4 {
            for l in 0..8 {
                let row = f.leaf_posterior(t, l);
                assert!(row.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
            }
        }
        let patch = GrayImage::from_fn(15, 15, |x, y| (x * 31 + y * 7) as u8);
        f.train(vec![(&patch, 0)]).unwrap();
        let leaves = f.leaves(&patch, &Keypoint::new(7.0, 7.0)).unwrap();
        for (t, &leaf) in leaves.iter().enumerate() {
            for l in 0..8 {
                for c in 0..3 {
                    let expect = u64::from(l == leaf && c == 0);
                    assert_eq!(f.counts().get(t, l, c), expect);
                }
                let total: f64 = f.leaf_posterior(t, l).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(f.counts().is_conserved());
    }

    #[test]
    fn single_tree_modes_agree() {
        let mut f = TreeForest::random(classes(4, 15), 1, 4, Combination::Average, 4).unwrap();
        let patches: Vec<GrayImage> = (0..40u64)
            .map(|i| {
                let mut r = stream_rng(5, "p", i);
                GrayImage::from_fn(15, 15, |_, _| r.gen())
            })
            .collect();
        f.train(patches.iter().enumerate().map(|(i, p)| (p, i % 4))).unwrap();
        for p in &patches {
            let leaves = f.leaves(p, &Keypoint::new(7.0, 7.0)).unwrap();
            assert_eq!(
                pick(f.scores_from_leaves(&leaves, Combination::Average)),
                pick(f.scores_from_leaves(&leaves, Combination::NaiveBayes))
            );
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let mut f = TreeForest::random(classes(2, 15), 3, 3, Combination::Average, 6).unwrap();
        let patch = GrayImage::from_fn(15, 15, |x, y| (x * 3 + y * 11) as u8);
        f.train(vec![(&patch, 1), (&patch, 0), (&patch, 1)]).unwrap();
        let bytes = f.save();
        assert_eq!(TreeForest::load(&bytes).unwrap(), f);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(TreeForest::load(&bad), Err(ModelError::Format(_))));
        let mut bad = bytes.clone();
        bad[28] = 7; // combination field
        assert!(matches!(TreeForest::load(&bad), Err(ModelError::Format(_))));
        assert!(matches!(
            TreeForest::load(&bytes[..bytes.len() - 1]),
            Err(ModelError::Format(_))
        ));
        // a fern model is not a forest
        let fm = crate::ferns::FernModel::random(classes(2, 15), 2, 2, 1).unwrap();
        assert!(matches!(TreeForest::load(&fm.save()), Err(ModelError::Format(_))));
    }
}
