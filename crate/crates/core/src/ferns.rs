//! Semi-naive Bayesian fern classifier.
//!
//! A fern is an ordered group of `M` pixel-pair comparisons whose bits index one
//! of `2^M` leaves. Each fern holds a per-class distribution over its leaves,
//! and ferns are combined as independent evidence: the class score is the log
//! prior plus the sum over ferns of `ln P(leaf | class)`.

use rand::Rng;
use thiserror::Error;

use crate::codec::{Reader, Truncated, Writer};
use crate::image::GrayImage;
use crate::keypoints::{ClassSet, Keypoint};
use crate::rng::stream_rng;
use crate::tables::{argmax, softmax, LeafCounts};

pub const MODEL_MAGIC: &[u8; 8] = b"FERNMDL1";
pub const MODEL_VERSION: u32 = 1;
/// Largest fern (or tree depth) accepted; `2^20` leaves per unit.
pub const MAX_FERN_SIZE: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model format error: {0}")]
    Format(String),
    #[error("corrupt model: {0}")]
    Corrupt(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("patch {width}x{height} is smaller than the {patch_size}px model patch")]
    InvalidPatch {
        width: usize,
        height: usize,
        patch_size: usize,
    },
    #[error("pixel ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<Truncated> for ModelError {
    fn from(_: Truncated) -> Self {
        ModelError::Format("unexpected end of model data".into())
    }
}

/// How per-unit class evidence is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combination {
    /// Arithmetic mean of per-unit class posteriors.
    Average,
    /// Sum of per-unit log probabilities plus the log prior.
    NaiveBayes,
}

/// One binary test: is the pixel at `d1` strictly darker than the pixel at `d2`?
/// Offsets are relative to the patch center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureTest {
    pub d1: (i16, i16),
    pub d2: (i16, i16),
}

impl FeatureTest {
    pub fn new(d1: (i16, i16), d2: (i16, i16)) -> Self {
        Self { d1, d2 }
    }

    pub(crate) fn check(&self, patch_size: usize) -> Result<(), String> {
        let half = (patch_size / 2) as i16;
        let inside = |(x, y): (i16, i16)| (-half..=half).contains(&x) && (-half..=half).contains(&y);
        if !inside(self.d1) || !inside(self.d2) {
            return Err(format!("test {self:?} leaves the {patch_size}px patch"));
        }
        if self.d1 == self.d2 {
            return Err(format!("test {self:?} compares a pixel with itself"));
        }
        Ok(())
    }

    fn random<R: Rng + ?Sized>(rng: &mut R, half: i16) -> Self {
        loop {
            let d1 = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
            let d2 = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
            if d1 != d2 {
                return Self { d1, d2 };
            }
        }
    }
}

/// Operation counters for classification cost accounting.
pub trait CostCounter {
    fn pixel_pairs(&mut self, _n: u64) {}
    fn table_lookups(&mut self, _n: u64) {}
}

impl CostCounter for () {}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub pixel_pairs: u64,
    pub table_lookups: u64,
}

impl CostCounter for OpCount {
    fn pixel_pairs(&mut self, n: u64) {
        self.pixel_pairs += n;
    }
    fn table_lookups(&mut self, n: u64) {
        self.table_lookups += n;
    }
}

/// Resolved patch location: linear index of the center plus row stride.
#[derive(Clone, Copy)]
pub(crate) struct PatchRef<'a> {
    data: &'a [u8],
    stride: isize,
    base: isize,
}

impl<'a> PatchRef<'a> {
    /// Checks that the whole `patch_size` square around `center` is inside `img`.
    pub(crate) fn new(img: &'a GrayImage, center: (i64, i64), patch_size: usize) -> Result<Self, ModelError> {
        let half = (patch_size / 2) as i64;
        let (cx, cy) = center;
        for (x, y) in [(cx - half, cy - half), (cx + half, cy + half)] {
            if img.get_checked(x, y).is_none() {
                return Err(ModelError::OutOfBounds {
                    x,
                    y,
                    width: img.width(),
                    height: img.height(),
                });
            }
        }
        let stride = img.width() as isize;
        Ok(Self {
            data: img.data(),
            stride,
            base: cy as isize * stride + cx as isize,
        })
    }

    #[inline]
    pub(crate) fn at(&self, (dx, dy): (i16, i16)) -> u8 {
        self.data[(self.base + dy as isize * self.stride + dx as isize) as usize]
    }

    #[inline]
    pub(crate) fn bit(&self, t: &FeatureTest) -> usize {
        (self.at(t.d1) < self.at(t.d2)) as usize
    }
}

/// Evaluates one binary test around `center`.
pub fn eval_feature(img: &GrayImage, center: &Keypoint, t: &FeatureTest) -> Result<bool, ModelError> {
    let (cx, cy) = center.pixel();
    let read = |(dx, dy): (i16, i16)| {
        let (x, y) = (cx + dx as i64, cy + dy as i64);
        img.get_checked(x, y).ok_or(ModelError::OutOfBounds {
            x,
            y,
            width: img.width(),
            height: img.height(),
        })
    };
    let a = read(t.d1)?;
    let b = read(t.d2)?;
    Ok(a < b)
}

/// A flat, ordered group of binary tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fern {
    tests: Vec<FeatureTest>,
}

impl Fern {
    pub fn new(tests: Vec<FeatureTest>) -> Result<Self, ModelError> {
        if tests.is_empty() || tests.len() > MAX_FERN_SIZE {
            return Err(ModelError::InvalidArgument(format!(
                "fern size must be in 1..={MAX_FERN_SIZE}, got {}",
                tests.len()
            )));
        }
        Ok(Self { tests })
    }

    pub fn tests(&self) -> &[FeatureTest] {
        &self.tests
    }

    pub fn size(&self) -> usize {
        self.tests.len()
    }

    /// Packs the test outcomes into a leaf index, test 0 in the most significant bit.
    #[inline]
    pub(crate) fn leaf(&self, patch: &PatchRef<'_>) -> usize {
        self.tests.iter().fold(0, |idx, t| (idx << 1) | patch.bit(t))
    }
}

/// Leaf index of `fern` for the patch around `center`.
pub fn eval_fern(img: &GrayImage, center: &Keypoint, fern: &Fern) -> Result<usize, ModelError> {
    let mut idx = 0;
    for t in fern.tests() {
        idx = (idx << 1) | eval_feature(img, center, t)? as usize;
    }
    Ok(idx)
}

/// `s` ferns of `m` tests with offsets drawn uniformly over the patch square.
pub fn make_random_ferns<R: Rng + ?Sized>(
    s: usize,
    m: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<Vec<Fern>, ModelError> {
    check_patch_size(patch_size)?;
    if s == 0 || m == 0 || m > MAX_FERN_SIZE {
        return Err(ModelError::InvalidArgument(format!(
            "need at least one fern and a fern size in 1..={MAX_FERN_SIZE}, got s={s}, m={m}"
        )));
    }
    let half = (patch_size / 2) as i16;
    (0..s)
        .map(|_| Fern::new((0..m).map(|_| FeatureTest::random(rng, half)).collect()))
        .collect()
}

pub(crate) fn check_patch_size(patch_size: usize) -> Result<(), ModelError> {
    if patch_size < 3 || patch_size.is_multiple_of(2) || patch_size > i16::MAX as usize {
        return Err(ModelError::InvalidArgument(format!(
            "patch size must be odd and at least 3, got {patch_size}"
        )));
    }
    Ok(())
}

pub(crate) fn check_classes(classes: &ClassSet) -> Result<(), String> {
    if classes.is_empty() {
        return Err("model needs at least one class".into());
    }
    let sep = classes.min_separation();
    for (i, k) in classes.keypoints.iter().enumerate() {
        if !k.x.is_finite() || !k.y.is_finite() {
            return Err(format!("class {i} has a non-finite position"));
        }
        if classes.keypoints[..i].iter().any(|o| o.distance(k) < sep) {
            return Err(format!("class {i} is closer than {sep} px to another class"));
        }
    }
    Ok(())
}

/// The center pixel used for a training or test patch image.
pub fn patch_center(patch: &GrayImage) -> Keypoint {
    Keypoint::new((patch.width() / 2) as f64, (patch.height() / 2) as f64)
}

/// Winning class and its unnormalized log score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class_id: usize,
    pub log_score: f64,
}

/// A trained (or trainable) fern classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FernModel {
    classes: ClassSet,
    ferns: Vec<Fern>,
    fern_size: usize,
    counts: LeafCounts,
    log_table: Vec<f64>,
    log_prior: Vec<f64>,
}

impl FernModel {
    /// Untrained model: every leaf starts at probability `1 / 2^M`.
    pub fn new(classes: ClassSet, ferns: Vec<Fern>) -> Result<Self, ModelError> {
        check_patch_size(classes.patch_size)?;
        check_classes(&classes).map_err(ModelError::InvalidArgument)?;
        let fern_size = ferns
            .first()
            .map(Fern::size)
            .ok_or_else(|| ModelError::InvalidArgument("model needs at least one fern".into()))?;
        for f in &ferns {
            if f.size() != fern_size {
                return Err(ModelError::InvalidArgument("ferns differ in size".into()));
            }
            for t in f.tests() {
                t.check(classes.patch_size).map_err(ModelError::InvalidArgument)?;
            }
        }
        let counts = LeafCounts::new(ferns.len(), 1 << fern_size, classes.len());
        let mut model = Self {
            log_prior: Vec::new(),
            log_table: Vec::new(),
            classes,
            ferns,
            fern_size,
            counts,
        };
        model.rebuild_tables();
        Ok(model)
    }

    /// Untrained model with `s` random ferns of size `m` drawn from `seed`.
    pub fn random(classes: ClassSet, s: usize, m: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = stream_rng(seed, "ferns", 0);
        let ferns = make_random_ferns(s, m, classes.patch_size, &mut rng)?;
        Self::new(classes, ferns)
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_ferns(&self) -> usize {
        self.ferns.len()
    }

    pub fn fern_size(&self) -> usize {
        self.fern_size
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.fern_size
    }

    pub fn patch_size(&self) -> usize {
        self.classes.patch_size
    }

    pub fn ferns(&self) -> &[Fern] {
        &self.ferns
    }

    pub fn counts(&self) -> &LeafCounts {
        &self.counts
    }

    /// `ln P(leaf | class)` laid out as `[fern][leaf][class]`.
    pub fn log_table(&self) -> &[f64] {
        &self.log_table
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    #[inline]
    pub fn log_prob(&self, fern: usize, leaf: usize, class: usize) -> f64 {
        self.log_table[(fern * self.num_leaves() + leaf) * self.num_classes() + class]
    }

    #[inline]
    fn row(&self, fern: usize, leaf: usize) -> &[f64] {
        let h = self.num_classes();
        let start = (fern * self.num_leaves() + leaf) * h;
        &self.log_table[start..start + h]
    }

    fn rebuild_tables(&mut self) {
        self.log_table = self.counts.log_likelihoods();
        let h = self.num_classes();
        self.log_prior = vec![-(h as f64).ln(); h];
    }

    /// Empty count shard shaped for this model.
    pub fn new_counts(&self) -> LeafCounts {
        LeafCounts::new(self.num_ferns(), self.num_leaves(), self.num_classes())
    }

    /// Records one training patch into `shard` without touching the model tables.
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
        let leaves = self.leaves(patch, &patch_center(patch))?;
        shard.record(&leaves, label);
        Ok(())
    }

    /// Adds a count shard and rebuilds the probability tables.
    pub fn add_counts(&mut self, shard: &LeafCounts) -> Result<(), ModelError> {
        self.counts
            .merge(shard)
            .map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
        self.rebuild_tables();
        Ok(())
    }

    /// Trains on `(patch, label)` pairs. The update is all-or-nothing: on error the
    /// model is unchanged.
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

    /// Leaf reached in every fern by the patch around `center`.
    pub fn leaves(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<usize>, ModelError> {
        let patch = PatchRef::new(img, center.pixel(), self.patch_size())?;
        Ok(self.ferns.iter().map(|f| f.leaf(&patch)).collect())
    }

    pub fn classify(&self, img: &GrayImage, center: &Keypoint) -> Result<ClassScore, ModelError> {
        self.classify_counted(img, center, &mut ())
    }

    /// [`FernModel::classify`] reporting pixel-pair reads and table lookups to `counter`.
    pub fn classify_counted<C: CostCounter>(
        &self,
        img: &GrayImage,
        center: &Keypoint,
        counter: &mut C,
    ) -> Result<ClassScore, ModelError> {
        let patch = PatchRef::new(img, center.pixel(), self.patch_size())?;
        let mut scores = self.log_prior.clone();
        for (s, fern) in self.ferns.iter().enumerate() {
            let leaf = fern.leaf(&patch);
            counter.pixel_pairs(fern.size() as u64);
            counter.table_lookups(1);
            for (acc, &lp) in scores.iter_mut().zip(self.row(s, leaf)) {
                *acc += lp;
            }
        }
        let class_id = argmax(&scores);
        Ok(ClassScore {
            class_id,
            log_score: scores[class_id],
        })
    }

    /// Class scores from precomputed leaves of the first `leaves.len()` ferns.
    ///
    /// `NaiveBayes` gives unnormalized log posteriors; `Average` gives the mean of
    /// the per-fern posteriors `P(class | leaf)`.
    pub fn scores_from_leaves(&self, leaves: &[usize], mode: Combination) -> Vec<f64> {
        debug_assert!(leaves.len() <= self.num_ferns());
        match mode {
            Combination::NaiveBayes => {
                let mut scores = self.log_prior.clone();
                for (s, &leaf) in leaves.iter().enumerate() {
                    for (acc, &lp) in scores.iter_mut().zip(self.row(s, leaf)) {
                        *acc += lp;
                    }
                }
                scores
            }
            Combination::Average => {
                let mut scores = vec![0.0; self.num_classes()];
                for (s, &leaf) in leaves.iter().enumerate() {
                    let joint: Vec<f64> = self
                        .row(s, leaf)
                        .iter()
                        .zip(&self.log_prior)
                        .map(|(a, b)| a + b)
                        .collect();
                    for (acc, p) in scores.iter_mut().zip(softmax(&joint)) {
                        *acc += p;
                    }
                }
                let n = leaves.len().max(1) as f64;
                scores.iter_mut().for_each(|s| *s /= n);
                scores
            }
        }
    }

    /// Normalized class posterior for the patch around `center`.
    pub fn posterior(&self, img: &GrayImage, center: &Keypoint) -> Result<Vec<f64>, ModelError> {
        let leaves = self.leaves(img, center)?;
        Ok(softmax(&self.scores_from_leaves(&leaves, Combination::NaiveBayes)))
    }

    /// Standalone model made of the first `k` ferns.
    pub fn truncated(&self, k: usize) -> FernModel {
        let k = k.clamp(1, self.num_ferns());
        let width = self.num_leaves() * self.num_classes();
        FernModel {
            classes: self.classes.clone(),
            ferns: self.ferns[..k].to_vec(),
            fern_size: self.fern_size,
            counts: self.counts.truncated(k),
            log_table: self.log_table[..k * width].to_vec(),
            log_prior: self.log_prior.clone(),
        }
    }

    /// Serializes to the little-endian `FERNMDL1` format.
    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.num_classes() as u32);
        w.u32(self.num_ferns() as u32);
        w.u32(self.fern_size as u32);
        w.u32(self.patch_size() as u32);
        write_classes(&mut w, &self.classes, &self.log_prior);
        for f in &self.ferns {
            write_tests(&mut w, f.tests());
        }
        for &c in self.counts.counts() {
            w.u64(c);
        }
        for &p in &self.log_table {
            w.f64(p);
        }
        w.0
    }

    /// Parses and validates a `FERNMDL1` model.
    pub fn load(bytes: &[u8]) -> Result<FernModel, ModelError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MODEL_MAGIC {
            return Err(ModelError::Format("bad magic, expected FERNMDL1".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let h = r.u32()? as usize;
        let s = r.u32()? as usize;
        let m = r.u32()? as usize;
        let patch_size = r.u32()? as usize;
        let header = ModelHeader::check(h, s, m, patch_size, r.remaining(), m)?;
        let (classes, log_prior) = read_classes(&mut r, h, patch_size)?;
        let mut ferns = Vec::with_capacity(s);
        for _ in 0..s {
            let tests = read_tests(&mut r, m, patch_size)?;
            ferns.push(Fern::new(tests).map_err(|e| ModelError::Corrupt(e.to_string()))?);
        }
        let counts = read_counts(&mut r, header.table_len)?;
        let log_table = (0..header.table_len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.remaining() != 0 {
            return Err(ModelError::Format(format!("{} trailing bytes", r.remaining())));
        }
        let counts = LeafCounts::from_raw(s, 1 << m, h, counts);
        if !counts.is_conserved() {
            return Err(ModelError::Corrupt("per-fern class totals disagree".into()));
        }
        check_leaf_distributions(&log_table, s, 1 << m, h, |v| v.exp(), "fern")?;
        Ok(FernModel {
            classes,
            ferns,
            fern_size: m,
            counts,
            log_table,
            log_prior,
        })
    }
}

/// Sizes implied by a model header, with overflow and plausibility checks.
pub(crate) struct ModelHeader {
    pub table_len: usize,
}

impl ModelHeader {
    pub(crate) fn check(
        h: usize,
        units: usize,
        depth: usize,
        patch_size: usize,
        remaining: usize,
        tests_per_unit: usize,
    ) -> Result<Self, ModelError> {
        if h == 0 || units == 0 || depth == 0 || depth > MAX_FERN_SIZE {
            return Err(ModelError::Format(format!(
                "implausible header: classes={h}, units={units}, depth={depth}"
            )));
        }
        if patch_size < 3 || patch_size.is_multiple_of(2) || patch_size > i16::MAX as usize {
            return Err(ModelError::Format(format!("bad patch size {patch_size}")));
        }
        let table_len = units
            .checked_mul(1 << depth)
            .and_then(|v| v.checked_mul(h))
            .ok_or_else(|| ModelError::Format("table size overflows".into()))?;
        let expected = table_len
            .checked_mul(16)
            .and_then(|v| v.checked_add(h * 16))
            .and_then(|v| v.checked_add(units * tests_per_unit * 8))
            .ok_or_else(|| ModelError::Format("model size overflows".into()))?;
        if expected != remaining {
            return Err(ModelError::Format(format!(
                "payload is {remaining} bytes, header implies {expected}"
            )));
        }
        Ok(Self { table_len })
    }
}

pub(crate) fn write_classes(w: &mut Writer, classes: &ClassSet, log_prior: &[f64]) {
    for k in &classes.keypoints {
        w.f32(k.x as f32);
        w.f32(k.y as f32);
    }
    for &p in log_prior {
        w.f64(p);
    }
}

pub(crate) fn read_classes(
    r: &mut Reader<'_>,
    h: usize,
    patch_size: usize,
) -> Result<(ClassSet, Vec<f64>), ModelError> {
    let mut keypoints = Vec::with_capacity(h);
    for _ in 0..h {
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        keypoints.push(Keypoint::new(x, y));
    }
    let classes = ClassSet { keypoints, patch_size };
    check_classes(&classes).map_err(ModelError::Corrupt)?;
    let log_prior = (0..h).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let total: f64 = log_prior.iter().map(|p| p.exp()).sum();
    if log_prior.iter().any(|p| !p.is_finite()) || (total - 1.0).abs() > 1e-12 {
        return Err(ModelError::Corrupt(format!("class prior sums to {total}")));
    }
    Ok((classes, log_prior))
}

pub(crate) fn write_tests(w: &mut Writer, tests: &[FeatureTest]) {
    for t in tests {
        w.i16(t.d1.0);
        w.i16(t.d1.1);
        w.i16(t.d2.0);
        w.i16(t.d2.1);
    }
}

pub(crate) fn read_tests(r: &mut Reader<'_>, n: usize, patch_size: usize) -> Result<Vec<FeatureTest>, ModelError> {
    (0..n)
        .map(|_| {
            let t = FeatureTest::new((r.i16()?, r.i16()?), (r.i16()?, r.i16()?));
            t.check(patch_size).map_err(ModelError::Corrupt)?;
            Ok(t)
        })
        .collect()
}

pub(crate) fn read_counts(r: &mut Reader<'_>, len: usize) -> Result<Vec<u64>, ModelError> {
    Ok((0..len).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?)
}

/// Every `(unit, class)` distribution over leaves must sum to one.
pub(crate) fn check_leaf_distributions(
    table: &[f64],
    units: usize,
    leaves: usize,
    classes: usize,
    to_prob: impl Fn(f64) -> f64,
    what: &str,
) -> Result<(), ModelError> {
    for u in 0..units {
        for c in 0..classes {
            let mut total = 0.0;
            for l in 0..leaves {
                let v = table[(u * leaves + l) * classes + c];
                let p = to_prob(v);
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(ModelError::Corrupt(format!("{what} {u}: invalid probability {v}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(ModelError::Corrupt(format!(
                    "{what} {u}, class {c}: leaf distribution sums to {total}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize, patch_size: usize) -> ClassSet {
        ClassSet {
            keypoints: (0..n).map(|i| Keypoint::new(20.0 + 20.0 * i as f64, 20.0)).collect(),
            patch_size,
        }
    }

    fn one_test_model(h: usize) -> FernModel {
        let fern = Fern::new(vec![FeatureTest::new((-1, 0), (1, 0))]).unwrap();
        FernModel::new(classes(h, 3), vec![fern]).unwrap()
    }

    /// 3x3 patch whose single test (left < right) evaluates to `bit`.
    fn patch_with_bit(bit: bool) -> GrayImage {
        let (l, r) = if bit { (10, 20) } else { (20, 10) };
        GrayImage::new(3, 3, vec![0, 0, 0, l, 0, r, 0, 0, 0]).unwrap()
    }

    #[test]
    fn feature_strict_inequality() {
        let c = Keypoint::new(1.0, 1.0);
        let t = FeatureTest::new((-1, 0), (1, 0));
        assert!(eval_feature(&patch_with_bit(true), &c, &t).unwrap());
        assert!(!eval_feature(&patch_with_bit(false), &c, &t).unwrap());
        let flat = GrayImage::filled(3, 3, 50);
        assert!(!eval_feature(&flat, &c, &t).unwrap());
        assert!(matches!(
            eval_feature(&flat, &Keypoint::new(0.0, 0.0), &t),
            Err(ModelError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn fern_bit_order() {
        // pixels along the row: 0 at x=0 .. 4 at x=4
        let img = GrayImage::from_fn(5, 1, |x, _| x as u8);
        let c = Keypoint::new(2.0, 0.0);
        let fern = Fern::new(vec![
            FeatureTest::new((-1, 0), (1, 0)), // 1 < 3 -> 1
            FeatureTest::new((1, 0), (-1, 0)), // 3 < 1 -> 0
            FeatureTest::new((0, 0), (2, 0)),  // 2 < 4 -> 1
        ])
        .unwrap();
        assert_eq!(eval_fern(&img, &c, &fern).unwrap(), 5);
        assert_eq!(eval_fern(&GrayImage::filled(5, 1, 9), &c, &fern).unwrap(), 0);
    }

    #[test]
    fn random_ferns_constraints() {
        let mut rng = stream_rng(1, "t", 0);
        let ferns = make_random_ferns(1000, 10, 31, &mut rng).unwrap();
        for f in &ferns {
            for t in f.tests() {
                t.check(31).unwrap();
            }
        }
        let again = make_random_ferns(1000, 10, 31, &mut stream_rng(1, "t", 0)).unwrap();
        assert_eq!(ferns, again);
        let full = make_random_ferns(30, 10, 31, &mut rng).unwrap();
        assert_eq!(full.iter().map(Fern::size).sum::<usize>(), 300);
        assert!(make_random_ferns(1, 1, 4, &mut rng).is_err());
    }

    #[test]
    fn untrained_model_is_uniform() {
        let m = FernModel::random(classes(3, 15), 4, 5, 2).unwrap();
        for &v in m.log_table() {
            assert!((v.exp() - 1.0 / 32.0).abs() < 1e-15);
        }
        let img = GrayImage::filled(60, 60, 3);
        assert!(m
            .classify(&img, &Keypoint::new(20.0, 20.0))
            .unwrap()
            .log_score
            .is_finite());
    }

    #[test]
    fn two_class_hand_example() {
        let mut m = one_test_model(2);
        let one = patch_with_bit(true);
        let zero = patch_with_bit(false);
        let samples = vec![
            (&zero, 0),
            (&zero, 0),
            (&zero, 0),
            (&one, 0),
            (&zero, 1),
            (&one, 1),
            (&one, 1),
            (&one, 1),
        ];
        m.train(samples).unwrap();
        assert!((m.log_prob(0, 1, 0).exp() - 1.0 / 3.0).abs() < 1e-15);
        let c = Keypoint::new(1.0, 1.0);
        assert_eq!(m.classify(&one, &c).unwrap().class_id, 1);
        let p = m.posterior(&one, &c).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_always_zero() {
        let m = one_test_model(1);
        let c = Keypoint::new(1.0, 1.0);
        assert_eq!(m.classify(&patch_with_bit(true), &c).unwrap().class_id, 0);
        assert_eq!(m.posterior(&patch_with_bit(false), &c).unwrap(), vec![1.0]);
    }

    #[test]
    fn symmetric_model_is_even() {
        let mut m = one_test_model(2);
        let one = patch_with_bit(true);
        m.train(vec![(&one, 0), (&one, 1)]).unwrap();
        let p = m.posterior(&one, &Keypoint::new(1.0, 1.0)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        // tie goes to the lower class
        assert_eq!(m.classify(&one, &Keypoint::new(1.0, 1.0)).unwrap().class_id, 0);
    }

    #[test]
    fn training_errors_leave_model_unchanged() {
        let mut m = one_test_model(2);
        let before = m.clone();
        let one = patch_with_bit(true);
        assert_eq!(
            m.train(vec![(&one, 0), (&one, 2)]),
            Err(ModelError::InvalidLabel { label: 2, classes: 2 })
        );
        let small = GrayImage::filled(2, 3, 0);
        assert!(matches!(
            m.train(vec![(&small, 0)]),
            Err(ModelError::InvalidPatch { .. })
        ));
        assert_eq!(m, before);
    }

    #[test]
    fn op_count_matches_budget() {
        let m = FernModel::random(classes(2, 15), 7, 6, 3).unwrap();
        let img = GrayImage::from_fn(40, 40, |x, y| (x * 7 + y * 13) as u8);
        let mut ops = OpCount::default();
        m.classify_counted(&img, &Keypoint::new(20.0, 20.0), &mut ops).unwrap();
        assert_eq!(
            ops,
            OpCount {
                pixel_pairs: 42,
                table_lookups: 7
            }
        );
        assert!(matches!(
            m.classify(&img, &Keypoint::new(3.0, 20.0)),
            Err(ModelError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn save_load_errors() {
        let mut m = FernModel::random(classes(3, 15), 3, 4, 5).unwrap();
        let p = GrayImage::from_fn(15, 15, |x, y| ((x * 17) ^ (y * 5)) as u8);
        m.train(vec![(&p, 1), (&p, 2)]).unwrap();
        let bytes = m.save();
        let loaded = FernModel::load(&bytes).unwrap();
        assert_eq!(loaded, m);

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(FernModel::load(&bad), Err(ModelError::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(FernModel::load(&bad), Err(ModelError::Format(_))));
        assert!(matches!(
            FernModel::load(&bytes[..bytes.len() - 3]),
            Err(ModelError::Format(_))
        ));
        assert!(matches!(FernModel::load(&bytes[..5]), Err(ModelError::Format(_))));

        // bump one count so fern totals no longer agree
        let counts_at = bytes.len() - 2 * 3 * 16 * 3 * 8;
        let mut bad = bytes.clone();
        bad[counts_at] = bad[counts_at].wrapping_add(1);
        assert!(matches!(FernModel::load(&bad), Err(ModelError::Corrupt(_))));

        // perturb a probability
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        bad[last - 6] ^= 0x40;
        assert!(matches!(FernModel::load(&bad), Err(ModelError::Corrupt(_))));
    }
}
