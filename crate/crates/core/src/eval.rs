//! Recognition-rate measurement, unit-count sweeps, the four-way
//! structure/combination comparison, and classification timing.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{combine_digests, train_model, view_digest, DatasetSpec, PatchSample, ViewGenerator};
use crate::ferns::{patch_center, Combination, FernModel, ModelError, OpCount};
use crate::forest::TreeForest;
use crate::image::GrayImage;
use crate::keypoints::ClassSet;
use crate::model::PatchModel;
use crate::tables::argmax;

pub const CSV_HEADER: [&str; 6] = ["method", "units", "recognition_rate", "patches", "ns_per_patch", "seed"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FernNB,
    FernAvg,
    TreeNB,
    TreeAvg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FernNB, Method::FernAvg, Method::TreeNB, Method::TreeAvg];

    pub fn name(self) -> &'static str {
        match self {
            Method::FernNB => "FernNB",
            Method::FernAvg => "FernAvg",
            Method::TreeNB => "TreeNB",
            Method::TreeAvg => "TreeAvg",
        }
    }

    pub fn combination(self) -> Combination {
        match self {
            Method::FernNB | Method::TreeNB => Combination::NaiveBayes,
            Method::FernAvg | Method::TreeAvg => Combination::Average,
        }
    }

    pub fn uses_ferns(self) -> bool {
        matches!(self, Method::FernNB | Method::FernAvg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?}, expected one of FernNB, FernAvg, TreeNB, TreeAvg"))
    }
}

/// One point of a recognition-rate curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub method: Method,
    pub units: usize,
    pub recognition_rate: f64,
    pub patches_evaluated: u64,
    pub classify_ns_per_patch: f64,
    pub seed: u64,
}

/// Anything that labels a patch image by its center.
pub trait Classifier {
    fn predict(&self, patch: &GrayImage) -> Result<usize, ModelError>;
}

impl Classifier for FernModel {
    fn predict(&self, patch: &GrayImage) -> Result<usize, ModelError> {
        Ok(self.classify(patch, &patch_center(patch))?.class_id)
    }
}

impl Classifier for TreeForest {
    fn predict(&self, patch: &GrayImage) -> Result<usize, ModelError> {
        Ok(self.classify(patch, &patch_center(patch))?.class_id)
    }
}

/// A model paired with an explicit combination rule.
pub struct WithMode<'a, M>(pub &'a M, pub Combination);

impl<M: PatchModel> Classifier for WithMode<'_, M> {
    fn predict(&self, patch: &GrayImage) -> Result<usize, ModelError> {
        PatchModel::predict(self.0, patch, self.1)
    }
}

/// Fraction of samples assigned their true label.
pub fn recognition_rate<'a, C, I>(classifier: &C, test: I) -> Result<f64, EvalError>
where
    C: Classifier + ?Sized,
    I: IntoIterator<Item = &'a PatchSample>,
{
    let (mut correct, mut total) = (0u64, 0u64);
    for s in test {
        total += 1;
        if classifier.predict(&s.patch)? == s.label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(correct as f64 / total as f64)
}

/// Correct-prediction counts of every unit prefix and combination rule over a test stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixResults {
    pub unit_counts: Vec<usize>,
    pub modes: Vec<Combination>,
    /// `correct[mode][i]` for `unit_counts[i]`.
    pub correct: Vec<Vec<u64>>,
    pub total: u64,
    pub digest: u64,
}

impl PrefixResults {
    pub fn rate(&self, mode: usize, count: usize) -> f64 {
        self.correct[mode][count] as f64 / self.total as f64
    }
}

/// Classifies every test sample once per (mode, prefix length), evaluating
/// the unit leaves only once per sample. Parallel over views.
pub fn evaluate_prefixes<M: PatchModel>(
    model: &M,
    test: &ViewGenerator<'_>,
    unit_counts: &[usize],
    modes: &[Combination],
) -> Result<PrefixResults, EvalError> {
    let max = *unit_counts
        .iter()
        .max()
        .ok_or_else(|| EvalError::InvalidArgument("no unit counts".into()))?;
    if unit_counts.contains(&0) || max > model.num_units() {
        return Err(EvalError::InvalidArgument(format!(
            "unit counts must lie in 1..={}, got {unit_counts:?}",
            model.num_units()
        )));
    }
    let zero = || (vec![vec![0u64; unit_counts.len()]; modes.len()], 0u64, Vec::new());
    let (correct, total, mut digests) = (0..test.num_views())
        .into_par_iter()
        .try_fold(zero, |(mut correct, mut total, mut digests), i| {
            let view = test.view(i);
            for s in &view.samples {
                let leaves = model.leaves(&s.patch, &patch_center(&s.patch))?;
                for (mi, &mode) in modes.iter().enumerate() {
                    let mut scores = model.initial_scores(mode);
                    let mut next = 0;
                    for (unit, &leaf) in leaves.iter().enumerate().take(max) {
                        model.add_unit_evidence(&mut scores, unit, leaf, mode);
                        for (ci, &k) in unit_counts.iter().enumerate() {
                            if k == unit + 1 && argmax(&scores) == s.label {
                                correct[mi][ci] += 1;
                            }
                        }
                        next += 1;
                    }
                    debug_assert_eq!(next, max);
                }
                total += 1;
            }
            digests.push((i, view_digest(&view)));
            Ok::<_, EvalError>((correct, total, digests))
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
            a.1 += b.1;
            a.2.extend(b.2);
            Ok(a)
        })?;
    if total == 0 {
        return Err(EvalError::EmptyTestSet);
    }
    digests.sort_unstable();
    Ok(PrefixResults {
        unit_counts: unit_counts.to_vec(),
        modes: modes.to_vec(),
        correct,
        total,
        digest: combine_digests(digests.into_iter().map(|(_, d)| d)),
    })
}

/// Timing of repeated classification passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    /// Median over repetitions of the per-patch wall-clock time.
    pub ns_per_patch: f64,
    /// Pixel-pair comparisons made per classified patch.
    pub comparisons_per_patch: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `repetitions` passes of `f` over `patches` on the calling thread.
pub fn time_passes(patches: &[GrayImage], repetitions: usize, mut f: impl FnMut(&GrayImage)) -> f64 {
    let reps: Vec<f64> = (0..repetitions.max(1))
        .map(|_| {
            let start = Instant::now();
            for p in patches {
                f(p);
            }
            start.elapsed().as_nanos() as f64 / patches.len().max(1) as f64
        })
        .collect();
    median(reps)
}

/// Times fern classification and counts the pixel comparisons it makes.
pub fn bench_classify(model: &FernModel, patches: &[GrayImage], repetitions: usize) -> Result<BenchResult, EvalError> {
    if patches.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut ops = OpCount::default();
    for p in patches {
        model.classify_counted(p, &patch_center(p), &mut ops)?;
    }
    let ns = time_passes(patches, repetitions, |p| {
        black_box(model.classify(black_box(p), &patch_center(p)).ok());
    });
    Ok(BenchResult {
        ns_per_patch: ns,
        comparisons_per_patch: ops.pixel_pairs / patches.len() as u64,
    })
}

fn bench_mode<M: PatchModel>(model: &M, mode: Combination, patches: &[GrayImage], repetitions: usize) -> f64 {
    time_passes(patches, repetitions, |p| {
        black_box(model.predict(black_box(p), mode).ok());
    })
}

/// Experiment settings shared by sweeps and comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentConfig {
    pub spec: DatasetSpec,
    /// Fern size `M`, and tree depth `D` for the tree baseline.
    pub unit_size: usize,
    pub seed: u64,
    /// Test patches used for timing.
    pub bench_patches: usize,
    pub bench_repetitions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec: DatasetSpec::default(),
            unit_size: 10,
            seed: 0,
            bench_patches: 256,
            bench_repetitions: 5,
        }
    }
}

fn bench_set(test: &ViewGenerator<'_>, n: usize) -> Vec<GrayImage> {
    test.samples().take(n).map(|s| s.patch).collect()
}

pub fn train_ferns(
    img: &GrayImage,
    classes: &ClassSet,
    cfg: &ExperimentConfig,
    units: usize,
) -> Result<(FernModel, crate::dataset::TrainStats), ModelError> {
    let mut model = FernModel::random(classes.clone(), units, cfg.unit_size, cfg.seed)?;
    let stats = train_model(&mut model, &ViewGenerator::training(img, classes, &cfg.spec, cfg.seed))?;
    Ok((model, stats))
}

pub fn train_trees(
    img: &GrayImage,
    classes: &ClassSet,
    cfg: &ExperimentConfig,
    units: usize,
) -> Result<(TreeForest, crate::dataset::TrainStats), ModelError> {
    let mut forest = TreeForest::random(classes.clone(), units, cfg.unit_size, Combination::NaiveBayes, cfg.seed)?;
    let stats = train_model(&mut forest, &ViewGenerator::training(img, classes, &cfg.spec, cfg.seed))?;
    Ok((forest, stats))
}

fn records_for<M: PatchModel>(
    model: &M,
    method: Method,
    results: &PrefixResults,
    mode_index: usize,
    bench: &[GrayImage],
    cfg: &ExperimentConfig,
) -> Vec<EvalRecord> {
    results
        .unit_counts
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let prefix = model.truncated(k);
            EvalRecord {
                method,
                units: k,
                recognition_rate: results.rate(mode_index, i),
                patches_evaluated: results.total,
                classify_ns_per_patch: bench_mode(&prefix, method.combination(), bench, cfg.bench_repetitions),
                seed: cfg.seed,
            }
        })
        .collect()
}

/// Trains once with the largest unit count and evaluates every prefix.
pub fn sweep_units(
    img: &GrayImage,
    classes: &ClassSet,
    cfg: &ExperimentConfig,
    method: Method,
    unit_counts: &[usize],
) -> Result<Vec<EvalRecord>, EvalError> {
    if unit_counts.is_empty() || unit_counts.contains(&0) {
        return Err(EvalError::InvalidArgument(
            "unit counts must be non-empty and positive".into(),
        ));
    }
    let max = *unit_counts.iter().max().unwrap();
    let test = ViewGenerator::test(img, classes, &cfg.spec, cfg.seed);
    let bench = bench_set(&test, cfg.bench_patches);
    let modes = [method.combination()];
    if method.uses_ferns() {
        let (model, _) = train_ferns(img, classes, cfg, max)?;
        let results = evaluate_prefixes(&model, &test, unit_counts, &modes)?;
        Ok(records_for(&model, method, &results, 0, &bench, cfg))
    } else {
        let (forest, _) = train_trees(img, classes, cfg, max)?;
        let results = evaluate_prefixes(&forest, &test, unit_counts, &modes)?;
        Ok(records_for(&forest, method, &results, 0, &bench, cfg))
    }
}

/// The four records of a comparison plus the digests of the streams each
/// trained model and each evaluation consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub records: Vec<EvalRecord>,
    pub train_digests: [u64; 2],
    pub test_digests: [u64; 2],
}

impl Comparison {
    pub fn rate(&self, method: Method) -> f64 {
        self.records
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.recognition_rate)
            .unwrap_or(f64::NAN)
    }
}

/// Ferns (S = `units`, size M) against trees (T = `units`, depth M), each
/// combined by naive Bayes and by averaging, on identical sample streams.
pub fn compare_methods(
    img: &GrayImage,
    classes: &ClassSet,
    cfg: &ExperimentConfig,
    units: usize,
) -> Result<Comparison, EvalError> {
    if units == 0 {
        return Err(EvalError::InvalidArgument("units must be at least 1".into()));
    }
    let test = ViewGenerator::test(img, classes, &cfg.spec, cfg.seed);
    let bench = bench_set(&test, cfg.bench_patches);
    let modes = [Combination::NaiveBayes, Combination::Average];
    let ks = [units];

    let (ferns, fern_stats) = train_ferns(img, classes, cfg, units)?;
    let fern_results = evaluate_prefixes(&ferns, &test, &ks, &modes)?;
    let (trees, tree_stats) = train_trees(img, classes, cfg, units)?;
    let tree_results = evaluate_prefixes(&trees, &test, &ks, &modes)?;

    let mut records = Vec::with_capacity(4);
    for method in Method::ALL {
        let mi = modes.iter().position(|&m| m == method.combination()).unwrap();
        let mut r = if method.uses_ferns() {
            records_for(&ferns, method, &fern_results, mi, &bench, cfg)
        } else {
            records_for(&trees, method, &tree_results, mi, &bench, cfg)
        };
        records.append(&mut r);
    }
    Ok(Comparison {
        records,
        train_digests: [fern_stats.digest, tree_stats.digest],
        test_digests: [fern_results.digest, tree_results.digest],
    })
}

/// Writes records as CSV with the fixed header.
pub fn write_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            r.units.to_string(),
            r.recognition_rate.to_string(),
            r.patches_evaluated.to_string(),
            format!("{:.1}", r.classify_ns_per_patch),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::AffineDeform;

    struct Truth;
    impl Classifier for Truth {
        fn predict(&self, patch: &GrayImage) -> Result<usize, ModelError> {
            Ok(patch.get(0, 0) as usize)
        }
    }

    struct Constant;
    impl Classifier for Constant {
        fn predict(&self, _: &GrayImage) -> Result<usize, ModelError> {
            Ok(0)
        }
    }

    fn sample(label: usize) -> PatchSample {
        PatchSample {
            patch: GrayImage::filled(3, 3, label as u8),
            label,
            deform: AffineDeform::identity(1.0, 1.0),
            view_id: 0,
        }
    }

    #[test]
    fn rate_degenerate_cases() {
        let set: Vec<PatchSample> = (0..10).map(|i| sample(i % 2)).collect();
        assert_eq!(recognition_rate(&Truth, &set).unwrap(), 1.0);
        assert_eq!(recognition_rate(&Constant, &set).unwrap(), 0.5);
        assert!(matches!(recognition_rate(&Truth, &[]), Err(EvalError::EmptyTestSet)));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fern".parse::<Method>().is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let rec = EvalRecord {
            method: Method::TreeAvg,
            units: 3,
            recognition_rate: 0.25,
            patches_evaluated: 8,
            classify_ns_per_patch: 12.34,
            seed: 9,
        };
        let mut out = Vec::new();
        write_csv(&[rec], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "method,units,recognition_rate,patches,ns_per_patch,seed\nTreeAvg,3,0.25,8,12.3,9\n"
        );
    }

    #[test]
    fn median_of_passes() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
    }
}
