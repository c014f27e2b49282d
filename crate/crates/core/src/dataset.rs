//! Synthetic training and test views of a reference image under random affine
//! deformations, with ground-truth labels from the known geometry.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::ferns::ModelError;
use crate::image::{add_noise, warp_image, write_pgm, AffineDeform, DeformRange, GrayImage};
use crate::keypoints::ClassSet;
use crate::model::PatchModel;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    /// Training views generated per rotation bucket.
    pub views_per_degree: usize,
    /// Number of rotation buckets spanning the θ range.
    pub rotation_degrees: usize,
    pub test_views: usize,
    /// Standard deviation of the Gaussian noise added to test views.
    pub noise_sigma: f64,
    pub range: DeformRange,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            views_per_degree: 2,
            rotation_degrees: 360,
            test_views: 1000,
            noise_sigma: 10.0,
            range: DeformRange::default(),
        }
    }
}

impl DatasetSpec {
    /// 30 views per degree over a full turn: 10800 training views.
    pub fn full_protocol() -> Self {
        Self {
            views_per_degree: 30,
            ..Self::default()
        }
    }

    pub fn training_views(&self) -> usize {
        self.views_per_degree * self.rotation_degrees
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Train,
    Test,
}

impl Stream {
    fn label(self) -> &'static str {
        match self {
            Stream::Train => "train-views",
            Stream::Test => "test-views",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: GrayImage,
    pub label: usize,
    pub deform: AffineDeform,
    pub view_id: usize,
}

/// One synthetic view and the class patches cut from it.
#[derive(Debug, Clone)]
pub struct View {
    pub view_id: usize,
    pub deform: AffineDeform,
    pub samples: Vec<PatchSample>,
    /// Classes whose patch left the view.
    pub skipped: Vec<usize>,
}

/// Generates views of `img` on demand; view `i` depends only on
/// `(seed, stream, i)`, so views can be produced in any order or in parallel.
#[derive(Debug, Clone, Copy)]
pub struct ViewGenerator<'a> {
    img: &'a GrayImage,
    classes: &'a ClassSet,
    spec: &'a DatasetSpec,
    seed: u64,
    stream: Stream,
}

impl<'a> ViewGenerator<'a> {
    pub fn training(img: &'a GrayImage, classes: &'a ClassSet, spec: &'a DatasetSpec, seed: u64) -> Self {
        Self {
            img,
            classes,
            spec,
            seed,
            stream: Stream::Train,
        }
    }

    pub fn test(img: &'a GrayImage, classes: &'a ClassSet, spec: &'a DatasetSpec, seed: u64) -> Self {
        Self {
            img,
            classes,
            spec,
            seed,
            stream: Stream::Test,
        }
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn spec(&self) -> &DatasetSpec {
        self.spec
    }

    pub fn num_views(&self) -> usize {
        match self.stream {
            Stream::Train => self.spec.training_views(),
            Stream::Test => self.spec.test_views,
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        match self.stream {
            Stream::Train => 0.0,
            Stream::Test => self.spec.noise_sigma,
        }
    }

    /// Rotation bucket of a training view.
    pub fn bucket(&self, view_id: usize) -> usize {
        view_id / self.spec.views_per_degree.max(1)
    }

    fn draw_deform<R: Rng>(&self, view_id: usize, rng: &mut R) -> AffineDeform {
        let range = &self.spec.range;
        let mut d = range.sample(rng);
        if self.stream == Stream::Train {
            // θ sweeps the range bucket by bucket, jittered inside each bucket
            let (lo, hi) = range.theta;
            let width = (hi - lo) / self.spec.rotation_degrees.max(1) as f64;
            d.theta = if width > 0.0 {
                lo + (self.bucket(view_id) as f64 + rng.gen::<f64>()) * width
            } else {
                lo
            };
        }
        let (cx, cy) = self.img.center();
        d.with_translation(cx, cy)
    }

    /// The warped (and, for test views, noisy) full image of one view.
    pub fn render(&self, view_id: usize) -> (AffineDeform, GrayImage) {
        let mut rng = stream_rng(self.seed, self.stream.label(), view_id as u64);
        let d = self.draw_deform(view_id, &mut rng);
        let warped = warp_image(self.img, &d, self.img.width(), self.img.height());
        let sigma = self.noise_sigma();
        let warped = if sigma > 0.0 {
            add_noise(&warped, sigma, &mut rng).expect("non-negative sigma")
        } else {
            warped
        };
        (d, warped)
    }

    pub fn view(&self, view_id: usize) -> View {
        let (deform, image) = self.render(view_id);
        let center = self.img.center();
        let ps = self.classes.patch_size;
        let half = (ps / 2) as i64;
        let mut samples = Vec::with_capacity(self.classes.len());
        let mut skipped = Vec::new();
        for (label, k) in self.classes.keypoints.iter().enumerate() {
            let (x, y) = deform.map_forward((k.x, k.y), center);
            let (px, py) = (x.round() as i64, y.round() as i64);
            match image.crop(px - half, py - half, ps, ps) {
                Some(patch) => samples.push(PatchSample {
                    patch,
                    label,
                    deform,
                    view_id,
                }),
                None => skipped.push(label),
            }
        }
        View {
            view_id,
            deform,
            samples,
            skipped,
        }
    }

    pub fn views(&self) -> impl Iterator<Item = View> + '_ {
        (0..self.num_views()).map(move |i| self.view(i))
    }

    /// Every sample of every view, in view order.
    pub fn samples(&self) -> impl Iterator<Item = PatchSample> + '_ {
        self.views().flat_map(|v| v.samples)
    }
}

/// FNV-1a over the labels and pixels of a view's samples.
pub fn view_digest(view: &View) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&(view.view_id as u64).to_le_bytes());
    for s in &view.samples {
        eat(&(s.label as u64).to_le_bytes());
        eat(s.patch.data());
    }
    h
}

/// Order-sensitive fold of per-view digests.
pub fn combine_digests(digests: impl IntoIterator<Item = u64>) -> u64 {
    digests.into_iter().fold(0x8422_2325_cbf2_9ce4, |acc, d| {
        (acc ^ d).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub views: usize,
    pub samples: usize,
    pub skipped: usize,
    pub per_class: Vec<u64>,
    /// Digest of the whole sample stream in view order.
    pub digest: u64,
}

/// Trains `model` on every view of `views`, in parallel shards merged by
/// count addition. Equal inputs give identical models regardless of thread count.
pub fn train_model<M: PatchModel>(model: &mut M, views: &ViewGenerator<'_>) -> Result<TrainStats, ModelError> {
    let n = views.num_views();
    let h = model.num_classes();
    let frozen: &M = model;
    let (shard, mut digests, samples, skipped, per_class) = (0..n)
        .into_par_iter()
        .try_fold(
            || (frozen.new_counts(), Vec::new(), 0usize, 0usize, vec![0u64; h]),
            |(mut shard, mut digests, mut samples, mut skipped, mut per_class), i| {
                let view = views.view(i);
                for s in &view.samples {
                    frozen.accumulate(&mut shard, &s.patch, s.label)?;
                    per_class[s.label] += 1;
                }
                samples += view.samples.len();
                skipped += view.skipped.len();
                digests.push((i, view_digest(&view)));
                Ok::<_, ModelError>((shard, digests, samples, skipped, per_class))
            },
        )
        .try_reduce(
            || (frozen.new_counts(), Vec::new(), 0, 0, vec![0u64; h]),
            |mut a, b| {
                a.0.merge(&b.0)
                    .map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
                a.1.extend(b.1);
                a.2 += b.2;
                a.3 += b.3;
                a.4.iter_mut().zip(&b.4).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    model.add_counts(&shard)?;
    digests.sort_unstable();
    Ok(TrainStats {
        views: n,
        samples,
        skipped,
        per_class,
        digest: combine_digests(digests.into_iter().map(|(_, d)| d)),
    })
}

/// Writes `view_NNNNN.pgm` for every view plus `manifest.csv`.
pub fn dump_views(dir: &Path, views: &ViewGenerator<'_>) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record([
        "view_id",
        "theta",
        "phi",
        "lambda1",
        "lambda2",
        "tx",
        "ty",
        "noise_sigma",
    ])?;
    for i in 0..views.num_views() {
        let (d, image) = views.render(i);
        fs::write(dir.join(format!("view_{i:05}.pgm")), write_pgm(&image))?;
        manifest.serialize((i, d.theta, d.phi, d.lambda1, d.lambda2, d.tx, d.ty, views.noise_sigma()))?;
    }
    manifest.flush()
}
