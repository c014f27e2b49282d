//! Interest-point detection and selection of the keypoints that become classes.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{warp_image, DeformRange, GrayImage};
use crate::rng::stream_rng;

/// Detections kept per synthetic view, as a multiple of the requested class count.
const DETECTIONS_PER_CLASS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum KeypointError {
    #[error("only {found} stable keypoints found, {requested} requested")]
    InsufficientKeypoints { found: usize, requested: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, response: 0.0 }
    }

    /// Nearest integer pixel.
    #[inline]
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.round() as i64, self.y.round() as i64)
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// The class keypoints of a model; the index of a keypoint is its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub keypoints: Vec<Keypoint>,
    pub patch_size: usize,
}

impl ClassSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn min_separation(&self) -> f64 {
        (self.patch_size / 2) as f64
    }

    /// Checks the separation and border-margin invariants against an image of
    /// the given size.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), KeypointError> {
        let half = (self.patch_size / 2) as f64;
        for (i, k) in self.keypoints.iter().enumerate() {
            if k.x < half || k.y < half || k.x > width as f64 - 1.0 - half || k.y > height as f64 - 1.0 - half {
                return Err(KeypointError::InvalidArgument(format!(
                    "class {i} at ({}, {}) is within {half} px of the border",
                    k.x, k.y
                )));
            }
            for (j, other) in self.keypoints[..i].iter().enumerate() {
                if k.distance(other) < self.min_separation() {
                    return Err(KeypointError::InvalidArgument(format!(
                        "classes {j} and {i} closer than {}",
                        self.min_separation()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Center-versus-ring contrast on the 3x3-smoothed image: the smoothed center
/// compared against the mean of the eight compass samples two pixels away.
fn response_map(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |x: i64, y: i64| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as i64;
    // 3x3 sums with replicated borders; integer so equal inputs give equal scores
    let mut sums = vec![0i64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            sums[(y * w + x) as usize] = s;
        }
    }
    let sum_at = |x: i64, y: i64| sums[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    const RING: [(i64, i64); 8] = [(-2, -2), (0, -2), (2, -2), (-2, 0), (2, 0), (-2, 2), (0, 2), (2, 2)];
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let ring: i64 = RING.iter().map(|&(dx, dy)| sum_at(x + dx, y + dy)).sum();
            let diff = 8 * sum_at(x, y) - ring;
            out[(y * w + x) as usize] = diff.abs() as f64 / 72.0;
        }
    }
    out
}

/// Detects keypoints at least `patch_size / 2` pixels from every border,
/// strongest first (ties in scanline order), at most `max_count` of them.
pub fn detect_keypoints(img: &GrayImage, patch_size: usize, max_count: usize) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    if w <= patch_size || h <= patch_size || max_count == 0 {
        return Vec::new();
    }
    let half = patch_size / 2;
    let resp = response_map(img);
    let mut found = Vec::new();
    for y in half..h - half {
        for x in half..w - half {
            let r = resp[y * w + x];
            if r <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nr = resp[ny as usize * w + nx as usize];
                    // plateaus keep their first pixel in scanline order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if nr > r || (earlier && nr == r) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                found.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    response: r,
                });
            }
        }
    }
    // scanline order is already established; a stable sort keeps it for ties
    found.sort_by(|a, b| b.response.total_cmp(&a.response));
    found.truncate(max_count);
    found
}

#[derive(Default, Clone, Copy)]
struct Vote {
    count: u32,
    response: f64,
}

/// Picks the `h` reference-frame locations re-detected most often across
/// `num_views` random warps of `img`.
///
/// Detections are mapped back through each view's deform and binned to the
/// nearest pixel. Bins are ranked by vote count, then by accumulated detector
/// response, then scanline order, and accepted greedily when at least
/// `patch_size / 2` pixels away from every accepted bin.
pub fn select_stable_classes(
    img: &GrayImage,
    patch_size: usize,
    h: usize,
    num_views: usize,
    range: &DeformRange,
    seed: u64,
) -> Result<ClassSet, KeypointError> {
    if h == 0 || num_views == 0 {
        return Err(KeypointError::InvalidArgument(
            "class count and view count must be at least 1".into(),
        ));
    }
    if patch_size < 3 || patch_size.is_multiple_of(2) {
        return Err(KeypointError::InvalidArgument(format!(
            "patch size must be odd and at least 3, got {patch_size}"
        )));
    }
    let (w, ht) = (img.width(), img.height());
    let half = (patch_size / 2) as i64;
    let center = img.center();
    let per_view = h.saturating_mul(DETECTIONS_PER_CLASS);

    let votes = (0..num_views as u64)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream_rng(seed, "classes", v);
            let d = range.sample(&mut rng).with_translation(center.0, center.1);
            let view = warp_image(img, &d, w, ht);
            let mut local: HashMap<(i64, i64), Vote> = HashMap::new();
            for k in detect_keypoints(&view, patch_size, per_view) {
                let (sx, sy) = d.map_backward((k.x, k.y), center);
                let (bx, by) = (sx.round() as i64, sy.round() as i64);
                if bx < half || by < half || bx >= w as i64 - half || by >= ht as i64 - half {
                    continue;
                }
                let e = local.entry((bx, by)).or_default();
                e.count += 1;
                e.response += k.response;
            }
            local
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                let e = a.entry(k).or_default();
                e.count += v.count;
                e.response += v.response;
            }
            a
        });

    let mut bins: Vec<((i64, i64), Vote)> = votes.into_iter().collect();
    bins.sort_by(|(pa, va), (pb, vb)| {
        vb.count
            .cmp(&va.count)
            .then(vb.response.total_cmp(&va.response))
            .then((pa.1, pa.0).cmp(&(pb.1, pb.0)))
    });

    let min_sep = (patch_size / 2) as f64;
    let mut chosen: Vec<Keypoint> = Vec::with_capacity(h);
    for ((x, y), vote) in bins {
        let k = Keypoint {
            x: x as f64,
            y: y as f64,
            response: vote.response / vote.count as f64,
        };
        if chosen.iter().all(|c| c.distance(&k) >= min_sep) {
            chosen.push(k);
            if chosen.len() == h {
                break;
            }
        }
    }
    if chosen.len() < h {
        return Err(KeypointError::InsufficientKeypoints {
            found: chosen.len(),
            requested: h,
        });
    }
    Ok(ClassSet {
        keypoints: chosen,
        patch_size,
    })
}
