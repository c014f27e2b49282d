#![allow(dead_code)]

use ferns::image::box_smooth;
use ferns::rng::stream_rng;
use ferns::GrayImage;
use rand::Rng;

/// Deterministic textured test scene: random rectangles and ellipses of random
/// gray levels over a shallow gradient, lightly smoothed.
pub fn scene(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = stream_rng(seed, "scene", 0);
    let mut img = GrayImage::from_fn(width, height, |x, y| (60 + (x * 80) / width + (y * 40) / height) as u8);
    let shapes = width * height / 500;
    for _ in 0..shapes {
        let cx = rng.gen_range(0..width) as f64;
        let cy = rng.gen_range(0..height) as f64;
        let rx = rng.gen_range(2.0..14.0);
        let ry = rng.gen_range(2.0..14.0);
        let value: u8 = rng.gen();
        let ellipse = rng.gen_bool(0.5);
        let x0 = (cx - rx).max(0.0) as usize;
        let x1 = ((cx + rx) as usize).min(width - 1);
        let y0 = (cy - ry).max(0.0) as usize;
        let y1 = ((cy + ry) as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if !ellipse || dx * dx + dy * dy <= 1.0 {
                    img.set(x, y, value);
                }
            }
        }
    }
    box_smooth(&img, 1)
}

/// Random patch of the given size.
pub fn random_patch(size: usize, seed: u64, index: u64) -> GrayImage {
    let mut rng = stream_rng(seed, "patch", index);
    GrayImage::from_fn(size, size, |_, _| rng.gen())
}
