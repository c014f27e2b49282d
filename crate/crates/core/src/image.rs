//! Grayscale images, binary PGM I/O, affine view synthesis, smoothing and noise.

use std::f64::consts::TAU;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Fill value for warped samples that fall outside the source image.
pub const BACKGROUND: u8 = 127;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("PGM parse error: {0}")]
    Parse(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid image dimensions {width}x{height} for {len} bytes")]
    InvalidDimensions { width: usize, height: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Owned 8-bit grayscale image, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImageError::InvalidDimensions {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    /// Constant image. Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("non-empty image")
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel. Panics on a zero dimension.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("non-empty image")
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with signed coordinates; `None` outside the image.
    #[inline]
    pub fn get_checked(&self, x: i64, y: i64) -> Option<u8> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    /// Returns `None` if the window leaves the image.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> Option<GrayImage> {
        if w == 0 || h == 0 || x0 < 0 || y0 < 0 {
            return None;
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        if x0 + w > self.width || y0 + h > self.height {
            return None;
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        Some(GrayImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Applies an intensity transfer function to every pixel.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Geometric center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Parse("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, ImageError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| ImageError::Parse(format!("invalid {what}")))
}

/// Decodes a binary (`P5`) PGM with maxval at most 255.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::Parse("missing PNM magic".into()));
    }
    match bytes[1] {
        b'5' => {}
        b'1'..=b'7' => {
            return Err(ImageError::UnsupportedFormat(format!(
                "P{} (only binary P5 graymaps are supported)",
                bytes[1] as char
            )))
        }
        _ => return Err(ImageError::Parse("bad PNM magic".into())),
    }
    let mut pos = 2;
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace() && *b != b'#') {
        return Err(ImageError::Parse("bad PNM magic".into()));
    }
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Parse(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 {
        return Err(ImageError::Parse("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(ImageError::UnsupportedFormat(format!(
            "maxval {maxval} (16-bit rasters not supported)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::Parse("missing raster separator".into())),
    }
    let len = width
        .checked_mul(height)
        .ok_or_else(|| ImageError::Parse("dimensions overflow".into()))?;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| ImageError::Parse(format!("truncated raster: expected {len} bytes")))?;
    GrayImage::new(width, height, raster.to_vec())
}

/// Encodes as binary PGM with maxval 255.
pub fn write_pgm(image: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.data);
    out
}

pub type Mat2 = [[f64; 2]; 2];

fn rotation(a: f64) -> Mat2 {
    let (s, c) = a.sin_cos();
    [[c, -s], [s, c]]
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn determinant(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Affine viewpoint change: rotation by `theta` composed with anisotropic
/// scaling (`lambda1`, `lambda2`) along axes rotated by `phi`.
///
/// `(tx, ty)` is the source point that lands on the output center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDeform {
    pub theta: f64,
    pub phi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineDeform {
    pub fn new(theta: f64, phi: f64, lambda1: f64, lambda2: f64, tx: f64, ty: f64) -> Result<Self, ImageError> {
        if !(lambda1 > 0.0 && lambda2 > 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(ImageError::InvalidArgument(format!(
                "scales must be positive, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self {
            theta,
            phi,
            lambda1,
            lambda2,
            tx,
            ty,
        })
    }

    /// No rotation or scaling, centered on `(tx, ty)`.
    pub fn identity(tx: f64, ty: f64) -> Self {
        Self {
            theta: 0.0,
            phi: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            tx,
            ty,
        }
    }

    pub fn with_translation(mut self, tx: f64, ty: f64) -> Self {
        self.tx = tx;
        self.ty = ty;
        self
    }

    pub fn matrix(&self) -> Mat2 {
        deform_matrix(self)
    }

    /// `R(-theta) R(-(phi - theta)) diag(1/l1, 1/l2) R(phi - theta)` is the inverse
    /// of `R(theta) R(-phi) diag(l1, l2) R(phi)`, so the inverse stays in the same
    /// family. `out_center` is the center of the image this deform produces;
    /// `src_center` the center of the image the inverse should produce.
    pub fn inverse(&self, src_center: (f64, f64), out_center: (f64, f64)) -> AffineDeform {
        let m = self.matrix();
        let dx = src_center.0 - self.tx;
        let dy = src_center.1 - self.ty;
        AffineDeform {
            theta: -self.theta,
            phi: self.phi - self.theta,
            lambda1: 1.0 / self.lambda1,
            lambda2: 1.0 / self.lambda2,
            tx: out_center.0 + m[0][0] * dx + m[0][1] * dy,
            ty: out_center.1 + m[1][0] * dx + m[1][1] * dy,
        }
    }

    /// Position in the warped image (centered at `out_center`) of source point `p`.
    pub fn map_forward(&self, p: (f64, f64), out_center: (f64, f64)) -> (f64, f64) {
        let m = self.matrix();
        let (dx, dy) = (p.0 - self.tx, p.1 - self.ty);
        (
            out_center.0 + m[0][0] * dx + m[0][1] * dy,
            out_center.1 + m[1][0] * dx + m[1][1] * dy,
        )
    }

    /// Source position of warped-image point `q`.
    pub fn map_backward(&self, q: (f64, f64), out_center: (f64, f64)) -> (f64, f64) {
        let inv = invert(&self.matrix());
        let (dx, dy) = (q.0 - out_center.0, q.1 - out_center.1);
        (
            self.tx + inv[0][0] * dx + inv[0][1] * dy,
            self.ty + inv[1][0] * dx + inv[1][1] * dy,
        )
    }
}

fn invert(m: &Mat2) -> Mat2 {
    let det = determinant(m);
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// `R(theta) · R(-phi) · diag(lambda1, lambda2) · R(phi)`.
pub fn deform_matrix(d: &AffineDeform) -> Mat2 {
    let scale = [[d.lambda1, 0.0], [0.0, d.lambda2]];
    let m = mat_mul(&rotation(d.theta), &rotation(-d.phi));
    let m = mat_mul(&m, &scale);
    mat_mul(&m, &rotation(d.phi))
}

#[inline]
fn bilinear(src: &GrayImage, x: f64, y: f64) -> u8 {
    let max_x = (src.width - 1) as f64;
    let max_y = (src.height - 1) as f64;
    if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
        return BACKGROUND;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(src.width - 1);
    let y1 = (y0 + 1).min(src.height - 1);
    let p00 = src.get(x0, y0) as f64;
    let p10 = src.get(x1, y0) as f64;
    let p01 = src.get(x0, y1) as f64;
    let p11 = src.get(x1, y1) as f64;
    let top = p00 + fx * (p10 - p00);
    let bottom = p01 + fx * (p11 - p01);
    let v = top + fy * (bottom - top);
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders `src` under deform `d` into an `out_w`×`out_h` image by inverse
/// mapping every output pixel and sampling bilinearly.
pub fn warp_image(src: &GrayImage, d: &AffineDeform, out_w: usize, out_h: usize) -> GrayImage {
    assert!(out_w >= 1 && out_h >= 1, "output must be non-empty");
    let inv = invert(&deform_matrix(d));
    let cx = (out_w as f64 - 1.0) / 2.0;
    let cy = (out_h as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(out_w * out_h);
    for py in 0..out_h {
        let qy = py as f64 - cy;
        for px in 0..out_w {
            let qx = px as f64 - cx;
            let sx = d.tx + inv[0][0] * qx + inv[0][1] * qy;
            let sy = d.ty + inv[1][0] * qx + inv[1][1] * qy;
            data.push(bilinear(src, sx, sy));
        }
    }
    GrayImage {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Sampling ranges for random deformations. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformRange {
    pub theta: (f64, f64),
    pub phi: (f64, f64),
    pub lambda: (f64, f64),
}

impl Default for DeformRange {
    fn default() -> Self {
        Self {
            theta: (0.0, TAU),
            phi: (0.0, TAU),
            lambda: (0.6, 1.5),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl DeformRange {
    /// Degenerate range that always yields the identity deform.
    pub fn identity() -> Self {
        Self {
            theta: (0.0, 0.0),
            phi: (0.0, 0.0),
            lambda: (1.0, 1.0),
        }
    }

    /// Draws θ, φ, λ1, λ2 independently and uniformly; translation is left at zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineDeform {
        let theta = uniform(rng, self.theta);
        let phi = uniform(rng, self.phi);
        let lambda1 = uniform(rng, self.lambda);
        let lambda2 = uniform(rng, self.lambda);
        AffineDeform {
            theta,
            phi,
            lambda1,
            lambda2,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

/// Random deform with θ, φ in [0, 2π) and λ1, λ2 in [0.6, 1.5].
pub fn sample_deformation<R: Rng + ?Sized>(rng: &mut R) -> AffineDeform {
    DeformRange::default().sample(rng)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`, rounding and clamping.
pub fn add_noise<R: Rng + ?Sized>(img: &GrayImage, sigma: f64, rng: &mut R) -> Result<GrayImage, ImageError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ImageError::InvalidArgument(format!(
            "noise sigma must be a finite non-negative value, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(img.map_with_rng(
        |v, rng| (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8,
        rng,
    ))
}

impl GrayImage {
    fn map_with_rng<R: Rng + ?Sized>(&self, f: impl Fn(u8, &mut R) -> u8, rng: &mut R) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v, rng)).collect(),
        }
    }
}

/// Rounded mean over the `(2r+1)²` window, clipped at the borders.
pub fn box_smooth(img: &GrayImage, radius: usize) -> GrayImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    // integral image with a zero row/column in front
    let iw = w + 1;
    let mut integral = vec![0u64; iw * (h + 1)];
    for y in 0..h {
        let mut row_sum = 0u64;
        for x in 0..w {
            row_sum += img.get(x, y) as u64;
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row_sum;
        }
    }
    GrayImage::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius + 1).min(w);
        let y1 = (y + radius + 1).min(h);
        let sum = integral[y1 * iw + x1] + integral[y0 * iw + x0] - integral[y0 * iw + x1] - integral[y1 * iw + x0];
        let count = ((x1 - x0) * (y1 - y0)) as u64;
        ((sum + count / 2) / count) as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use std::f64::consts::PI;

    fn approx(a: &Mat2, b: &Mat2) -> bool {
        (0..2).all(|i| (0..2).all(|j| (a[i][j] - b[i][j]).abs() < 1e-12))
    }

    #[test]
    fn pgm_minimal_and_row_major() {
        let img = GrayImage::filled(1, 1, 0);
        assert_eq!(write_pgm(&img), b"P5\n1 1\n255\n\0".to_vec());

        let img = GrayImage::new(3, 2, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let bytes = write_pgm(&img);
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn pgm_read_direct_bytes() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let img = read_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.data(), &[7, 200]);
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert_eq!(read_pgm(&bytes).unwrap().data(), &[1, 2]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(
            read_pgm(b"P6\n1 1\n255\n\0\0\0"),
            Err(ImageError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(ImageError::UnsupportedFormat(_))
        ));
        assert!(matches!(read_pgm(b"XY\n1 1\n255\n\0"), Err(ImageError::Parse(_))));
        assert!(matches!(read_pgm(b"P5\n2 2\n255\n\0\0"), Err(ImageError::Parse(_))));
        assert!(matches!(read_pgm(b"P5\n2\n"), Err(ImageError::Parse(_))));
        assert!(matches!(read_pgm(b"P5\nx 2\n255\n"), Err(ImageError::Parse(_))));
    }

    #[test]
    fn pgm_large_round_trip() {
        use rand::RngCore;
        let mut rng = stream_rng(9, "pgm", 0);
        let mut raster = vec![0u8; 640 * 480];
        rng.fill_bytes(&mut raster);
        let mut bytes = b"P5\n640 480\n255\n".to_vec();
        bytes.extend_from_slice(&raster);
        let img = read_pgm(&bytes).unwrap();
        assert_eq!(img.data().len(), 307_200);
        assert_eq!(write_pgm(&img), bytes);
    }

    #[test]
    fn deform_matrix_cases() {
        let id = AffineDeform::identity(0.0, 0.0);
        assert!(approx(&deform_matrix(&id), &[[1.0, 0.0], [0.0, 1.0]]));

        let rot = AffineDeform::new(PI / 2.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(approx(&deform_matrix(&rot), &[[0.0, -1.0], [1.0, 0.0]]));

        let scale = AffineDeform::new(0.0, 0.0, 2.0, 0.5, 0.0, 0.0).unwrap();
        assert!(approx(&deform_matrix(&scale), &[[2.0, 0.0], [0.0, 0.5]]));
    }

    #[test]
    fn deform_rejects_non_positive_scale() {
        assert!(AffineDeform::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(AffineDeform::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn inverse_deform_composes_to_identity() {
        let mut rng = stream_rng(3, "inv", 0);
        for _ in 0..100 {
            let d = sample_deformation(&mut rng).with_translation(40.0, 30.0);
            let inv = d.inverse((40.0, 30.0), (50.0, 50.0));
            let m = mat_mul(&inv.matrix(), &d.matrix());
            assert!(approx(&m, &[[1.0, 0.0], [0.0, 1.0]]), "{m:?}");
            let p = (12.5, 33.0);
            let q = d.map_forward(p, (50.0, 50.0));
            let back = inv.map_forward(q, (40.0, 30.0));
            assert!((back.0 - p.0).abs() < 1e-9 && (back.1 - p.1).abs() < 1e-9);
            let b2 = d.map_backward(q, (50.0, 50.0));
            assert!((b2.0 - p.0).abs() < 1e-9 && (b2.1 - p.1).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = stream_rng(1, "img", 0);
        let img = GrayImage::from_fn(37, 24, |_, _| rng.gen());
        let (cx, cy) = img.center();
        let out = warp_image(&img, &AffineDeform::identity(cx, cy), 37, 24);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_warp() {
        let img = GrayImage::filled(40, 30, 100);
        let mut rng = stream_rng(2, "warp", 0);
        let d = sample_deformation(&mut rng).with_translation(19.5, 14.5);
        let out = warp_image(&img, &d, 60, 60);
        let mut inside = 0;
        for y in 0..60 {
            for x in 0..60 {
                let (sx, sy) = d.map_backward((x as f64, y as f64), (29.5, 29.5));
                let v = out.get(x, y);
                if sx >= 0.0 && sy >= 0.0 && sx <= 39.0 && sy <= 29.0 {
                    assert_eq!(v, 100);
                    inside += 1;
                } else {
                    assert_eq!(v, BACKGROUND);
                }
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn sampling_ranges_and_mean() {
        let mut rng = stream_rng(42, "deform", 0);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let d = sample_deformation(&mut rng);
            assert!((0.0..TAU).contains(&d.theta) && (0.0..TAU).contains(&d.phi));
            assert!((0.6..=1.5).contains(&d.lambda1) && (0.6..=1.5).contains(&d.lambda2));
            let det = determinant(&d.matrix());
            assert!((det - d.lambda1 * d.lambda2).abs() < 1e-9);
            sum += d.lambda1;
        }
        let mean = sum / n as f64;
        assert!((mean - 1.05).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_deformation(&mut stream_rng(42, "deform", 0));
        let b = sample_deformation(&mut stream_rng(42, "deform", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_cases() {
        let img = GrayImage::filled(400, 250, 128);
        let mut rng = stream_rng(5, "noise", 0);
        assert_eq!(add_noise(&img, 0.0, &mut rng).unwrap(), img);
        assert!(matches!(
            add_noise(&img, -1.0, &mut rng),
            Err(ImageError::InvalidArgument(_))
        ));

        let noisy = add_noise(&img, 10.0, &mut rng).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = noisy.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((9.5..=10.5).contains(&std), "std {std}");

        // clamping at zero: every value is a valid u8 by construction, and the
        // negative half of the distribution collapses onto 0
        let dark = add_noise(&GrayImage::filled(100, 100, 0), 10.0, &mut rng).unwrap();
        let zeros = dark.data().iter().filter(|&&v| v == 0).count();
        assert!(zeros > 4000);
    }

    #[test]
    fn box_smooth_cases() {
        let mut rng = stream_rng(6, "smooth", 0);
        let img = GrayImage::from_fn(13, 9, |_, _| rng.gen());
        assert_eq!(box_smooth(&img, 0), img);

        let c = GrayImage::filled(10, 7, 77);
        for r in 1..5 {
            assert_eq!(box_smooth(&c, r), c);
        }

        let dot = GrayImage::new(3, 3, vec![0, 0, 0, 0, 9, 0, 0, 0, 0]).unwrap();
        let s = box_smooth(&dot, 1);
        assert_eq!(s.get(1, 1), 1);
        // corner window is clipped to 2x2: 9/4 rounds to 2
        assert_eq!(s.get(0, 0), 2);
    }

    #[test]
    fn crop_bounds() {
        let img = GrayImage::from_fn(5, 4, |x, y| (y * 5 + x) as u8);
        let c = img.crop(1, 1, 3, 2).unwrap();
        assert_eq!(c.data(), &[6, 7, 8, 11, 12, 13]);
        assert!(img.crop(3, 0, 3, 1).is_none());
        assert!(img.crop(-1, 0, 1, 1).is_none());
    }
}
