//! Images, masks, probability maps and the synthetic datasets used to train
//! and evaluate the engine.
//!
//! Images are stored as 8-bit RGB so that a dataset written to disk as PNG
//! reads back bit-for-bit; `RasterImage::value` exposes intensities in `[0, 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

/// Clamp applied to every probability so that `ln p` stays finite.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    /// Row-major, interleaved RGB.
    data: Vec<u8>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Dimension(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                height * width * Self::CHANNELS
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from intensities in `[0, 1]`, quantized to 8 bits.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    data.push(quantize(f(r, c, ch)));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Intensity of channel `ch` at `(row, col)` in `[0, 1]`.
    #[inline]
    pub fn value(&self, row: usize, col: usize, ch: usize) -> f64 {
        f64::from(self.data[(row * self.width + col) * 3 + ch]) / 255.0
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Ratio of the principal standard deviations of the foreground pixel
    /// coordinates; 1 for a disk, large for thin structures.
    pub fn elongation(&self) -> f64 {
        let n = self.count() as f64;
        if n == 0.0 {
            return 1.0;
        }
        let (mut sr, mut sc) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
        let (mr, mc) = (sr / n, sc / n);
        let (mut vrr, mut vcc, mut vrc) = (0.0, 0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    let (dr, dc) = (r as f64 - mr, c as f64 - mc);
                    vrr += dr * dr;
                    vcc += dc * dc;
                    vrc += dr * dc;
                }
            }
        }
        // pixel extent contributes 1/12 variance per axis
        let (vrr, vcc, vrc) = (vrr / n + 1.0 / 12.0, vcc / n + 1.0 / 12.0, vrc / n);
        let tr = vrr + vcc;
        let disc = ((vrr - vcc).powi(2) + 4.0 * vrc * vrc).sqrt();
        let (hi, lo) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
        (hi / lo.max(1e-12)).sqrt()
    }
}

/// Per-pixel foreground confidence, always inside `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Clamps every value into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "probability buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::NonFinite("probability map value".into()));
            }
            *v = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, p: f64) -> Self {
        Self::new(height, width, vec![p; height * width]).expect("finite constant")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Foreground where `p > threshold`.
    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| u8::from(p > threshold)).collect(),
        }
    }

    /// Probability map of a mask: `1 - eps` on foreground, `eps` elsewhere.
    pub fn from_mask(mask: &Mask) -> Self {
        let data = mask
            .as_slice()
            .iter()
            .map(|&v| if v == 1 { 1.0 - PROB_EPS } else { PROB_EPS })
            .collect();
        Self {
            height: mask.height,
            width: mask.width,
            data,
        }
    }
}

/// Intersection over union. Two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "iou of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// Smooth color fills with mild noise.
    Source,
    /// Source geometry with inverted, channel-permuted colors and stronger texture.
    Shifted,
    /// Thin structures on a textured background.
    Changed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Ellipse or convex polygon, chosen per sample.
    Blob,
    Ellipse,
    Polygon,
    /// Thin bar or thick curve, chosen per sample.
    Thin,
    Bar,
    Curve,
    /// One axis-aligned ellipse at a fixed position (pixel centers on integer
    /// coordinates).
    FixedEllipse {
        center_row: f64,
        center_col: f64,
        semi_rows: f64,
        semi_cols: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub family: ShapeFamily,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Amplitude of the sinusoidal background texture.
    pub texture: f64,
    /// Minimum mean absolute color difference between object and background.
    pub min_contrast: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn source(seed: u64) -> Self {
        Self {
            kind: DomainKind::Source,
            family: ShapeFamily::Blob,
            height: 64,
            width: 64,
            noise: 0.03,
            texture: 0.0,
            min_contrast: 0.25,
            seed,
        }
    }

    pub fn shifted(seed: u64) -> Self {
        Self {
            kind: DomainKind::Shifted,
            noise: 0.06,
            texture: 0.12,
            ..Self::source(seed)
        }
    }

    pub fn changed(seed: u64) -> Self {
        Self {
            kind: DomainKind::Changed,
            family: ShapeFamily::Thin,
            noise: 0.05,
            texture: 0.15,
            min_contrast: 0.2,
            ..Self::source(seed)
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::DegenerateSpec(format!(
                "image size {}x{} below {MIN_SIDE}",
                self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0 && self.min_contrast >= 0.0) {
            return Err(Error::DegenerateSpec(
                "noise, texture and contrast must be nonnegative".into(),
            ));
        }
        if self.min_contrast > 0.8 {
            return Err(Error::DegenerateSpec(format!(
                "contrast {} is unattainable",
                self.min_contrast
            )));
        }
        if let ShapeFamily::FixedEllipse {
            semi_rows,
            semi_cols,
            ..
        } = self.family
        {
            if !(semi_rows > 0.0 && semi_cols > 0.0) {
                return Err(Error::DegenerateSpec("ellipse with zero area".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub image: RasterImage,
    pub mask: Mask,
}

/// Foreground fraction accepted for generated masks.
const FG_RANGE: (f64, f64) = (0.05, 0.60);
const MAX_ATTEMPTS: usize = 200;

/// Generates `count` samples. Sample `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &DomainSpec, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let mask = generate_mask(spec, &mut rng)?;
            let image = paint(spec, &mask, &mut rng)?;
            Ok(Sample {
                name: format!("{i:04}"),
                image,
                mask,
            })
        })
        .collect()
}

fn generate_mask(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Mask> {
    let (h, w) = (spec.height, spec.width);
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mask = match spec.family {
            ShapeFamily::FixedEllipse {
                center_row,
                center_col,
                semi_rows,
                semi_cols,
            } => ellipse_mask(h, w, center_row, center_col, semi_rows, semi_cols, 0.0),
            ShapeFamily::Blob => {
                if rng.random_bool(0.5) {
                    random_ellipse(h, w, rng)
                } else {
                    random_polygon(h, w, rng)
                }
            }
            ShapeFamily::Ellipse => random_ellipse(h, w, rng),
            ShapeFamily::Polygon => random_polygon(h, w, rng),
            ShapeFamily::Thin => {
                if rng.random_bool(0.5) {
                    random_bar(h, w, rng)
                } else {
                    random_curve(h, w, rng)
                }
            }
            ShapeFamily::Bar => random_bar(h, w, rng),
            ShapeFamily::Curve => random_curve(h, w, rng),
        };
        let n = mask.count();
        if n == 0 {
            if matches!(spec.family, ShapeFamily::FixedEllipse { .. }) {
                return Err(Error::DegenerateSpec("ellipse covers no pixel".into()));
            }
            continue;
        }
        let frac = n as f64 / total;
        if matches!(spec.family, ShapeFamily::FixedEllipse { .. })
            || (FG_RANGE.0..=FG_RANGE.1).contains(&frac)
        {
            return Ok(mask);
        }
    }
    Err(Error::DegenerateSpec(format!(
        "no shape within the foreground range after {MAX_ATTEMPTS} attempts"
    )))
}

/// Pixels `(r, c)` with `((r-cr)/a)^2 + ((c-cc)/b)^2 <= 1` after rotating by `angle`.
pub fn ellipse_mask(
    h: usize,
    w: usize,
    cr: f64,
    cc: f64,
    semi_rows: f64,
    semi_cols: f64,
    angle: f64,
) -> Mask {
    let (s, co) = angle.sin_cos();
    Mask::from_fn(h, w, |r, c| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        (u / semi_rows).powi(2) + (v / semi_cols).powi(2) <= 1.0
    })
}

fn scale(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 64.0
}

fn random_ellipse(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = scale(h, w);
    let a = rng.random_range(9.0..20.0) * s;
    let b = (a / rng.random_range(1.0..2.2)).max(6.0 * s);
    let margin = a.max(b) * 0.6;
    let cr = rng.random_range(margin..(h as f64 - margin));
    let cc = rng.random_range(margin..(w as f64 - margin));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    ellipse_mask(h, w, cr, cc, a, b, angle)
}

fn random_polygon(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = scale(h, w);
    let radius = rng.random_range(10.0..21.0) * s;
    let cr = rng.random_range(radius * 0.7..(h as f64 - radius * 0.7));
    let cc = rng.random_range(radius * 0.7..(w as f64 - radius * 0.7));
    let n = rng.random_range(5..8);
    let mut angles: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&t| {
            let rad = radius * rng.random_range(0.75..1.0);
            (cr + rad * t.sin(), cc + rad * t.cos())
        })
        .collect();
    // vertices sorted by angle form a star-shaped polygon around the center;
    // a pixel is inside when it lies in one of the fan triangles
    Mask::from_fn(h, w, |r, c| {
        let p = (r as f64, c as f64);
        (0..verts.len()).any(|i| {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            in_triangle(p, (cr, cc), a, b)
        })
    })
}

fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| {
        (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0)
    };
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn random_bar(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = scale(h, w);
    let length = rng.random_range(34.0..56.0) * s;
    let half_w = rng.random_range(4.0..6.5) * s;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sn, co) = angle.sin_cos();
    let reach_r = (length / 2.0 * sn).abs() + half_w;
    let reach_c = (length / 2.0 * co).abs() + half_w;
    let cr = centered_range(rng, reach_r, h as f64);
    let cc = centered_range(rng, reach_c, w as f64);
    Mask::from_fn(h, w, |r, c| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        let along = dr * sn + dc * co;
        let across = -dr * co + dc * sn;
        along.abs() <= length / 2.0 && across.abs() <= half_w
    })
}

/// Uniform position keeping `reach` pixels from both ends, or the midpoint when
/// the extent does not fit.
fn centered_range(rng: &mut ChaCha8Rng, reach: f64, extent: f64) -> f64 {
    if extent - reach > reach {
        rng.random_range(reach..extent - reach)
    } else {
        extent / 2.0
    }
}

fn random_curve(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = scale(h, w);
    let half_w = rng.random_range(3.5..5.5) * s;
    let m = 6.0 * s;
    let mut pt = || {
        (
            rng.random_range(m..h as f64 - m),
            rng.random_range(m..w as f64 - m),
        )
    };
    let (p0, p1, p2) = (pt(), pt(), pt());
    let samples: Vec<(f64, f64)> = (0..=40)
        .map(|k| {
            let t = k as f64 / 40.0;
            let u = 1.0 - t;
            (
                u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
            )
        })
        .collect();
    Mask::from_fn(h, w, |r, c| {
        let p = (r as f64, c as f64);
        samples
            .windows(2)
            .any(|seg| segment_distance(p, seg[0], seg[1]) <= half_w)
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn contrast(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn paint(spec: &DomainSpec, mask: &Mask, rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let (h, w) = (spec.height, spec.width);
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    let mut tries = 0;
    while contrast(&fg, &bg) < spec.min_contrast {
        fg = random_color(rng);
        tries += 1;
        if tries > 1000 {
            return Err(Error::DegenerateSpec("cannot reach requested contrast".into()));
        }
    }
    let grad_r = rng.random_range(-0.1..0.1);
    let grad_c = rng.random_range(-0.1..0.1);
    let freq_r = rng.random_range(0.15..0.6);
    let freq_c = rng.random_range(0.15..0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let fg_texture = match spec.kind {
        DomainKind::Changed => spec.texture * 0.3,
        _ => spec.texture * 0.5,
    };

    let mut pixels = vec![[0.0f64; 3]; h * w];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64 - 0.5, c as f64 / w as f64 - 0.5);
            let wave = (freq_r * r as f64 + freq_c * c as f64 + phase).sin()
                * (0.7 * freq_c * r as f64 - 0.9 * freq_r * c as f64).cos();
            let inside = mask.get(r, c);
            let (base, tex) = if inside { (&fg, fg_texture) } else { (&bg, spec.texture) };
            let px = &mut pixels[r * w + c];
            for ch in 0..3 {
                let shade = if inside { 0.0 } else { grad_r * y + grad_c * x };
                px[ch] = base[ch] + shade + tex * wave + spec.noise * gaussian(rng);
            }
        }
    }
    if spec.kind == DomainKind::Shifted {
        for px in &mut pixels {
            let inv = [1.0 - px[0], 1.0 - px[1], 1.0 - px[2]];
            *px = [inv[1], inv[2], inv[0]];
        }
    }
    RasterImage::from_fn(h, w, |r, c, ch| pixels[r * w + c][ch])
}

pub fn encode_image_png(image: &RasterImage) -> Result<Vec<u8>> {
    encode_png(
        image.width,
        image.height,
        png::ColorType::Rgb,
        &image.data,
    )
}

/// Foreground is written as 255.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> std::result::Result<DecodedPng, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit samples, found {:?}", info.bit_depth));
    }
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

/// Decodes an 8-bit PNG into an RGB image. Gray and alpha inputs are accepted
/// and converted.
pub fn decode_image_png(bytes: &[u8]) -> Result<RasterImage> {
    let png = decode_png(bytes).map_err(Error::InvalidArgument)?;
    let data = match png.color {
        png::ColorType::Rgb => png.data,
        png::ColorType::Rgba => png
            .data
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        png::ColorType::Grayscale => png.data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => png
            .data
            .chunks_exact(2)
            .flat_map(|px| [px[0], px[0], px[0]])
            .collect(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported png color type {other:?}"
            )))
        }
    };
    RasterImage::new(png.height, png.width, data)
}

/// Decodes a single-channel mask PNG whose values are exactly 0 or 255.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let png = decode_png(bytes).map_err(Error::InvalidArgument)?;
    if png.color != png::ColorType::Grayscale {
        return Err(Error::InvalidArgument(format!(
            "mask must be single-channel, found {:?}",
            png.color
        )));
    }
    let mut data = Vec::with_capacity(png.data.len());
    for &v in &png.data {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "mask value {other} is neither 0 nor 255"
                )))
            }
        }
    }
    Mask::new(png.height, png.width, data)
}

/// Writes `<root>/images/<name>.png` and `<root>/masks/<name>.png`.
pub fn save_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in samples {
        fs::write(images.join(format!("{}.png", s.name)), encode_image_png(&s.image)?)?;
        fs::write(masks.join(format!("{}.png", s.name)), encode_mask_png(&s.mask)?)?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Dataset {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads a dataset, ordered by file stem.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    if let Some((stem, path)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(Error::Dataset {
            path: path.clone(),
            reason: format!("mask `{stem}` has no matching image"),
        });
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = masks.get(&stem).ok_or_else(|| Error::Dataset {
            path: image_path.clone(),
            reason: format!("image `{stem}` has no matching mask"),
        })?;
        let wrap = |path: &Path| {
            let p = path.to_path_buf();
            move |e: Error| Error::Dataset {
                path: p,
                reason: e.to_string(),
            }
        };
        let image = decode_image_png(&fs::read(&image_path)?).map_err(wrap(&image_path))?;
        let mask = decode_mask_png(&fs::read(mask_path)?).map_err(wrap(mask_path))?;
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Dataset {
                path: mask_path.clone(),
                reason: format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.height(),
                    mask.width(),
                    image.height(),
                    image.width()
                ),
            });
        }
        out.push(Sample {
            name: stem,
            image,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            reason: "no images found".into(),
        });
    }
    Ok(out)
}
