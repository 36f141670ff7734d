//! Weak and strong view generation.
//!
//! The weak pipeline applies, each with its own coin flip, a small rotation
//! with reflection padding, a vertical flip and a horizontal flip. The strong
//! pipeline runs the weak one and then, again per coin flip, a Gaussian blur
//! and a pixel jitter: brightness/contrast/saturation on three-channel input,
//! brightness/contrast only on single-channel input. No view ever crops,
//! erases or resizes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of each individual transform.
    pub probability: f64,
    /// Rotation angle is uniform in `±rotation_degrees`.
    pub rotation_degrees: f64,
    pub blur_sigma: [f64; 2],
    pub jitter: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { probability: 0.5, rotation_degrees: 15.0, blur_sigma: [0.1, 1.0], jitter: [0.8, 1.2] }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::validation("augment.probability", format!("{} not in [0, 1]", self.probability)));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return Err(Error::validation("augment.rotation_degrees", format!("{} not in [0, 180]", self.rotation_degrees)));
        }
        let [lo, hi] = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::validation("augment.blur_sigma", format!("[{lo}, {hi}] is not a positive range")));
        }
        let [lo, hi] = self.jitter;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::validation("augment.jitter", format!("[{lo}, {hi}] is not a positive range")));
        }
        Ok(())
    }
}

/// Randomness consumed by the augmentation pipelines.
pub trait AugmentRng {
    /// Returns true with probability `p`.
    fn chance(&mut self, p: f64) -> bool;
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;
}

impl<R: Rng> AugmentRng for R {
    fn chance(&mut self, p: f64) -> bool {
        self.random::<f64>() < p
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.random_range(lo..hi)
        } else {
            lo
        }
    }
}

/// Deterministic stand-in for a random source: coin flips are answered from
/// a cyclic script and every uniform draw returns the lower bound plus
/// `fraction` of the range.
#[derive(Debug, Clone)]
pub struct Scripted {
    coins: Vec<bool>,
    next: usize,
    pub fraction: f64,
}

impl Scripted {
    pub fn new(coins: Vec<bool>, fraction: f64) -> Self {
        Self { coins, next: 0, fraction }
    }

    pub fn always(hit: bool) -> Self {
        Self::new(vec![hit], 0.5)
    }
}

impl AugmentRng for Scripted {
    fn chance(&mut self, _p: f64) -> bool {
        if self.coins.is_empty() {
            return false;
        }
        let c = self.coins[self.next % self.coins.len()];
        self.next += 1;
        c
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.fraction
    }
}

/// A transform that was actually applied, in application order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Applied {
    Rotate(f64),
    VerticalFlip,
    HorizontalFlip,
    Blur(f64),
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriplet {
    pub weak: Image,
    pub strong_a: Image,
    pub strong_b: Image,
    pub source_index: usize,
}

fn check_input(image: &Image) -> Result<()> {
    if image.channels != 1 && image.channels != 3 {
        return Err(Error::validation("image", format!("{} channels; expected 1 or 3", image.channels)));
    }
    if image.height == 0 || image.width == 0 {
        return Err(Error::validation("image", "empty spatial extent"));
    }
    Ok(())
}

pub fn weak_view(image: &Image, cfg: &AugmentConfig, rng: &mut impl AugmentRng) -> Result<Image> {
    weak_view_traced(image, cfg, rng).map(|(img, _)| img)
}

pub fn weak_view_traced(image: &Image, cfg: &AugmentConfig, rng: &mut impl AugmentRng) -> Result<(Image, Vec<Applied>)> {
    check_input(image)?;
    let mut out = image.clone();
    let mut trace = Vec::new();
    let p = cfg.probability;
    if rng.chance(p) {
        let deg = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees);
        out = rotate(&out, deg.to_radians());
        trace.push(Applied::Rotate(deg));
    }
    if rng.chance(p) {
        out = flip_vertical(&out);
        trace.push(Applied::VerticalFlip);
    }
    if rng.chance(p) {
        out = flip_horizontal(&out);
        trace.push(Applied::HorizontalFlip);
    }
    Ok((out, trace))
}

pub fn strong_view(image: &Image, cfg: &AugmentConfig, rng: &mut impl AugmentRng) -> Result<Image> {
    strong_view_traced(image, cfg, rng).map(|(img, _)| img)
}

pub fn strong_view_traced(image: &Image, cfg: &AugmentConfig, rng: &mut impl AugmentRng) -> Result<(Image, Vec<Applied>)> {
    let (mut out, mut trace) = weak_view_traced(image, cfg, rng)?;
    let p = cfg.probability;
    if rng.chance(p) {
        let sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
        trace.push(Applied::Blur(sigma));
    }
    if rng.chance(p) {
        let [lo, hi] = cfg.jitter;
        let b = rng.uniform(lo, hi);
        adjust_brightness(&mut out, b);
        trace.push(Applied::Brightness(b));
        let c = rng.uniform(lo, hi);
        adjust_contrast(&mut out, c);
        trace.push(Applied::Contrast(c));
        if out.channels == 3 {
            let s = rng.uniform(lo, hi);
            adjust_saturation(&mut out, s);
            trace.push(Applied::Saturation(s));
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((out, trace))
}

pub fn make_triplet(index: usize, image: &Image, cfg: &AugmentConfig, rng: &mut impl AugmentRng) -> Result<ViewTriplet> {
    let weak = weak_view(image, cfg, rng)?;
    let strong_a = strong_view(image, cfg, rng)?;
    let strong_b = strong_view(image, cfg, rng)?;
    Ok(ViewTriplet { weak, strong_a, strong_b, source_index: index })
}

/// Maps a continuous coordinate into `[0, len-1]` by mirroring at the edges.
fn reflect(u: f64, len: usize) -> f64 {
    if len == 1 {
        return 0.0;
    }
    let max = (len - 1) as f64;
    let period = 2.0 * max;
    let mut r = u.rem_euclid(period);
    if r > max {
        r = period - r;
    }
    r
}

fn bilinear(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
    let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image centre with reflection padding.
pub fn rotate(img: &Image, radians: f64) -> Image {
    let mut out = Image::zeros(img.channels, img.height, img.width);
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse map output pixel to source
            let sx = reflect(cos * dx + sin * dy + cx, img.width);
            let sy = reflect(-sin * dx + cos * dy + cy, img.height);
            for c in 0..img.channels {
                *out.at_mut(c, y, x) = bilinear(img, c, sy, sx);
            }
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, img.height - 1 - y, x);
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                *out.at_mut(c, y, x) = img.at(c, y, img.width - 1 - x);
            }
        }
    }
    out
}

/// Separable Gaussian blur; kernel radius `ceil(2σ)`, reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let idx = |i: isize, len: usize| reflect(i as f64, len) as usize;
    let mut tmp = Image::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * img.at(c, y, idx(x as isize + k as isize - radius, img.width));
                }
                *tmp.at_mut(c, y, x) = acc;
            }
        }
    }
    let mut out = Image::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * tmp.at(c, idx(y as isize + k as isize - radius, img.height), x);
                }
                *out.at_mut(c, y, x) = acc;
            }
        }
    }
    out
}

fn luma(img: &Image, i: usize) -> f64 {
    if img.channels == 3 {
        let n = img.height * img.width;
        0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i]
    } else {
        img.data[i]
    }
}

fn clamp_all(img: &mut Image) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    for v in &mut img.data {
        *v *= factor;
    }
    clamp_all(img);
}

pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = img.height * img.width;
    let mean = (0..n).map(|i| luma(img, i)).sum::<f64>() / n as f64;
    for v in &mut img.data {
        *v = (*v - mean) * factor + mean;
    }
    clamp_all(img);
}

pub fn adjust_saturation(img: &mut Image, factor: f64) {
    let n = img.height * img.width;
    let gray: Vec<f64> = (0..n).map(|i| luma(img, i)).collect();
    for c in 0..img.channels {
        for (i, g) in gray.iter().enumerate() {
            let v = &mut img.data[c * n + i];
            *v = (*v - g) * factor + g;
        }
    }
    clamp_all(img);
}
