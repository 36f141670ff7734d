use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A planar (CHW) image with `f64` pixels, normally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation(
                "image",
                format!("{} pixels for a {channels}x{height}x{width} image", data.len()),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Packs images into an NHWC tensor `[B, H, W, C]`.
pub fn to_nhwc(images: &[&Image]) -> Result<ArrayD<f64>> {
    let Some(first) = images.first() else {
        return Err(Error::validation("batch", "no images"));
    };
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut out = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if !img.same_geometry(first) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                c, h, w, img.channels, img.height, img.width
            )));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(img.at(ch, y, x));
                }
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[images.len(), h, w, c]), out).expect("nhwc shape"))
}
