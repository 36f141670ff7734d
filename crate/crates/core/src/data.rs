//! Dataset sources: a procedural shape generator and a folder-per-class loader.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NoisyDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampler::derive_seed;

/// Foreground shape drawn for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Ring,
    Cross,
    Triangle,
    Diamond,
    HorizontalBars,
    VerticalBars,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disk,
        Shape::Square,
        Shape::Ring,
        Shape::Cross,
        Shape::Triangle,
        Shape::Diamond,
        Shape::HorizontalBars,
        Shape::VerticalBars,
    ];

    /// Whether offset `(dx, dy)` from the centre is inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let dist = (dx * dx + dy * dy).sqrt();
        let in_box = dx.abs() <= r && dy.abs() <= r;
        match self {
            Shape::Disk => dist <= r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Ring => dist <= r && dist >= 0.55 * r,
            Shape::Cross => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::HorizontalBars => in_box && ((dy + r) / (0.5 * r)).floor() as i64 % 2 == 0,
            Shape::VerticalBars => in_box && ((dx + r) / (0.5 * r)).floor() as i64 % 2 == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub num_classes: usize,
    /// One shape per class; empty means the first `num_classes` of [`Shape::ALL`].
    pub shapes: Vec<Shape>,
    /// Image geometry comes from the enclosing dataset spec in config files.
    #[serde(skip)]
    pub channels: usize,
    #[serde(skip)]
    pub height: usize,
    #[serde(skip)]
    pub width: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Shape radius is uniform in this fraction of half the image side.
    pub radius: [f64; 2],
    /// Maximum centre offset from the image middle, in pixels.
    pub max_shift: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    /// Per-channel deviation of foreground/background colour from grey.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        Self {
            num_classes: 4,
            shapes: Vec::new(),
            channels: 3,
            height: 16,
            width: 16,
            train_size: 2000,
            test_size: 1000,
            radius: [0.55, 0.85],
            max_shift: 2.0,
            pixel_noise: 0.08,
            tint: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticRecipe {
    pub fn class_shapes(&self) -> Vec<Shape> {
        if self.shapes.is_empty() {
            Shape::ALL.iter().copied().take(self.num_classes).collect()
        } else {
            self.shapes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > Shape::ALL.len() {
            return Err(Error::validation("dataset.num_classes", format!("{} not in [2, {}]", self.num_classes, Shape::ALL.len())));
        }
        let shapes = self.class_shapes();
        if shapes.len() != self.num_classes {
            return Err(Error::validation("dataset.shapes", format!("{} shapes for {} classes", shapes.len(), self.num_classes)));
        }
        for (i, a) in shapes.iter().enumerate() {
            if let Some(j) = shapes[..i].iter().position(|b| b == a) {
                return Err(Error::Calibration(format!("classes {j} and {i} share the rule {a:?}; they cannot be separated")));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::validation("dataset.channels", format!("{}; expected 1 or 3", self.channels)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::validation("dataset.size", "images must be at least 8x8"));
        }
        let [lo, hi] = self.radius;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation("dataset.radius", format!("[{lo}, {hi}] not within (0, 1]")));
        }
        if !(self.pixel_noise >= 0.0 && self.max_shift >= 0.0 && self.tint >= 0.0) {
            return Err(Error::validation("dataset", "pixel_noise, max_shift and tint must be non-negative"));
        }
        Ok(())
    }

    fn render(&self, shape: Shape, rng: &mut ChaCha8Rng) -> Image {
        let (h, w) = (self.height, self.width);
        let half = h.min(w) as f64 / 2.0;
        let r = half * rng.random_range(self.radius[0]..=self.radius[1]);
        let shift = |rng: &mut ChaCha8Rng| if self.max_shift > 0.0 { rng.random_range(-self.max_shift..=self.max_shift) } else { 0.0 };
        let cx = (w as f64 - 1.0) / 2.0 + shift(rng);
        let cy = (h as f64 - 1.0) / 2.0 + shift(rng);
        let bg_level = rng.random_range(0.05..0.35);
        let fg_level = rng.random_range(0.6..0.95);
        let tint = |rng: &mut ChaCha8Rng| if self.tint > 0.0 { rng.random_range(-self.tint..=self.tint) } else { 0.0 };
        let bg: Vec<f64> = (0..self.channels).map(|_| bg_level + tint(rng)).collect();
        let fg: Vec<f64> = (0..self.channels).map(|_| fg_level + tint(rng)).collect();
        let mut img = Image::zeros(self.channels, h, w);
        for y in 0..h {
            for x in 0..w {
                let inside = shape.contains(x as f64 - cx, y as f64 - cy, r);
                for c in 0..self.channels {
                    let base = if inside { fg[c] } else { bg[c] };
                    let noise = if self.pixel_noise > 0.0 { gaussian(rng) * self.pixel_noise } else { 0.0 };
                    *img.at_mut(c, y, x) = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    fn split(&self, split: u64, size: usize) -> Result<NoisyDataset> {
        let shapes = self.class_shapes();
        let stream = derive_seed(self.seed, split);
        let mut images = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = i % self.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, i as u64));
            images.push(self.render(shapes[label], &mut rng));
            labels.push(label);
        }
        NoisyDataset::clean(images, &labels, self.num_classes)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Train and test splits with balanced classes (`label = index mod C`).
/// Every sample has its own seed, so splits never share an image stream.
pub fn generate_synthetic(recipe: &SyntheticRecipe) -> Result<(NoisyDataset, NoisyDataset)> {
    recipe.validate()?;
    if recipe.train_size < recipe.num_classes || recipe.test_size == 0 {
        return Err(Error::validation("dataset split sizes", "train must cover every class and test must be non-empty"));
    }
    Ok((recipe.split(1, recipe.train_size)?, recipe.split(2, recipe.test_size)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FolderDataset {
    pub dataset: NoisyDataset,
    pub class_names: Vec<String>,
    pub paths: Vec<PathBuf>,
    /// Files that could not be decoded and were left out.
    pub skipped: Vec<PathBuf>,
}

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn decode(path: &Path, channels: usize, height: usize, width: usize) -> std::result::Result<Image, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let img = img.resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle);
    let data: Vec<f64> = if channels == 1 {
        let luma = img.to_luma8();
        luma.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
    } else {
        // grayscale sources are replicated across the three channels
        let rgb = img.to_rgb8();
        let mut planes = vec![0.0; 3 * height * width];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                planes[c * height * width + i] = p.0[c] as f64 / 255.0;
            }
        }
        planes
    };
    Image::new(channels, height, width, data).map_err(|e| e.to_string())
}

/// Loads `root/<class>/<image>`; classes are the sorted subdirectory names
/// and files are read in sorted path order.
pub fn load_folder_dataset(root: &Path, channels: usize, height: usize, width: usize) -> Result<FolderDataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::validation("channels", format!("{channels}; expected 1 or 3")));
    }
    if !root.is_dir() {
        return Err(Error::Ingest { path: root.to_path_buf(), reason: "dataset root is not a directory".into() });
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Ingest { path: root.to_path_buf(), reason: format!("found {} class directories", class_dirs.len()) });
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        let before = images.len();
        for f in files {
            match decode(&f, channels, height, width) {
                Ok(img) => {
                    images.push(img);
                    labels.push(label);
                    paths.push(f);
                }
                Err(reason) => {
                    log::warn!("skipping unreadable image {}: {reason}", f.display());
                    skipped.push(f);
                }
            }
        }
        if images.len() == before {
            return Err(Error::Ingest { path: dir.clone(), reason: "class directory has no readable images".into() });
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} unreadable images skipped under {}", skipped.len(), root.display());
    }
    let dataset = NoisyDataset::clean(images, &labels, class_names.len())?;
    Ok(FolderDataset { dataset, class_names, paths, skipped })
}

/// Stratified split of a clean dataset into `(train, test)`; within each class
/// a seeded shuffle picks `round(fraction × n_class)` test samples.
pub fn split_dataset(ds: &NoisyDataset, test_fraction: f64, seed: u64) -> Result<(NoisyDataset, NoisyDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::validation("test_fraction", format!("{test_fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_mask = vec![false; ds.len()];
    for c in 0..ds.num_classes {
        let mut idx: Vec<usize> = ds.records.iter().filter(|r| r.true_label == c).map(|r| r.index).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let k = ((idx.len() as f64) * test_fraction).round() as usize;
        for &i in idx.iter().take(k) {
            test_mask[i] = true;
        }
    }
    let pick = |want: bool| -> Result<NoisyDataset> {
        let (imgs, labels): (Vec<Image>, Vec<usize>) = ds
            .records
            .iter()
            .filter(|r| test_mask[r.index] == want)
            .map(|r| (ds.images[r.index].clone(), r.true_label))
            .unzip();
        NoisyDataset::clean(imgs, &labels, ds.num_classes)
    };
    Ok((pick(false)?, pick(true)?))
}
