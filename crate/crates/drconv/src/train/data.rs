//! Datasets: IDX files on disk and a synthetic region-structured generator.
//!
//! The synthetic task is built so that *where* a pixel is matters as much as
//! what surrounds it: each image is partitioned into a few Voronoi cells,
//! every cell renders the same class-defining grating with its own random
//! phase and brightness, and noise is added on top. A model that can route
//! different filters to different regions has an edge; the ground-truth
//! partition comes back alongside the images so a learned routing can be
//! scored against it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::GuidedMask;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Images in `[0,1]` with one integer label each.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Dataset> {
        if images.shape().n != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy out sample `i` as a batch of one.
    pub fn item(&self, i: usize) -> Tensor4 {
        let s = self.images.shape();
        Tensor4::from_fn(Shape4::new(1, s.h, s.w, s.c), |_, y, x, c| {
            self.images.get(i, y, x, c)
        })
        .expect("single-item shape is valid")
    }

    /// Split into a head of `n` samples and the remaining tail.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "split point {n} must fall strictly inside 1..{}",
                self.len()
            )));
        }
        let s = self.images.shape();
        let head_shape = Shape4::new(n, s.h, s.w, s.c);
        let tail_shape = Shape4::new(s.n - n, s.h, s.w, s.c);
        let row = s.h * s.w * s.c;
        let head = Tensor4::from_vec(head_shape, self.images.data()[..n * row].to_vec())?;
        let tail = Tensor4::from_vec(tail_shape, self.images.data()[n * row..].to_vec())?;
        Ok((
            Dataset { images: head, labels: self.labels[..n].to_vec() },
            Dataset { images: tail, labels: self.labels[n..].to_vec() },
        ))
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Read an IDX image file (unsigned-byte pixels, 3 dimensions) into a
/// single-channel tensor scaled to `[0,1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor4> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let h = read_u32_be(&mut r)? as usize;
    let w = read_u32_be(&mut r)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!(
            "{}: degenerate dimensions {n}x{h}x{w}",
            path.display()
        )));
    }
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after {n} images",
            path.display()
        )));
    }
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor4::from_vec(Shape4::new(n, h, w, 1), data)
}

/// Read an IDX label file (unsigned-byte labels, 1 dimension).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after {n} labels",
            path.display()
        )));
    }
    Ok(bytes.iter().map(|&b| b as usize).collect())
}

/// Load a paired image/label IDX set.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = load_idx_images(images)?;
    let lbls = load_idx_labels(labels)?;
    if imgs.shape().n != lbls.len() {
        return Err(Error::Format(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            imgs.shape().n,
            labels.display(),
            lbls.len()
        )));
    }
    Dataset::new(imgs, lbls)
}

/// Write a single-channel dataset as an IDX image file. Values are clamped
/// to `[0,1]` and rounded to bytes, so a tensor that came from
/// [`load_idx_images`] round-trips exactly.
pub fn write_idx_images(path: &Path, images: &Tensor4) -> Result<()> {
    let s = images.shape();
    if s.c != 1 {
        return Err(Error::Format(format!(
            "IDX images are single-channel, tensor has {} channels",
            s.c
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(s.n as u32).to_be_bytes())?;
    w.write_all(&(s.h as u32).to_be_bytes())?;
    w.write_all(&(s.w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Write labels as an IDX label file. Labels must fit in a byte.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Format(format!("label {bad} does not fit in a byte")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic region-structured task.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Number of images.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Grating-orientation classes; labels cycle `0, 1, ..., classes-1` so
    /// any contiguous split stays balanced to within one sample.
    pub classes: usize,
    /// Voronoi cells per image, drawn uniformly from this inclusive range.
    pub min_regions: usize,
    pub max_regions: usize,
    /// Grating amplitude around the 0.5 gray level.
    pub amplitude: f64,
    /// Grating period in pixels.
    pub period: f64,
    /// Per-region brightness offset, uniform in `±brightness`.
    pub brightness: f64,
    /// Per-pixel Gaussian noise scale.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            count: 512,
            height: 24,
            width: 24,
            classes: 4,
            min_regions: 2,
            max_regions: 4,
            amplitude: 0.28,
            period: 6.0,
            brightness: 0.15,
            noise: 0.05,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic dataset dimensions must be >= 1".into()));
        }
        if self.classes == 0 || self.classes > 256 {
            return Err(Error::Config(format!("classes must be in 1..=256, got {}", self.classes)));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return Err(Error::Config(format!(
                "region range {}..={} is empty or starts at zero",
                self.min_regions, self.max_regions
            )));
        }
        if !(self.amplitude.is_finite() && self.period > 0.0 && self.noise >= 0.0 && self.brightness >= 0.0) {
            return Err(Error::Config("synthetic rendering parameters out of range".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller (two uniforms per draw; the second value
/// is discarded to keep the stream layout simple and reproducible).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate the synthetic task. Returns the dataset and the ground-truth
/// region partition per image (ids `0..r_i` where `r_i` varies per image).
pub fn synth_regions(spec: &SynthSpec, seed: u64) -> Result<(Dataset, GuidedMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (spec.count, spec.height, spec.width);
    let mut images = Tensor4::zeros(Shape4::new(n, h, w, 1))?;
    let mut labels = Vec::with_capacity(n);
    let mut region_ids = vec![0usize; n * h * w];

    for i in 0..n {
        let label = i % spec.classes;
        labels.push(label);
        let theta = std::f64::consts::PI * label as f64 / spec.classes as f64;
        let (dir_y, dir_x) = (theta.sin(), theta.cos());

        let regions = rng.gen_range(spec.min_regions..=spec.max_regions);
        let seeds: Vec<(f64, f64)> = (0..regions)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
            .collect();
        let phases: Vec<f64> = (0..regions).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let offsets: Vec<f64> = (0..regions)
            .map(|_| rng.gen_range(-spec.brightness..=spec.brightness))
            .collect();

        for y in 0..h {
            for x in 0..w {
                // Nearest seed wins; ties go to the smallest id.
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (r, &(sy, sx)) in seeds.iter().enumerate() {
                    let d = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = r;
                    }
                }
                region_ids[(i * h + y) * w + x] = best;

                let along = x as f64 * dir_x + y as f64 * dir_y;
                let wave = (std::f64::consts::TAU * along / spec.period + phases[best]).sin();
                let value = 0.5 + offsets[best] + spec.amplitude * wave + spec.noise * gaussian(&mut rng);
                images.set(i, y, x, 0, value.clamp(0.0, 1.0));
            }
        }
    }

    let truth = GuidedMask::new(n, h, w, region_ids)?;
    Ok((Dataset::new(images, labels)?, truth))
}
